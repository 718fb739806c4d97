"""Metric-learning trainer: triplet loss with batch-hard mining over
identity-balanced P x K batches, AdamW, and a decaying cyclic learning rate.

The loss gradient is computed on the embedding matrix and pushed back
through the network in micro-batches, so peak memory stays near one
micro-batch forward pass regardless of P x K.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, InputError, SamplingError, ShapeError
from .model import GaitPTModel
from .numcore import GradTape, Parameter, Tensor
from .skeleton import GaitSequence, sample_window


@dataclass
class TrainConfig:
    """Hyperparameters; the loss/schedule defaults are the reference setup."""

    margin: float = 0.02
    distance: str = "euclidean"
    p: int = 8                 # identities per batch
    k: int = 4                 # sequences per identity
    lr_min: float = 1e-4
    lr_max: float = 1e-2
    gamma: float = 0.995       # cyclic amplitude decay
    step_size: int = 15        # scheduler iterations per half-cycle
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    seed: int = 0
    hinge: bool = True
    scheduler_per: str = "epoch"   # "epoch" or "iteration"
    steps_per_epoch: int | None = None
    micro_batch: int = 8

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.distance != "euclidean":
            raise ConfigError(f"unsupported distance {self.distance!r}")
        if not self.lr_min < self.lr_max:
            raise ConfigError(f"need lr_min < lr_max, got {self.lr_min} >= {self.lr_max}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.step_size < 1:
            raise ConfigError(f"step_size must be >= 1, got {self.step_size}")
        if self.p < 2 or self.k < 2:
            raise ConfigError(f"P x K batches need p >= 2 and k >= 2, got {self.p}x{self.k}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.scheduler_per not in ("epoch", "iteration"):
            raise ConfigError(f"scheduler_per must be 'epoch' or 'iteration', got {self.scheduler_per!r}")
        if self.micro_batch < 1:
            raise ConfigError(f"micro_batch must be >= 1, got {self.micro_batch}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def for_params(params: dict[str, Parameter]) -> "OptimizerState":
        return OptimizerState(
            m={name: np.zeros_like(p.value.data) for name, p in params.items()},
            v={name: np.zeros_like(p.value.data) for name, p in params.items()},
        )


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """L2 distance along the last axis (differentiable; 0 has a 0 adjoint)."""
    diff = nc.sub(a, b)
    return nc.sqrt(nc.tensor_sum(nc.mul(diff, diff), axis=-1))


def triplet_loss(
    anchor,
    positive,
    negative,
    margin: float = 0.02,
    distance: str = "euclidean",
    hinge: bool = True,
) -> Tensor:
    """d(a,p) - d(a,n) + margin, hinged at zero by default.

    Inputs of shape (D,) give the single-triplet loss; (B, D) batches are
    averaged. The unhinged form (hinge=False) can go negative and exists for
    fidelity experiments only.
    """
    if distance != "euclidean":
        raise ConfigError(f"unsupported distance {distance!r}")
    a, p, n = (x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
               for x in (anchor, positive, negative))
    if not a.shape == p.shape == n.shape:
        raise ShapeError(f"triplet embeddings disagree: {a.shape}, {p.shape}, {n.shape}")
    raw = nc.add(nc.sub(euclidean_distance(a, p), euclidean_distance(a, n)), margin)
    per_triplet = nc.relu(raw) if hinge else raw
    return nc.mean(per_triplet) if per_triplet.ndim > 0 else per_triplet


# ---------------------------------------------------------------------------
# mining
# ---------------------------------------------------------------------------

def pairwise_distances(embeddings: np.ndarray) -> np.ndarray:
    """Dense Euclidean distance matrix (numpy, not differentiable).

    Computed from explicit differences, not the expanded quadratic form, so
    each entry is bit-identical to norm(a - b); rankings derived from it
    match per-pair oracles exactly. Memory is O(n^2 d): fine at batch scale.
    """
    diff = embeddings[:, None, :] - embeddings[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def batch_hard_mine(embeddings: np.ndarray, labels) -> list[tuple[int, int, int]]:
    """Per anchor: hardest positive (max distance, same label, not itself)
    and hardest negative (min distance, different label).

    Ties break toward the lowest index. Every label must occur at least
    twice and at least two labels must be present.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if emb.ndim != 2 or emb.shape[0] != labels.shape[0]:
        raise ShapeError(f"embeddings {emb.shape} do not match {labels.shape[0]} labels")
    uniq, counts = np.unique(labels, return_counts=True)
    if uniq.size < 2:
        raise SamplingError(f"mining needs >= 2 distinct labels, got only {uniq[0]!r}")
    thin = uniq[counts < 2]
    if thin.size:
        raise SamplingError(f"label {thin[0]!r} has fewer than 2 samples in the batch")

    d = pairwise_distances(emb)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    triplets = []
    for i in range(emb.shape[0]):
        pos = np.where(same[i], d[i], -np.inf)
        neg = np.where(~same[i], d[i], np.inf)
        neg[i] = np.inf
        triplets.append((i, int(np.argmax(pos)), int(np.argmin(neg))))
    return triplets


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def adamw_step(
    params: dict[str, Parameter],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    m <- b1 m + (1-b1) g ; v <- b2 v + (1-b2) g^2 ; bias-corrected;
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta.
    Parameters without an entry in `grads` are treated as zero-gradient.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        theta = p.value.data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        elif g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        theta -= lr * update.astype(theta.dtype)
        if weight_decay:
            theta -= lr * weight_decay * theta


def cyclic_lr(iteration: int, cfg: TrainConfig) -> float:
    """Triangular wave between lr_min and lr_min + amplitude * gamma^iter,
    with `step_size` iterations per half-cycle. Starts at lr_min."""
    if iteration < 0:
        raise InputError(f"iteration must be >= 0, got {iteration}")
    cycle = math.floor(1 + iteration / (2.0 * cfg.step_size))
    x = abs(iteration / cfg.step_size - 2.0 * cycle + 1.0)
    amplitude = (cfg.lr_max - cfg.lr_min) * (cfg.gamma ** iteration)
    return cfg.lr_min + amplitude * max(0.0, 1.0 - x)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _group_by_subject(dataset: list[GaitSequence]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, seq in enumerate(dataset):
        groups.setdefault(seq.subject_id, []).append(i)
    return groups


def train(
    model: GaitPTModel,
    dataset: list[GaitSequence],
    cfg: TrainConfig,
    out_dir=None,
    log_stream=None,
    on_epoch=None,
) -> list[dict]:
    """Train in place; returns the per-epoch log (also printed as JSON lines).

    `dataset` holds normalized sequences at least one window long. Each epoch
    writes a checkpoint under `out_dir` when given. `on_epoch(model, entry)`
    may return True to stop early. Deterministic for a fixed cfg.seed.
    """
    window = model.config.sequence_length
    groups = _group_by_subject(dataset)
    subjects = sorted(groups)
    if len(subjects) < cfg.p:
        raise ConfigError(f"{len(subjects)} identities cannot fill P={cfg.p} batches")
    short = [i for i, s in enumerate(dataset) if len(s) < window]
    if short:
        raise ConfigError(
            f"{len(short)} sequences are shorter than the {window}-frame window; filter first"
        )

    rng = np.random.default_rng(cfg.seed)
    steps = cfg.steps_per_epoch or max(1, round(len(dataset) / (cfg.p * cfg.k)))
    params = model.params
    state = OptimizerState.for_params(params)
    log: list[dict] = []
    stream = log_stream if log_stream is not None else sys.stdout
    iteration = 0

    for epoch in range(cfg.epochs):
        losses, active = [], []
        for _ in range(steps):
            picked = rng.choice(len(subjects), size=cfg.p, replace=False)
            batch_idx: list[int] = []
            for s in picked:
                pool = groups[subjects[s]]
                batch_idx.extend(
                    int(pool[j])
                    for j in rng.choice(len(pool), size=cfg.k, replace=len(pool) < cfg.k)
                )
            windows = np.stack(
                [
                    sample_window(dataset[i], window, "train_random", rng).frames
                    for i in batch_idx
                ]
            ).astype(model._np_dtype)
            labels = [dataset[i].subject_id for i in batch_idx]

            lr = cyclic_lr(epoch if cfg.scheduler_per == "epoch" else iteration, cfg)
            loss_value, active_fraction = _train_step(
                model, windows, labels, cfg, state, lr
            )
            losses.append(loss_value)
            active.append(active_fraction)
            iteration += 1

        entry = {
            "epoch": epoch,
            "lr": cyclic_lr(epoch if cfg.scheduler_per == "epoch" else iteration - 1, cfg),
            "mean_loss": float(np.mean(losses)),
            "active_triplets": float(np.mean(active)),
        }
        log.append(entry)
        print(json.dumps(entry), file=stream)
        if out_dir is not None:
            from . import dataio

            dataio.save_checkpoint(model, f"{out_dir}/epoch{epoch:03d}.ckpt")
        if on_epoch is not None and on_epoch(model, entry):
            break
    return log


def _train_step(
    model: GaitPTModel,
    windows: np.ndarray,
    labels,
    cfg: TrainConfig,
    state: OptimizerState,
    lr: float,
) -> tuple[float, float]:
    """Forward in micro-batches, mine, and push the loss gradient back."""
    batch = windows.shape[0]
    chunks: list[tuple[GradTape, Tensor, slice]] = []
    parts = []
    for start in range(0, batch, cfg.micro_batch):
        stop = min(start + cfg.micro_batch, batch)
        with GradTape() as tape:
            emb = model.embed_batch(windows[start:stop])
        chunks.append((tape, emb, slice(start, stop)))
        parts.append(emb.data)
    embeddings = np.concatenate(parts, axis=0)

    triplets = batch_hard_mine(embeddings, labels)
    a_idx, p_idx, n_idx = (list(t) for t in zip(*triplets))

    emb_leaf = Tensor(embeddings.astype(np.float64), requires_grad=True)
    with GradTape():
        loss = triplet_loss(
            nc.index_select(emb_leaf, 0, a_idx),
            nc.index_select(emb_leaf, 0, p_idx),
            nc.index_select(emb_leaf, 0, n_idx),
            margin=cfg.margin,
            hinge=cfg.hinge,
        )
        nc.backward(loss)
    cotangent = emb_leaf.grad.data.astype(embeddings.dtype)

    model.zero_grad()
    for tape, emb, sl in chunks:
        nc.backward_from(emb, cotangent[sl])
    grads = {
        name: p.grad.data for name, p in model.params.items() if p.grad is not None
    }
    adamw_step(
        model.params, grads, state, lr,
        beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay,
    )
    model.zero_grad()

    d = pairwise_distances(embeddings.astype(np.float64))
    margins = d[a_idx, p_idx] - d[a_idx, n_idx] + cfg.margin
    return float(loss.item()), float(np.mean(margins > 0))
