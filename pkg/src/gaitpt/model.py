"""The gait pyramid network: four stages of spatial and temporal attention
over progressively merged skeleton tokens, producing one embedding per
walking sequence.

Token granularity advances 18 joints -> 5 limbs -> limb groups -> 1 body
token while the channel width doubles per stage (default 32/64/128/256).
Each stage runs a spatial encoder (tokens within a frame; absent at the
body level) and a temporal encoder (one token's trajectory through time),
each with its own learned class token. All class outputs are concatenated
and projected to the final embedding, which is L2-normalized so Euclidean
triplet margins are scale-free.

Stages can be deactivated for ablations; the merge projections always chain
so the token path still reaches the body level.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, InputError, ShapeError
from .numcore import AttentionWeights, Parameter, Tensor
from .skeleton import JOINTS, GaitSequence, PartitionScheme, merge_plan, token_counts

DEFAULT_DIMS = (32, 64, 128, 256)
INPUT_CHANNELS = 2


@dataclass(frozen=True)
class StageConfig:
    """Width, depth, and activation of one pyramid stage."""

    index: int
    dim: int
    blocks: int = 3
    heads: int = 4
    has_spatial: bool = True
    active: bool = True


@dataclass(frozen=True)
class GaitPTConfig:
    """Wiring of the full pyramid; see `GaitPTConfig.build` for defaults."""

    stages: tuple[StageConfig, ...]
    scheme: PartitionScheme = PartitionScheme.HUL
    sequence_length: int = 30
    output_dim: int = 256
    ffn_multiplier: int = 4
    spatial_positional: bool = True
    temporal_positional: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if len(self.stages) != 4 or [s.index for s in self.stages] != [1, 2, 3, 4]:
            raise ConfigError("config needs stages indexed 1..4 in order")
        if not any(s.active for s in self.stages):
            raise ConfigError("at least one stage must be active")
        if self.stages[3].has_spatial:
            raise ConfigError("the body-level stage has no spatial encoder")
        if self.output_dim < 1:
            raise ConfigError(f"output_dim must be positive, got {self.output_dim}")
        if self.sequence_length < 1 or self.ffn_multiplier < 1:
            raise ConfigError("sequence_length and ffn_multiplier must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        for s in self.stages:
            if s.dim < 1 or s.blocks < 1 or s.heads < 1:
                raise ConfigError(f"stage {s.index}: dim/blocks/heads must be positive")
            if s.dim % s.heads != 0:
                raise ConfigError(f"stage {s.index}: width {s.dim} not divisible by {s.heads} heads")

    @staticmethod
    def build(
        dims: Sequence[int] = DEFAULT_DIMS,
        blocks: int | Sequence[int] = 3,
        heads: int | Sequence[int] = 4,
        scheme: PartitionScheme | str = PartitionScheme.HUL,
        sequence_length: int = 30,
        output_dim: int = 256,
        ffn_multiplier: int = 4,
        spatial_positional: bool = True,
        temporal_positional: bool = True,
        dtype: str = "float32",
        active_stages: Iterable[int] = (1, 2, 3, 4),
    ) -> "GaitPTConfig":
        """Assemble a config from per-stage scalars or 4-element sequences."""
        if len(dims) != 4:
            raise ConfigError(f"need 4 stage dims, got {list(dims)}")
        blocks = [blocks] * 4 if isinstance(blocks, int) else list(blocks)
        heads = [heads] * 4 if isinstance(heads, int) else list(heads)
        active = set(active_stages)
        if not active or not active.issubset({1, 2, 3, 4}):
            raise ConfigError(f"active stages must be a nonempty subset of 1..4, got {sorted(active)}")
        stages = tuple(
            StageConfig(
                index=i + 1,
                dim=int(dims[i]),
                blocks=int(blocks[i]),
                heads=int(heads[i]),
                has_spatial=(i != 3),
                active=(i + 1) in active,
            )
            for i in range(4)
        )
        return GaitPTConfig(
            stages=stages,
            scheme=PartitionScheme(scheme),
            sequence_length=sequence_length,
            output_dim=output_dim,
            ffn_multiplier=ffn_multiplier,
            spatial_positional=spatial_positional,
            temporal_positional=temporal_positional,
            dtype=dtype,
        )

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(s.dim for s in self.stages)

    @property
    def active_stages(self) -> tuple[int, ...]:
        return tuple(s.index for s in self.stages if s.active)

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "blocks": [s.blocks for s in self.stages],
            "heads": [s.heads for s in self.stages],
            "active_stages": list(self.active_stages),
            "scheme": self.scheme.value,
            "sequence_length": self.sequence_length,
            "output_dim": self.output_dim,
            "ffn_multiplier": self.ffn_multiplier,
            "spatial_positional": self.spatial_positional,
            "temporal_positional": self.temporal_positional,
            "dtype": self.dtype,
        }

    @staticmethod
    def from_dict(d: dict) -> "GaitPTConfig":
        return GaitPTConfig.build(**d)


def default_config(**overrides) -> GaitPTConfig:
    return GaitPTConfig.build(**overrides)


def with_stages(config: GaitPTConfig, active: Iterable[int]) -> GaitPTConfig:
    """Config with only `active` stages keeping their encoders.

    Merges still chain between deactivated stages, so token granularity and
    width advance exactly as in the full model.
    """
    active = set(active)
    if not active or not active.issubset({1, 2, 3, 4}):
        raise ConfigError(f"active stages must be a nonempty subset of 1..4, got {sorted(active)}")
    stages = tuple(replace(s, active=s.index in active) for s in config.stages)
    return replace(config, stages=stages)


# ---------------------------------------------------------------------------
# functional pieces
# ---------------------------------------------------------------------------

def joint_merge(feat: Tensor, plan, projections) -> Tensor:
    """Merge token groups: concatenate each group's members in plan order,
    then linearly project to the new width.

    `plan` is a sequence of index groups over the token axis; together the
    groups must cover every input token and no group may repeat a member.
    Groups may overlap each other (the ALL scheme is an overlapping cover).
    `projections` supplies one (w, b) pair per group with w shaped
    (len(group) * C_in, C_out).
    """
    if feat.ndim != 4:
        raise ShapeError(f"joint_merge expects (batch, frames, tokens, C), got {feat.shape}")
    b, n, t_in, c_in = feat.shape
    covered = set()
    for group in plan:
        if len(set(group)) != len(group):
            raise ConfigError(f"merge group {group} repeats a token")
        if any(i < 0 or i >= t_in for i in group):
            raise ConfigError(f"merge group {group} is out of range for {t_in} tokens")
        covered.update(group)
    if covered != set(range(t_in)):
        missing = sorted(set(range(t_in)) - covered)
        raise ConfigError(f"merge plan does not cover tokens {missing}")
    if len(projections) != len(plan):
        raise ConfigError(f"{len(plan)} groups but {len(projections)} projections")

    outs = []
    for group, (w, bias) in zip(plan, projections):
        sel = nc.index_select(feat, 2, list(group))
        flat = nc.reshape(sel, (b, n, len(group) * c_in))
        proj = nc.linear(flat, w, bias)
        outs.append(nc.reshape(proj, (b, n, 1, w.shape[1])))
    return nc.concat(outs, axis=2)


def _l2_normalize(x: Tensor) -> Tensor:
    norm = nc.sqrt(nc.tensor_sum(nc.mul(x, x), axis=-1, keepdims=True) + 1e-12)
    return nc.div(x, norm)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

class GaitPTModel:
    """Parameters and forward pass of the pyramid.

    Parameters live in an insertion-ordered name -> Parameter dict; the order
    is the checkpoint payload order. A built model is immutable during
    inference, so concurrent embedding calls are safe; training mutates
    parameter values and must be single-writer.
    """

    def __init__(self, config: GaitPTConfig, seed: int = 0):
        self.config = config
        self.merge_plans = tuple(merge_plan(s, config.scheme) for s in (1, 2, 3))
        self.params: dict[str, Parameter] = {}
        self.class_layout: list[tuple[int, str, int]] = []
        self._np_dtype = np.float32 if config.dtype == "float32" else np.float64
        self._build(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------

    def _add(self, name: str, array: np.ndarray) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(name, Tensor(array.astype(self._np_dtype)))

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        dims = cfg.dims
        counts = token_counts(cfg.scheme)

        def w(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        self._add("input_proj.w", w(INPUT_CHANNELS, dims[0]))
        self._add("input_proj.b", np.zeros(dims[0]))

        for s in (1, 2, 3):
            for gi, group in enumerate(self.merge_plans[s - 1]):
                self._add(f"merge{s}.g{gi}.w", w(len(group) * dims[s - 1], dims[s]))
                self._add(f"merge{s}.g{gi}.b", np.zeros(dims[s]))

        for stage in cfg.stages:
            if not stage.active:
                continue
            c = stage.dim
            tokens = counts[stage.index - 1]
            if stage.has_spatial:
                self._add_encoder(stage, "spatial", tokens, cfg.spatial_positional, rng)
                self.class_layout.append((stage.index, "spatial", c))
            self._add_encoder(stage, "temporal", cfg.sequence_length, cfg.temporal_positional, rng)
            self.class_layout.append((stage.index, "temporal", c))

        concat_width = sum(width for _, _, width in self.class_layout)
        self._add("head.w", w(concat_width, cfg.output_dim))
        self._add("head.b", np.zeros(cfg.output_dim))

    def _add_encoder(self, stage: StageConfig, kind: str, seq_len: int,
                     positional: bool, rng: np.random.Generator) -> None:
        c = stage.dim
        hidden = self.config.ffn_multiplier * c
        base = f"stage{stage.index}.{kind}"

        def w(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        self._add(f"{base}.cls", w(c))
        if positional:
            self._add(f"{base}.pos", w(seq_len + 1, c))
        for i in range(stage.blocks):
            blk = f"{base}.block{i}"
            self._add(f"{blk}.ln1.g", np.ones(c))
            self._add(f"{blk}.ln1.b", np.zeros(c))
            for proj in ("wq", "wk", "wv", "wo"):
                self._add(f"{blk}.attn.{proj}", w(c, c))
            for bias in ("bq", "bk", "bv", "bo"):
                self._add(f"{blk}.attn.{bias}", np.zeros(c))
            self._add(f"{blk}.ln2.g", np.ones(c))
            self._add(f"{blk}.ln2.b", np.zeros(c))
            self._add(f"{blk}.ffn.w1", w(c, hidden))
            self._add(f"{blk}.ffn.b1", np.zeros(hidden))
            self._add(f"{blk}.ffn.w2", w(hidden, c))
            self._add(f"{blk}.ffn.b2", np.zeros(c))

    # -- parameter plumbing --------------------------------------------------

    def parameter_values(self) -> dict[str, Tensor]:
        return {name: p.value for name, p in self.params.items()}

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.value.zero_grad()

    def flat_parameters(self) -> Tensor:
        """All parameter values concatenated into one vector (copy)."""
        return Tensor(
            np.concatenate([p.value.data.reshape(-1) for p in self.params.values()])
        )

    def params_from_flat(self, flat: Tensor) -> dict[str, Tensor]:
        """Differentiable view of a flat vector as the named parameter dict."""
        if flat.size != self.param_count():
            raise ShapeError(f"flat vector has {flat.size} entries, model has {self.param_count()}")
        out, offset = {}, 0
        for name, p in self.params.items():
            size = p.value.size
            out[name] = nc.reshape(flat[offset : offset + size], p.value.shape)
            offset += size
        return out

    # -- forward pieces -------------------------------------------------------

    def _stage(self, index: int) -> StageConfig:
        if index < 1 or index > 4:
            raise ConfigError(f"stage index must be 1..4, got {index}")
        return self.config.stages[index - 1]

    def _with_class(self, x: Tensor, base: str, p: dict[str, Tensor]) -> Tensor:
        rows, t, c = x.shape
        cls = nc.broadcast_to(nc.reshape(p[f"{base}.cls"], (1, 1, c)), (rows, 1, c))
        x = nc.concat([cls, x], axis=1)
        pos = p.get(f"{base}.pos")
        if pos is not None:
            if pos.shape[0] < t + 1:
                raise ShapeError(
                    f"{base}: {t} tokens exceed the positional table of {pos.shape[0] - 1}"
                )
            x = nc.add(x, nc.reshape(pos[: t + 1], (1, t + 1, c)))
        return x

    def _encoder(self, x: Tensor, stage: StageConfig, kind: str,
                 p: dict[str, Tensor]) -> Tensor:
        for i in range(stage.blocks):
            blk = f"stage{stage.index}.{kind}.block{i}"
            h = nc.layer_norm(x, p[f"{blk}.ln1.g"], p[f"{blk}.ln1.b"])
            h = nc.multi_head_attention(
                h,
                AttentionWeights(
                    wq=p[f"{blk}.attn.wq"], wk=p[f"{blk}.attn.wk"],
                    wv=p[f"{blk}.attn.wv"], wo=p[f"{blk}.attn.wo"],
                    bq=p[f"{blk}.attn.bq"], bk=p[f"{blk}.attn.bk"],
                    bv=p[f"{blk}.attn.bv"], bo=p[f"{blk}.attn.bo"],
                ),
                stage.heads,
            )
            x = nc.add(x, h)
            h = nc.layer_norm(x, p[f"{blk}.ln2.g"], p[f"{blk}.ln2.b"])
            h = nc.linear(h, p[f"{blk}.ffn.w1"], p[f"{blk}.ffn.b1"])
            h = nc.gelu(h)
            h = nc.linear(h, p[f"{blk}.ffn.w2"], p[f"{blk}.ffn.b2"])
            x = nc.add(x, h)
        return x

    def _coerce_feat(self, feat) -> tuple[Tensor, bool]:
        t = feat if isinstance(feat, Tensor) else Tensor(np.asarray(feat, dtype=self._np_dtype))
        if t.ndim == 3:
            return nc.reshape(t, (1,) + t.shape), True
        if t.ndim != 4:
            raise ShapeError(f"expected (frames, tokens, C) or batched, got {t.shape}")
        return t, False

    def spatial_attention_stage(self, feat, stage_index: int, params=None):
        """Attention across the tokens of each frame independently.

        Returns the per-frame token outputs (class stripped) and the mean
        over frames of the class outputs.
        """
        stage = self._stage(stage_index)
        if not stage.has_spatial:
            raise ConfigError(f"stage {stage_index} has no spatial encoder")
        if not stage.active:
            raise ConfigError(f"stage {stage_index} is deactivated")
        x, squeeze = self._coerce_feat(feat)
        p = params or self.parameter_values()
        b, n, t, c = x.shape
        flat = nc.reshape(x, (b * n, t, c))
        flat = self._with_class(flat, f"stage{stage_index}.spatial", p)
        flat = self._encoder(flat, stage, "spatial", p)
        cls = nc.mean(nc.reshape(flat[:, 0, :], (b, n, c)), axis=1)
        toks = nc.reshape(flat[:, 1:, :], (b, n, t, c))
        if squeeze:
            return nc.reshape(toks, (n, t, c)), nc.reshape(cls, (c,))
        return toks, cls

    def temporal_attention_stage(self, feat, stage_index: int, params=None):
        """Attention through time for each token stream independently.

        Returns the token outputs (class stripped) and the mean over token
        streams of the class outputs.
        """
        stage = self._stage(stage_index)
        if not stage.active:
            raise ConfigError(f"stage {stage_index} is deactivated")
        x, squeeze = self._coerce_feat(feat)
        p = params or self.parameter_values()
        b, n, t, c = x.shape
        flat = nc.reshape(nc.transpose(x, (0, 2, 1, 3)), (b * t, n, c))
        flat = self._with_class(flat, f"stage{stage_index}.temporal", p)
        flat = self._encoder(flat, stage, "temporal", p)
        cls = nc.mean(nc.reshape(flat[:, 0, :], (b, t, c)), axis=1)
        toks = nc.transpose(nc.reshape(flat[:, 1:, :], (b, t, n, c)), (0, 2, 1, 3))
        if squeeze:
            return nc.reshape(toks, (n, t, c)), nc.reshape(cls, (c,))
        return toks, cls

    def _merge(self, feat: Tensor, transition: int, p: dict[str, Tensor]) -> Tensor:
        plan = self.merge_plans[transition - 1]
        projections = [
            (p[f"merge{transition}.g{gi}.w"], p[f"merge{transition}.g{gi}.b"])
            for gi in range(len(plan))
        ]
        return joint_merge(feat, plan, projections)

    # -- embedding -----------------------------------------------------------

    def embed_batch(self, x, params: dict[str, Tensor] | None = None,
                    trace: list | None = None) -> Tensor:
        """Embed a batch of pose windows (B, n, 18, 2) -> (B, output_dim).

        `params` substitutes parameter tensors by name (used for functional
        gradient checks); `trace`, when given, collects (stage, tokens, width)
        after each stage's merge.
        """
        cfg = self.config
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self._np_dtype))
        if t.ndim == 3:
            t = nc.reshape(t, (1,) + t.shape)
        if t.ndim != 4 or t.shape[2] != JOINTS or t.shape[3] != INPUT_CHANNELS:
            raise InputError(f"expected input of shape (B, n, {JOINTS}, {INPUT_CHANNELS}), got {t.shape}")
        if t.shape[1] != cfg.sequence_length:
            raise InputError(
                f"sequence length {t.shape[1]} does not match configured {cfg.sequence_length}"
            )
        p = params or self.parameter_values()

        feat = nc.linear(t, p["input_proj.w"], p["input_proj.b"])
        class_outputs = []
        for stage in cfg.stages:
            if stage.index > 1:
                feat = self._merge(feat, stage.index - 1, p)
            if trace is not None:
                trace.append((stage.index, feat.shape[2], feat.shape[3]))
            if not stage.active:
                continue
            if stage.has_spatial:
                feat, cls = self.spatial_attention_stage(feat, stage.index, p)
                class_outputs.append(cls)
            feat, cls = self.temporal_attention_stage(feat, stage.index, p)
            class_outputs.append(cls)

        merged = nc.concat(class_outputs, axis=-1)
        emb = nc.linear(merged, p["head.w"], p["head.b"])
        return _l2_normalize(emb)

    def forward(self, seq) -> Tensor:
        """Embed a single normalized sequence window into (output_dim,)."""
        frames = seq.frames if isinstance(seq, GaitSequence) else np.asarray(seq)
        emb = self.embed_batch(frames.reshape((1,) + tuple(frames.shape[-3:])))
        return nc.reshape(emb, (self.config.output_dim,))

    def embed_arrays(self, windows: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Inference-mode embeddings for stacked windows (N, n, 18, 2)."""
        outs = []
        for start in range(0, windows.shape[0], chunk):
            outs.append(self.embed_batch(windows[start : start + chunk]).data)
        return np.concatenate(outs, axis=0)


def param_count(model: GaitPTModel) -> int:
    return model.param_count()
