"""Triplet loss, batch-hard mining, AdamW, the cyclic schedule, and the
training loop's determinism and learning behavior."""

import io
import math

import numpy as np
import pytest

from conftest import fast_train_config, tiny_config, tiny_splits

from gaitpt import numcore as nc
from gaitpt.errors import ConfigError, SamplingError, ShapeError
from gaitpt.model import GaitPTModel
from gaitpt.numcore import GradTape, Parameter, Tensor
from gaitpt.training import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    batch_hard_mine,
    cyclic_lr,
    euclidean_distance,
    pairwise_distances,
    train,
    triplet_loss,
)


# ---------------------------------------------------------------------------
# triplet loss
# ---------------------------------------------------------------------------

def test_triplet_loss_direct_evaluation():
    a, p, n = np.array([0.0]), np.array([0.5]), np.array([0.1])
    loss = triplet_loss(a, p, n, margin=0.02)
    assert math.isclose(loss.item(), 0.42, rel_tol=1e-12)


def test_triplet_loss_hinges_at_zero():
    a, p, n = np.array([0.0]), np.array([0.1]), np.array([0.5])
    assert triplet_loss(a, p, n, margin=0.02).item() == 0.0
    unhinged = triplet_loss(a, p, n, margin=0.02, hinge=False)
    assert math.isclose(unhinged.item(), -0.38, rel_tol=1e-12)


def test_triplet_loss_degenerate_triplet_equals_margin():
    v = np.array([0.3, -0.2, 0.9])
    assert triplet_loss(v, v, v, margin=0.02).item() == 0.02


def test_triplet_loss_batched_mean():
    a = np.zeros((2, 1))
    p = np.array([[0.5], [0.3]])
    n = np.array([[0.1], [0.1]])
    loss = triplet_loss(a, p, n, margin=0.02)
    assert math.isclose(loss.item(), ((0.5 - 0.1 + 0.02) + (0.3 - 0.1 + 0.02)) / 2, rel_tol=1e-12)


def test_triplet_loss_rejects_dim_mismatch():
    with pytest.raises(ShapeError):
        triplet_loss(np.zeros(3), np.zeros(4), np.zeros(3))


def test_triplet_loss_nonnegative_and_zero_condition():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, p, n = rng.normal(size=(3, 6))
        m = float(rng.uniform(0.0, 0.5))
        loss = triplet_loss(a, p, n, margin=m).item()
        assert loss >= 0.0
        d_ap = np.linalg.norm(a - p)
        d_an = np.linalg.norm(a - n)
        assert (loss == 0.0) == (d_an >= d_ap + m)


def test_identical_embeddings_give_zero_gradient_at_zero_margin():
    # loss 0 at the hinge corner -> subgradient 0 -> no parameter motion
    v = Tensor(np.array([0.3, 0.7]), requires_grad=True)
    with GradTape():
        loss = triplet_loss(v, v, v, margin=0.0)
        assert loss.item() == 0.0
        nc.backward(loss)
    assert np.allclose(v.grad.data, 0.0)


# ---------------------------------------------------------------------------
# mining
# ---------------------------------------------------------------------------

def brute_force_mine(embeddings, labels):
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = list(labels)
    out = []
    for i in range(len(labels)):
        d = [float(np.linalg.norm(emb[i] - emb[j])) for j in range(len(labels))]
        pos = [(d[j], j) for j in range(len(labels)) if labels[j] == labels[i] and j != i]
        neg = [(d[j], j) for j in range(len(labels)) if labels[j] != labels[i]]
        hardest_pos = max(pos, key=lambda t: (t[0], -t[1]))[1]
        hardest_neg = min(neg, key=lambda t: (t[0], t[1]))[1]
        out.append((i, hardest_pos, hardest_neg))
    return out


def test_mining_two_identities_matches_exhaustive_search():
    emb = np.array([[0.0, 0.0], [1.0, 0.0], [4.0, 0.0], [4.5, 0.0]])
    labels = ["a", "a", "b", "b"]
    assert batch_hard_mine(emb, labels) == brute_force_mine(emb, labels)


def test_mining_identical_embeddings_yields_valid_triplets():
    emb = np.zeros((4, 3))
    labels = ["a", "a", "b", "b"]
    for a, p, n in batch_hard_mine(emb, labels):
        assert labels[a] == labels[p] and a != p
        assert labels[a] != labels[n]
        assert triplet_loss(emb[a], emb[p], emb[n], margin=0.02).item() == 0.02


def test_mining_matches_brute_force_on_random_batches():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n_labels = rng.integers(2, 5)
        counts = rng.integers(2, 5, size=n_labels)
        labels = [f"id{i}" for i, c in enumerate(counts) for _ in range(c)]
        emb = rng.normal(size=(len(labels), rng.integers(2, 6)))
        assert batch_hard_mine(emb, labels) == brute_force_mine(emb, labels)


def test_mining_hardest_negative_property():
    rng = np.random.default_rng(7)
    emb = rng.normal(size=(12, 4))
    labels = ["a", "a", "a", "b", "b", "b", "c", "c", "c", "d", "d", "d"]
    d = pairwise_distances(emb)
    for a, _, n in batch_hard_mine(emb, labels):
        others = [d[a, j] for j in range(12) if labels[j] != labels[a]]
        assert d[a, n] <= min(others) + 1e-12


def test_mining_preconditions_name_the_offender():
    with pytest.raises(SamplingError, match="id1"):
        batch_hard_mine(np.zeros((3, 2)), ["id0", "id0", "id1"])
    with pytest.raises(SamplingError):
        batch_hard_mine(np.zeros((3, 2)), ["solo", "solo", "solo"])


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def make_params(values):
    return {name: Parameter(name, Tensor(np.asarray(v, dtype=np.float64)))
            for name, v in values.items()}


def test_adamw_zero_gradient_keeps_parameters():
    params = make_params({"w": [1.0, -2.0]})
    state = OptimizerState.for_params(params)
    adamw_step(params, {"w": np.zeros(2)}, state, lr=0.1, weight_decay=0.0)
    assert np.array_equal(params["w"].value.data, [1.0, -2.0])


def test_adamw_pure_decay():
    params = make_params({"w": [1.0, -2.0]})
    state = OptimizerState.for_params(params)
    adamw_step(params, {"w": np.zeros(2)}, state, lr=0.1, weight_decay=0.5)
    assert np.allclose(params["w"].value.data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.5))


def test_adamw_first_step_is_signed_unit_step():
    params = make_params({"w": [0.0]})
    state = OptimizerState.for_params(params)
    adamw_step(params, {"w": np.array([3.7])}, state, lr=0.01)
    # bias correction makes m_hat / sqrt(v_hat) = sign(g) up to eps
    assert np.allclose(params["w"].value.data, [-0.01], atol=1e-6)
    params2 = make_params({"w": [0.0]})
    state2 = OptimizerState.for_params(params2)
    adamw_step(params2, {"w": np.array([-0.2])}, state2, lr=0.01)
    assert np.allclose(params2["w"].value.data, [0.01], atol=1e-6)


def test_adamw_descends_a_quadratic():
    params = make_params({"w": [5.0, -3.0]})
    state = OptimizerState.for_params(params)
    for _ in range(200):
        w = params["w"].value.data
        adamw_step(params, {"w": 2.0 * w}, state, lr=0.05)
    assert np.linalg.norm(params["w"].value.data) < 0.5


def test_adamw_moment_shapes_track_parameters():
    params = make_params({"a": np.zeros((2, 3)), "b": np.zeros(4)})
    state = OptimizerState.for_params(params)
    assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (4,)


# ---------------------------------------------------------------------------
# cyclic schedule
# ---------------------------------------------------------------------------

def test_cyclic_lr_starts_at_minimum():
    cfg = TrainConfig()
    assert cyclic_lr(0, cfg) == 1e-4


def test_cyclic_lr_peak_value():
    cfg = TrainConfig()
    expected = 1e-4 + (1e-2 - 1e-4) * 0.995 ** 15
    assert math.isclose(cyclic_lr(15, cfg), expected, rel_tol=1e-12)


def test_cyclic_lr_amplitude_decays_to_minimum():
    cfg = TrainConfig()
    assert cyclic_lr(15 * 401, cfg) < 1e-4 + 1e-6  # odd multiple of the half-cycle: a peak


def test_cyclic_lr_stays_in_band():
    cfg = TrainConfig()
    values = [cyclic_lr(i, cfg) for i in range(0, 500)]
    assert all(cfg.lr_min <= v <= cfg.lr_max for v in values)
    assert max(values) > 5e-3  # early peaks actually approach lr_max


def test_euclidean_distance_values():
    d = euclidean_distance(Tensor(np.array([0.0, 0.0])), Tensor(np.array([3.0, 4.0])))
    assert d.item() == 5.0


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_reduces_loss_on_synthetic_identities():
    splits = tiny_splits(identities=4, sequences_per_identity=4, frames=30, views=(90,), seed=5)
    model = GaitPTModel(tiny_config(), seed=0)
    log = train(model, splits["train"] + splits["probe"], fast_train_config(epochs=4, seed=3),
                log_stream=io.StringIO())
    assert log[-1]["mean_loss"] < log[0]["mean_loss"]
    assert set(log[0]) == {"epoch", "lr", "mean_loss", "active_triplets"}


def test_train_is_bitwise_reproducible():
    splits = tiny_splits(identities=4, sequences_per_identity=4, frames=30, views=(90,), seed=6)
    data = splits["train"] + splits["probe"]

    def run():
        model = GaitPTModel(tiny_config(), seed=1)
        log = train(model, data, fast_train_config(epochs=2, seed=9), log_stream=io.StringIO())
        return log, {k: p.value.data.copy() for k, p in model.params.items()}

    log1, params1 = run()
    log2, params2 = run()
    assert log1 == log2
    assert all(np.array_equal(params1[k], params2[k]) for k in params1)


def test_train_rejects_insufficient_identities():
    splits = tiny_splits(identities=2, sequences_per_identity=4, frames=30, views=(90,), seed=7)
    model = GaitPTModel(tiny_config(), seed=0)
    with pytest.raises(ConfigError):
        train(model, splits["train"], fast_train_config(), log_stream=io.StringIO())


def test_train_rejects_short_sequences():
    splits = tiny_splits(identities=4, sequences_per_identity=4, frames=10, views=(90,), seed=8)
    model = GaitPTModel(tiny_config(), seed=0)  # window 20 > 10 frames
    with pytest.raises(ConfigError):
        train(model, splits["train"], fast_train_config(), log_stream=io.StringIO())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(margin=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_min=0.1, lr_max=0.01)
    with pytest.raises(ConfigError):
        TrainConfig(gamma=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(step_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(k=1)
    with pytest.raises(ConfigError):
        TrainConfig(distance="cosine")
    with pytest.raises(ConfigError):
        TrainConfig(scheduler_per="batch")
