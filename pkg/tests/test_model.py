"""Network structure and behavior: token/width ledger, class-token wiring,
equivariances, ablation semantics, parameter counts, and gradient fidelity."""

import copy

import numpy as np
import pytest

from conftest import random_windows, tiny_config

from gaitpt import numcore as nc
from gaitpt.errors import ConfigError, InputError
from gaitpt.model import (
    GaitPTConfig,
    GaitPTModel,
    joint_merge,
    param_count,
    with_stages,
)
from gaitpt.numcore import Tensor
from gaitpt.training import triplet_loss


def tiny_model(seed=0, **overrides):
    return GaitPTModel(tiny_config(**overrides), seed=seed)


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------

def test_default_config_ledger():
    cfg = GaitPTConfig.build()
    model = GaitPTModel(cfg, seed=0)
    trace = []
    x = random_windows(1, cfg.sequence_length, dtype=np.float32)
    emb = model.embed_batch(x, trace=trace)
    assert [(t, c) for _, t, c in trace] == [(18, 32), (5, 64), (3, 128), (1, 256)]
    assert emb.shape == (1, 256)


def test_default_param_count_in_band():
    model = GaitPTModel(GaitPTConfig.build(), seed=0)
    assert 2_000_000 <= param_count(model) <= 8_000_000


def test_param_count_matches_hand_count_on_toy_config():
    cfg = GaitPTConfig.build(dims=(4, 4, 4, 4), blocks=1, heads=1,
                             sequence_length=3, output_dim=5,
                             spatial_positional=False, temporal_positional=False)
    model = GaitPTModel(cfg, seed=0)

    c = 4
    block = 2 * c + 4 * (c * c + c) + 2 * c + (c * 4 * c + 4 * c) + (4 * c * c + c)
    encoder = c + block            # class token + one block
    input_proj = 2 * c + c
    merge1 = (6 * c * c + c) + 4 * (3 * c * c + c)   # head group + 4 limbs
    merge2 = (1 * c * c + c) + 2 * (2 * c * c + c)   # HUL: head, arms, legs
    merge3 = 3 * c * c + c
    encoders = 7 * encoder          # spatial+temporal for stages 1-3, temporal for 4
    head = (7 * c) * 5 + 5
    expected = input_proj + merge1 + merge2 + merge3 + encoders + head
    assert param_count(model) == expected


def test_doubling_dims_roughly_quadruples_matrix_weights():
    small = GaitPTModel(tiny_config(), seed=0)
    big = GaitPTModel(tiny_config(dims=(16, 32, 64, 128), output_dim=64), seed=0)

    def matrix_weights(m):
        return sum(p.value.size for p in m.params.values() if p.value.ndim == 2)

    ratio = matrix_weights(big) / matrix_weights(small)
    assert 3.0 < ratio < 4.5


def test_embedding_is_unit_norm_and_deterministic():
    model = tiny_model()
    x = random_windows(3, 20, dtype=np.float32)
    e1 = model.embed_batch(x).data
    e2 = model.embed_batch(x.copy()).data
    assert np.allclose(np.linalg.norm(e1, axis=1), 1.0, atol=1e-6)
    assert np.array_equal(e1, e2)


def test_forward_single_sequence_shape():
    model = tiny_model()
    emb = model.forward(random_windows(1, 20)[0])
    assert emb.shape == (32,)


def test_forward_finite_on_all_zero_input():
    model = tiny_model()
    emb = model.forward(np.zeros((20, 18, 2)))
    assert np.isfinite(emb.data).all()


def test_forward_rejects_wrong_frame_count():
    model = tiny_model()
    with pytest.raises(InputError):
        model.embed_batch(random_windows(1, 21))
    with pytest.raises(InputError):
        model.embed_batch(np.zeros((1, 20, 17, 2)))


def test_all_scheme_only_changes_stage3_tokens():
    hul, all_ = [], []
    x = random_windows(1, 20, dtype=np.float32)
    GaitPTModel(tiny_config(), seed=0).embed_batch(x, trace=hul)
    GaitPTModel(tiny_config(scheme="ALL"), seed=0).embed_batch(x, trace=all_)
    assert [(t, c) for _, t, c in hul] == [(18, 8), (5, 16), (3, 32), (1, 64)]
    assert [(t, c) for _, t, c in all_] == [(18, 8), (5, 16), (7, 32), (1, 64)]


# ---------------------------------------------------------------------------
# stage ops
# ---------------------------------------------------------------------------

def test_spatial_stage_rejected_on_body_level():
    model = tiny_model()
    with pytest.raises(ConfigError):
        model.spatial_attention_stage(np.zeros((1, 20, 1, 64), dtype=np.float32), 4)


def test_spatial_stage_is_frame_independent():
    model = tiny_model()
    rng = np.random.default_rng(3)
    feat = rng.normal(size=(4, 18, 8)).astype(np.float32)
    out, cls = model.spatial_attention_stage(feat, 1)
    perm = np.array([2, 0, 3, 1])
    out_p, cls_p = model.spatial_attention_stage(feat[perm], 1)
    assert np.allclose(out_p.data, out.data[perm], atol=1e-6)
    assert np.allclose(cls_p.data, cls.data, atol=1e-6)


def test_spatial_stage_token_permutation_equivariance_without_pos():
    model = tiny_model(spatial_positional=False)
    rng = np.random.default_rng(4)
    feat = rng.normal(size=(3, 18, 8)).astype(np.float64)
    out, cls = model.spatial_attention_stage(feat, 1)
    perm = rng.permutation(18)
    out_p, cls_p = model.spatial_attention_stage(feat[:, perm], 1)
    assert np.allclose(out_p.data, out.data[:, perm], atol=1e-9)
    assert np.allclose(cls_p.data, cls.data, atol=1e-9)


def test_temporal_stage_single_frame_is_finite():
    model = tiny_model()
    out, cls = model.temporal_attention_stage(np.zeros((1, 18, 8), dtype=np.float32), 1)
    assert out.shape == (1, 18, 8) and np.isfinite(out.data).all()
    assert np.isfinite(cls.data).all()


def test_temporal_stage_token_stream_independence():
    model = tiny_model()
    rng = np.random.default_rng(5)
    feat = rng.normal(size=(6, 18, 8)).astype(np.float32)
    out, cls = model.temporal_attention_stage(feat, 1)
    perm = rng.permutation(18)
    out_p, cls_p = model.temporal_attention_stage(feat[:, perm], 1)
    assert np.allclose(out_p.data, out.data[:, perm], atol=1e-5)
    assert np.allclose(cls_p.data, cls.data, atol=1e-5)


def test_temporal_stage_time_reversal_without_pos():
    model = tiny_model(temporal_positional=False)
    rng = np.random.default_rng(6)
    feat = rng.normal(size=(7, 18, 8)).astype(np.float64)
    out, cls = model.temporal_attention_stage(feat, 1)
    out_r, cls_r = model.temporal_attention_stage(feat[::-1], 1)
    assert np.allclose(out_r.data, out.data[::-1], atol=1e-9)
    assert np.allclose(cls_r.data, cls.data, atol=1e-9)


def test_joint_merge_counts_and_passthrough():
    rng = np.random.default_rng(7)
    model = tiny_model()
    feat = Tensor(rng.normal(size=(2, 20, 18, 8)).astype(np.float32))
    merged = model._merge(feat, 1, model.parameter_values())
    assert merged.shape == (2, 20, 5, 16)

    # identity projection on singleton groups passes tokens through
    plan = ((0,), (1,))
    eye = Tensor(np.eye(3))
    zero = Tensor(np.zeros(3))
    x = Tensor(rng.normal(size=(1, 4, 2, 3)))
    out = joint_merge(x, plan, [(eye, zero), (eye, zero)])
    assert np.allclose(out.data, x.data, atol=1e-12)


def test_joint_merge_rejects_non_cover_and_repeats():
    x = Tensor(np.zeros((1, 2, 3, 4)))
    w = Tensor(np.zeros((4, 4)))
    b = Tensor(np.zeros(4))
    with pytest.raises(ConfigError):
        joint_merge(x, ((0, 1),), [(w, b)])            # token 2 uncovered
    with pytest.raises(ConfigError):
        joint_merge(x, ((0, 0), (1, 2)), [(w, b), (w, b)])  # repeated member


def test_hul_stage2_merge_gives_three_double_width_tokens():
    cfg = GaitPTConfig.build()  # default 32/64/128/256
    model = GaitPTModel(cfg, seed=0)
    rng = np.random.default_rng(8)
    feat = Tensor(rng.normal(size=(1, 30, 5, 64)).astype(np.float32))
    out = model._merge(feat, 2, model.parameter_values())
    assert out.shape == (1, 30, 3, 128)


# ---------------------------------------------------------------------------
# stage ablations
# ---------------------------------------------------------------------------

def test_with_stages_full_set_is_identity():
    cfg = tiny_config()
    assert with_stages(cfg, (1, 2, 3, 4)) == cfg


def test_with_stages_stage4_only():
    model = GaitPTModel(with_stages(tiny_config(), {4}), seed=0)
    trace = []
    model.embed_batch(random_windows(1, 20, dtype=np.float32), trace=trace)
    assert [(t, c) for _, t, c in trace] == [(18, 8), (5, 16), (3, 32), (1, 64)]
    assert model.class_layout == [(4, "temporal", 64)]
    assert not any(".spatial." in name for name in model.params)


def test_with_stages_one_and_four():
    model = GaitPTModel(with_stages(tiny_config(), {1, 4}), seed=0)
    assert model.class_layout == [(1, "spatial", 8), (1, "temporal", 8), (4, "temporal", 64)]
    # merge projections persist for the skipped stages
    assert any(name.startswith("merge2.") for name in model.params)
    assert any(name.startswith("merge3.") for name in model.params)
    assert not any(name.startswith("stage2.") or name.startswith("stage3.") for name in model.params)


def test_with_stages_rejects_empty_or_unknown():
    with pytest.raises(ConfigError):
        with_stages(tiny_config(), ())
    with pytest.raises(ConfigError):
        with_stages(tiny_config(), {0, 1})


# ---------------------------------------------------------------------------
# relabeling invariance
# ---------------------------------------------------------------------------

def test_forward_invariant_to_within_group_relabeling_without_pos():
    # Swapping joints consistently in the input and in the merge plan's
    # member lists must not change the embedding (no positional tables).
    cfg = tiny_config(spatial_positional=False, temporal_positional=False, dtype="float64")
    model = GaitPTModel(cfg, seed=1)
    x = random_windows(2, 20)

    sigma = {i: i for i in range(18)}
    sigma.update({5: 9, 9: 5, 11: 15, 15: 11, 1: 3, 3: 1})  # swaps inside L_ARM, L_LEG, HEAD

    relabeled = copy.copy(model)
    relabeled.merge_plans = tuple(
        tuple(tuple(sigma[m] for m in group) for group in plan) if stage == 0 else plan
        for stage, plan in enumerate(model.merge_plans)
    )
    x_p = x.copy()
    for src, dst in sigma.items():
        x_p[:, :, dst] = x[:, :, src]

    base = model.embed_batch(x).data
    moved = relabeled.embed_batch(x_p).data
    assert np.allclose(base, moved, atol=1e-9)


# ---------------------------------------------------------------------------
# gradients through the whole network
# ---------------------------------------------------------------------------

def test_triplet_loss_gradient_matches_finite_differences():
    cfg = tiny_config(sequence_length=4, dtype="float64")
    model = GaitPTModel(cfg, seed=2)
    x = random_windows(3, 4)

    def f(xt):
        emb = model.embed_batch(xt)
        return triplet_loss(emb[0], emb[1], emb[2], margin=0.1)

    report = nc.grad_check(f, Tensor(x), h=1e-5, tol=1e-4)
    assert report.passed, f"max_rel_err={report.max_rel_err:.3e}"


def test_flat_parameter_gradcheck():
    cfg = tiny_config(sequence_length=4, dtype="float64")
    model = GaitPTModel(cfg, seed=3)
    x = random_windows(1, 4)

    def f(theta):
        emb = model.embed_batch(Tensor(x), params=model.params_from_flat(theta))
        return nc.tensor_sum(nc.mul(emb, emb + 0.5))

    report = nc.grad_check(f, model.flat_parameters(), tol=1e-5,
                           sample=48, rng=np.random.default_rng(0))
    assert report.passed, f"max_rel_err={report.max_rel_err:.3e}"


def test_config_validation():
    with pytest.raises(ConfigError):
        GaitPTConfig.build(dims=(8, 16, 32))
    with pytest.raises(ConfigError):
        GaitPTConfig.build(heads=3)       # 32 % 3 != 0... dims[0]=32 default
    with pytest.raises(ConfigError):
        GaitPTConfig.build(output_dim=0)
    with pytest.raises(ConfigError):
        GaitPTConfig.build(dtype="float16")
    with pytest.raises(ConfigError):
        GaitPTConfig.build(active_stages=())
