import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ucam import gca as G
from ucam import losses as L
from ucam.model import ForwardPass, init_params
from ucam.numerics import RngStream

fields = arrays(np.float64, (2, 2, 3), elements=st.floats(-5, 5))


def test_certainty_product_rules():
    gu, gy = np.array([1.0, -2.0, 3.0]), np.array([2.0, 1.0, -1.0])
    assert np.array_equal(G.certainty_product(gu, gy, 0.0), np.zeros(3))
    assert np.array_equal(G.certainty_product(gu, gy, 1.0), [-2.0, 2.0, 3.0])
    assert np.array_equal(G.certainty_product(gu, gy, 2.0), 2 * G.certainty_product(gu, gy, 1.0))
    with pytest.raises(ValueError):
        G.certainty_product(gu, gy[:2], 1.0)


def test_certainty_activation_rules():
    x = np.array([0.5, 2.0])
    assert np.array_equal(G.certainty_activation(x, -10), x)
    assert np.array_equal(G.certainty_activation(-x, -10), -10 * x)
    assert G.certainty_activation(np.zeros(1), -10)[0] == 0.0
    with pytest.raises(ValueError):
        G.certainty_activation(x, 1.0)


def test_config_validation():
    for kw in ({"lam": -1}, {"gamma": 0.5}, {"normalization": "l2"}, {"eps_norm": 0.0}):
        with pytest.raises(ValueError):
            G.GCAConfig(**kw)


def test_normalize_examples():
    soft, summ = G.GCAConfig(), G.GCAConfig(normalization="sum")
    assert np.allclose(G.normalize_mask(np.full((2, 3, 4), 7.0), soft), 1 / 24)
    x = np.array([[1.0, 3.0], [0.0, 0.0]])
    assert np.array_equal(G.normalize_mask(x, summ), x / 4)
    assert np.array_equal(G.normalize_mask(np.zeros((2, 2)), summ), np.zeros((2, 2)))


@given(fields)
def test_softmax_mask_is_distribution(x):
    m = G.normalize_mask(x, G.GCAConfig())
    assert np.all(m >= 0)
    assert m.sum() == pytest.approx(1.0, abs=1e-12)


@given(arrays(np.float64, (3, 2, 2, 2), elements=st.floats(0, 5)))
def test_sum_mask_idempotent_on_normalized(x):
    cfg = G.GCAConfig(normalization="sum")
    m = G.normalize_mask(x, cfg, batched=True)
    for i in range(3):
        if x[i].sum() >= cfg.eps_norm:
            assert m[i].sum() == pytest.approx(1.0)
        else:
            assert np.all(m[i] == 0)
    assert np.allclose(G.normalize_mask(m, cfg, batched=True), m, atol=1e-15)


def test_batched_mask_is_per_example():
    x = np.random.default_rng(0).normal(size=(3, 2, 2, 2))
    m = G.certainty_mask(x, -x, G.GCAConfig(), batched=True)
    for i in range(3):
        assert np.allclose(m[i], G.certainty_mask(x[i], -x[i], G.GCAConfig(), batched=False))


def test_inject_residual():
    gy = np.ones((2, 2))
    assert np.array_equal(G.inject_residual_gradient(gy, np.zeros((2, 2))), gy)
    m1, m2 = np.full((2, 2), 0.1), np.arange(4.0).reshape(2, 2)
    assert np.allclose(G.inject_residual_gradient(G.inject_residual_gradient(gy, m1), m2),
                       G.inject_residual_gradient(gy, m1 + m2))
    with pytest.raises(ValueError):
        G.inject_residual_gradient(gy, np.zeros(3))


def test_injection_difference_is_backward_of_mask(small_params, small_batch):
    """Two-pass oracle: the trunk gradient shift equals the backward of the mask alone."""
    fp = ForwardPass(small_params, small_batch.scenes, small_batch.bow)
    cot = {0: (L.cross_entropy_grad(fp.logits, small_batch.targets), None)}
    mask = G.normalize_mask(np.random.default_rng(1).normal(size=fp.F.shape), G.GCAConfig(),
                            batched=True)
    with_mask = fp.backward(cot, inject=mask)
    without = fp.backward(cot)
    alone = fp.trunk_backward(mask)
    for p in ("image", "question", "attention"):
        for k in alone[p]:
            assert np.allclose(with_mask[p][k] - without[p][k], alone[p][k], atol=1e-12)


def test_certainty_map_examples():
    F = np.array([[[1.0], [2.0]], [[3.0], [-1.0]]])
    field = np.array([[[0.5], [0.5]], [[1.0], [2.0]]])
    # w = mean(field) = 1, heat = relu(F) / max = [[1, 2], [3, 0]] / 3
    assert np.allclose(G.certainty_map(F, field)[..., ], np.array([[1, 2], [3, 0]]) / 3)
    u = G.certainty_map(np.ones((3, 3, 4)), np.full((3, 3, 4), 0.2))
    assert np.array_equal(u, np.ones((3, 3)))
    assert np.array_equal(G.certainty_map(np.ones((2, 2, 1)), -np.ones((2, 2, 1))), np.zeros((2, 2)))


@given(arrays(np.float64, (3, 3, 2), elements=st.floats(-3, 3)),
       arrays(np.float64, (1, 1, 2), elements=st.floats(-3, 3)))
def test_certainty_map_range(F, w):
    h = G.certainty_map(F, np.broadcast_to(w, F.shape))
    assert np.all((h >= 0) & (h <= 1))
    assert h.max() in (0.0, 1.0)


def test_baseline_step_matches_plain_trainer(small_cfg, small_batch):
    params = init_params(small_cfg, RngStream(0))
    ref = params.copy()
    opts = G.make_optimizers(1e-3)
    ref_opt = G.Adam(1e-3)
    cfg = G.GCAConfig(lam=0.0)
    root = RngStream(7)
    for step in range(20):
        params, _ = G.gca_training_step(small_batch, params, "baseline", cfg, 4, opts, root, step)
        ref, _ = G.sce_training_step(small_batch, ref, ref_opt, root, step)
        assert params.equal(ref)


def test_step_is_deterministic(small_cfg, small_batch):
    out = []
    for _ in range(2):
        params = init_params(small_cfg, RngStream(0))
        opts = G.make_optimizers(1e-3)
        for step in range(3):
            params, res = G.gca_training_step(small_batch, params, "p-gca", G.GCAConfig(), 3, opts,
                                              RngStream(2), step)
        out.append(params.digest())
    assert out[0] == out[1]


def test_gca_step_injects_mask_into_tap(small_cfg, small_batch):
    params = init_params(small_cfg, RngStream(0))
    _, res = G.gca_training_step(small_batch, params, "a-gca", G.GCAConfig(), 3,
                                 G.make_optimizers(1e-3), RngStream(2), 0)
    assert np.allclose(res.mask.sum(axis=(1, 2, 3)), 1.0)
    # the tap carries the scaled joint-cost gradient plus mask / n
    fp = res.fp
    _, plain = fp.head_backward(G._scaled(*_cotangents(fp, small_batch), 0.5, len(small_batch)),
                                want_params=False)
    assert np.allclose(fp.tap_gradient - plain, res.mask / len(small_batch), atol=1e-15)
    _, other = G.gca_training_step(small_batch, params, "aul+ve", G.GCAConfig(), 3,
                                   G.make_optimizers(1e-3), RngStream(2), 0)
    assert other.mask is None


def _cotangents(fp, batch):
    mc = L.MCConfig(3, RngStream(2).derive(G.DISTORT_STREAM, 0))
    _, cot_y, cot_u = L.step_objective(fp, batch.targets, L.get_mode("a-gca"), mc, L.LossHyper())
    return cot_y, cot_u


def test_step_bundle_invariants(small_cfg, small_batch):
    params = init_params(small_cfg, RngStream(0))
    for mode in L.MODES:
        _, res = G.gca_training_step(small_batch, params, mode, G.GCAConfig(), 3,
                                     G.make_optimizers(1e-3), RngStream(1), 0)
        b = res.bundle
        m = L.get_mode(mode)
        want = (b.L_p if m.components & {"AUL", "PUL"} else 0.0) + b.L_VE + b.L_UDL
        assert b.L_u == pytest.approx(want)
        assert b.C_total == pytest.approx(b.L_y + 0.5 * b.L_u)
        if "VE" not in m.components:
            assert b.L_VE == 0.0
        if "UDL" not in m.components:
            assert b.L_UDL == 0.0


def test_empty_batch_rejected(small_cfg, small_batch):
    params = init_params(small_cfg, RngStream(0))
    with pytest.raises(ValueError, match="empty batch"):
        G.gca_training_step(small_batch.take(np.array([], dtype=int)), params, "a-gca",
                            G.GCAConfig(), 3, G.make_optimizers(), RngStream(0), 0)


@pytest.mark.parametrize("mode", ["baseline", "a-gca"])
def test_overfit_sixteen_examples(mode):
    from ucam import data as D
    from ucam.model import ModelConfig

    # ambiguous records resolve by raster order, which a position-free encoder cannot see
    recs = [r for r in D.generate_records(3, "train", 40) if not r.ambiguous][:16]
    batch = D.encode_records(recs)
    params = init_params(ModelConfig(), RngStream(0))
    opts = G.make_optimizers(3e-3)
    hp = L.LossHyper(sigma0=2.0)
    for step in range(200):
        params, res = G.gca_training_step(batch, params, mode, G.GCAConfig(), 4, opts,
                                          RngStream(0), step, dropout=0.0, hp=hp)
    assert res.bundle.L_y < 0.05
