import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ucam import losses as L
from ucam.model import DropoutSpec, ForwardPass, predict
from ucam.numerics import RngStream, log_softmax, softmax

logits = arrays(np.float64, 6, elements=st.floats(-20, 20))
variances = arrays(np.float64, 6, elements=st.floats(0, 5))


def mc(T, seed=0, scale="stddev"):
    return L.MCConfig(T, RngStream(seed), scale)


def oracle_distorted(y, sigma2, target, n=100_000, seed=123):
    """Large-sample estimate with its own generator, plus the T=32 standard error."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, len(y)))
    w = softmax(y + eps * np.sqrt(sigma2))[:, target]
    return -math.log(w.mean()), w.std() / (w.mean() * math.sqrt(32))


# --- cross entropy ----------------------------------------------------------------

def test_cross_entropy_values():
    assert L.cross_entropy(np.zeros(16), 3) == pytest.approx(math.log(16), abs=1e-15)
    y = np.zeros(16)
    y[5] = 50.0
    assert L.cross_entropy(y, 5) < 1e-20
    with pytest.raises(ValueError):
        L.cross_entropy(np.zeros(4), 4)


@given(logits, st.integers(0, 5))
def test_cross_entropy_is_neg_log_softmax(y, k):
    assert L.cross_entropy(y, k) == pytest.approx(-log_softmax(y)[k], abs=1e-12)
    assert L.cross_entropy(y, k) >= 0


# --- distortion ---------------------------------------------------------------------

def test_distort_zero_variance_is_identity():
    y = np.arange(5.0)
    for t in range(4):
        assert np.array_equal(L.distort_logits(y, np.zeros(5), mc(4), t), y)


def test_distort_reproducible_and_negative_rejected():
    y = np.zeros(3)
    a = L.distort_logits(y, np.ones(3), mc(2, seed=9), 1)
    assert np.array_equal(a, L.distort_logits(y, np.ones(3), mc(2, seed=9), 1))
    with pytest.raises(ValueError, match="negative variance"):
        L.distort_logits(y, -np.ones(3), mc(2), 0)


def test_distortion_variance_stddev_mode():
    y = np.zeros(100_000)
    d = L.distort_logits(y, np.ones_like(y), mc(1, seed=5), 0)
    assert 0.98 <= d.var() <= 1.02
    d = L.distort_logits(y, np.full_like(y, 4.0), mc(1, seed=5, scale="variance"), 0)
    assert d.var() == pytest.approx(16.0, rel=0.02)


# --- AUL / PUL ----------------------------------------------------------------------

@pytest.mark.parametrize("T", [1, 10, 100])
def test_aul_zero_variance_is_cross_entropy(T):
    rng = np.random.default_rng(T)
    for _ in range(10):
        y, k = rng.normal(size=16) * 3, int(rng.integers(16))
        assert abs(L.aleatoric_loss(y, np.zeros(16), k, mc(T)) - L.cross_entropy(y, k)) <= 1e-12


def test_aul_single_class_is_zero():
    assert L.aleatoric_loss(np.array([3.0]), np.array([2.0]), 0, mc(5)) == 0.0


def test_aul_literal_sign_flag():
    y, s = np.array([1.0, -1.0, 0.5]), np.ones(3)
    assert L.aleatoric_loss(y, s, 0, mc(4), paper_literal_sign=True) == -L.aleatoric_loss(y, s, 0, mc(4))


def test_mc_config_rejects_bad_values():
    with pytest.raises(ValueError):
        L.MCConfig(0)
    with pytest.raises(ValueError):
        L.MCConfig(3, RngStream(0), "bogus")


def test_aul_matches_large_sample_oracle():
    rng = np.random.default_rng(0)
    for i in range(20):
        y, s, k = rng.normal(size=6) * 2, rng.uniform(0.1, 3.0, 6), int(rng.integers(6))
        want, se = oracle_distorted(y, s, k)
        got = L.aleatoric_loss(y, s, k, mc(32, seed=i))
        assert abs(got - want) <= 3 * se


def test_pul_matches_large_sample_oracle():
    rng = np.random.default_rng(1)
    y, k, s = rng.normal(size=6) * 2, 2, 1.7
    want, se = oracle_distorted(y, np.full(6, s), k)
    assert abs(L.predictive_loss(y, s, k, mc(32, seed=4)) - want) <= 3 * se


def test_aul_standard_error_slope():
    rng = np.random.default_rng(2)
    y, s, k = rng.normal(size=6), np.full(6, 2.0), 1
    Ts = [8, 32, 128, 512]
    se = [np.std([L.aleatoric_loss(y, s, k, mc(T, seed=r)) for r in range(300)]) for T in Ts]
    slope = np.polyfit(np.log(Ts), np.log(se), 1)[0]
    assert -0.6 <= slope <= -0.4


def test_pul_zero_is_cross_entropy_and_broadcasts():
    y = np.array([0.3, -1.2, 2.0, 0.0])
    assert L.predictive_loss(y, 0.0, 2, mc(7)) == pytest.approx(L.cross_entropy(y, 2), abs=1e-12)
    assert L.predictive_loss(y, 0.8, 1, mc(7)) == L.aleatoric_loss(y, np.full(4, 0.8), 1, mc(7))
    yb = np.stack([y, -y])
    got = L.predictive_loss(yb, np.array([0.8, 0.2]), np.array([1, 0]), mc(7))
    assert got[0] == L.aleatoric_loss(yb, np.array([[0.8] * 4, [0.2] * 4]), np.array([1, 0]), mc(7))[0]


@given(logits, variances, st.integers(0, 5))
@settings(max_examples=30, deadline=None)
def test_distorted_gradient_matches_finite_differences(y, s, k):
    s = s + 0.05
    cfg = mc(5, seed=3)
    _, dy, ds = L.distorted_loss_and_grad(y, s, k, cfg)
    h = 1e-6
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        fy = (L.aleatoric_loss(y + e, s, k, cfg) - L.aleatoric_loss(y - e, s, k, cfg)) / (2 * h)
        fs = (L.aleatoric_loss(y, s + e, k, cfg) - L.aleatoric_loss(y, s - e, k, cfg)) / (2 * h)
        assert dy[i] == pytest.approx(fy, abs=1e-5)
        assert ds[i] == pytest.approx(fs, abs=1e-5)


# --- VE / UDL -------------------------------------------------------------------------

def test_variance_equalizer_values():
    assert L.variance_equalizer(np.full(4, 0.25), 0.5) == 0.0
    assert L.variance_equalizer(np.array([1.0]), 0.0) == pytest.approx(math.e - 1, abs=1e-7)
    with pytest.raises(ValueError):
        L.variance_equalizer(np.array([-1.0]))


@given(variances, st.integers(0, 5), st.floats(0.01, 1))
def test_variance_equalizer_monotone(s, i, bump):
    t = s.copy()
    t[i] += bump
    assert L.variance_equalizer(t, 0.5) >= L.variance_equalizer(s, 0.5)
    if s[i] >= 0.25:
        assert L.variance_equalizer(t, 0.5) > L.variance_equalizer(s, 0.5)


def test_udl_values():
    assert L.uncertainty_distorted_loss(1.3, 1.3) == 0.0
    assert L.uncertainty_distorted_loss(2.0, 1.0) == 1.0
    assert L.uncertainty_distorted_loss(0.0, 1.0) == pytest.approx(math.exp(-1) - 1, abs=1e-7)
    assert L.uncertainty_distorted_loss(0.0, 0.0, variant="algorithm") == 1.0
    with pytest.raises(ValueError):
        L.uncertainty_distorted_loss(0.0, 0.0, variant="other")


@given(st.floats(-50, 50), st.floats(0.1, 3))
def test_udl_bounded_and_continuous(delta, alpha):
    assert L.uncertainty_distorted_loss(delta, 0.0, alpha) >= -alpha
    h = 1e-9
    left = L.uncertainty_distorted_loss(-h, 0.0, alpha)
    right = L.uncertainty_distorted_loss(h, 0.0, alpha)
    assert abs(left - right) < 1e-8


@pytest.mark.parametrize("variant", ["equation", "algorithm"])
def test_udl_gradient(variant):
    for d in (-1.3, -0.2, 0.4, 2.0):
        h = 1e-6
        fd = (L.uncertainty_distorted_loss(d + h, 0, 0.7, variant)
              - L.uncertainty_distorted_loss(d - h, 0, 0.7, variant)) / (2 * h)
        assert L.uncertainty_distorted_loss_grad(d, 0, 0.7, variant) == pytest.approx(fd, abs=1e-6)


# --- predictive uncertainty ------------------------------------------------------------

def test_predictive_uncertainty_examples():
    est = L.predictive_uncertainty(np.full(16, 1 / 16), [0.0, 0.0])
    assert est.sigma2_p == pytest.approx(math.log(16), abs=1e-15)
    est = L.predictive_uncertainty(np.eye(4)[1], [2.0, 2.0])
    assert est.sigma2_p == 2.0


@given(arrays(np.float64, 5, elements=st.floats(0, 1)),
       st.lists(st.floats(0, 10), min_size=1, max_size=6))
def test_predictive_uncertainty_invariants(w, v):
    p = w / w.sum() if w.sum() > 0 else np.full(5, 0.2)
    est = L.predictive_uncertainty(p, v)
    assert est.sigma2_p == est.H + est.mean_aleatoric
    assert est.sigma2_p >= est.H >= 0
    assert est.mean_aleatoric >= 0


def test_mc_predictive_distribution(small_params, small_batch):
    p, v = L.mc_predictive_distribution(small_params, small_batch, 0.0, mc(4))
    y = predict(small_params, small_batch)[0]
    assert np.allclose(p, softmax(y), atol=1e-15)
    assert np.all(v == v[:1])
    p, v = L.mc_predictive_distribution(small_params, small_batch, 0.4, mc(6))
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert v.shape == (6, len(small_batch)) and np.all(v >= 0)
    assert not np.all(v == v[:1])
    p1, _ = L.mc_predictive_distribution(small_params, small_batch, 0.4, mc(1, seed=2))
    fp = ForwardPass(small_params, small_batch.scenes, small_batch.bow,
                     DropoutSpec(0.4, RngStream(2).derive(0)))
    assert np.allclose(p1, softmax(fp.logits), atol=1e-15)


# --- modes and bundles -------------------------------------------------------------------

TABLE = {
    "baseline": {"SCE"}, "ve": {"SCE", "VE"}, "udl": {"SCE", "UDL"},
    "aul": {"SCE", "AUL"}, "pul": {"SCE", "PUL"}, "udl+ve": {"SCE", "UDL", "VE"},
    "aul+ve": {"SCE", "AUL", "VE"}, "pul+ve": {"SCE", "PUL", "VE"},
    "aul+udl": {"SCE", "AUL", "UDL"}, "pul+udl": {"SCE", "PUL", "UDL"},
    "a-gca": {"SCE", "AUL", "VE", "UDL"}, "p-gca": {"SCE", "PUL", "VE", "UDL"},
}


def test_mode_table_exhaustive():
    assert list(L.MODES) == list(TABLE)
    for name, comps in TABLE.items():
        m = L.get_mode(name)
        assert set(m.components) == comps
        assert m.gca == name.endswith("gca")
    assert L.get_mode("P-GCA").name == "p-gca"
    with pytest.raises(ValueError, match="valid modes"):
        L.get_mode("gca")


COMPONENTS = {"L_y": np.array([1.0, 2.0]), "L_p": np.array([0.5, 0.7]),
              "L_VE": np.array([0.1, 0.3]), "L_UDL": np.array([-0.2, 0.4])}


def test_total_uncertainty_loss_rows():
    b = L.total_uncertainty_loss(COMPONENTS, "baseline")
    assert b.L_u == 0.0 and b.C_total == 1.5
    b = L.total_uncertainty_loss(COMPONENTS, "aul+ve")
    assert b.L_u == pytest.approx(0.6 + 0.2)
    b = L.total_uncertainty_loss(COMPONENTS, "p-gca", mc(3))
    assert b.L_u == pytest.approx(0.6 + 0.2 + 0.1)
    assert b.C_total == pytest.approx(1.5 + 0.5 * b.L_u)
    with pytest.raises(ValueError):
        L.total_uncertainty_loss(COMPONENTS, "pul")


def test_total_cost():
    bs = [L.LossBundle(1.0, 0, 0, 0, 2.0, 0, "aul"), L.LossBundle(3.0, 0, 0, 0, 4.0, 0, "aul")]
    assert L.total_cost(bs, 0.0) == 2.0
    assert L.total_cost(bs[:1], 0.25) == 1.5
    a, b = L.total_cost(bs, 1.0), L.total_cost(bs, 2.0)
    assert b - a == pytest.approx(a - L.total_cost(bs, 0.0))
    with pytest.raises(ValueError, match="empty batch"):
        L.total_cost([], 0.5)


def test_step_objective_disabled_components_are_zero(small_params, small_batch):
    fp = ForwardPass(small_params, small_batch.scenes, small_batch.bow)
    parts, _, cot_u = L.step_objective(fp, small_batch.targets, L.get_mode("aul+ve"), mc(3),
                                       L.LossHyper())
    assert np.all(parts["L_UDL"] == 0)
    assert np.allclose(parts["L_u"], parts["L_p"] + parts["L_VE"])
    parts, _, cot_u = L.step_objective(fp, small_batch.targets, L.get_mode("baseline"), mc(3),
                                       L.LossHyper())
    assert cot_u is None and np.all(parts["L_u"] == 0)
    with pytest.raises(ValueError, match="MC-dropout"):
        L.step_objective(fp, small_batch.targets, L.get_mode("pul"), mc(3), L.LossHyper())
