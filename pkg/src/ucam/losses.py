"""Classification and uncertainty losses, with their logit-space gradients.

All per-example functions accept a single logit vector ``(C,)`` or a batch
``(B, C)``.  Gradients are returned per example and unscaled; averaging over
the batch happens once, in the training step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream, entropy, gaussian_sample, log_sum_exp, sigmoid, softmax, softplus

COMPONENTS = ("SCE", "AUL", "PUL", "VE", "UDL")


@dataclass(frozen=True)
class Mode:
    name: str
    components: frozenset
    gca: bool = False

    @property
    def distorted(self):
        """Which variance drives the distorted loss: aleatoric or predictive."""
        return "predictive" if "PUL" in self.components else "aleatoric"

    @property
    def uses_variance(self):
        return bool(self.components & {"AUL", "PUL", "VE", "UDL"})

    def enabled(self, component):
        return component in self.components


def _mode(name, *parts, gca=False):
    return Mode(name, frozenset(("SCE",) + parts), gca)


# rows of the ablation table, in table order
MODES = {m.name: m for m in (
    _mode("baseline"),
    _mode("ve", "VE"),
    _mode("udl", "UDL"),
    _mode("aul", "AUL"),
    _mode("pul", "PUL"),
    _mode("udl+ve", "UDL", "VE"),
    _mode("aul+ve", "AUL", "VE"),
    _mode("pul+ve", "PUL", "VE"),
    _mode("aul+udl", "AUL", "UDL"),
    _mode("pul+udl", "PUL", "UDL"),
    _mode("a-gca", "AUL", "VE", "UDL", gca=True),
    _mode("p-gca", "PUL", "VE", "UDL", gca=True),
)}


def get_mode(name):
    key = name.lower().replace(" ", "")
    if key not in MODES:
        raise ValueError(f"invalid mode {name!r}; valid modes: {', '.join(MODES)}")
    return MODES[key]


@dataclass(frozen=True)
class MCConfig:
    T: int = 10
    stream: RngStream = field(default_factory=lambda: RngStream(0))
    perturb_scale: str = "stddev"

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.perturb_scale not in ("stddev", "variance"):
            raise ValueError("perturb_scale must be 'stddev' or 'variance'")


@dataclass
class UncertaintyEstimate:
    sigma2_a: np.ndarray
    H: float
    sigma2_p: float
    mean_aleatoric: float


@dataclass
class LossBundle:
    L_y: float
    L_p: float
    L_VE: float
    L_UDL: float
    L_u: float
    C_total: float
    mode: str


def _onehot(target, C):
    target = np.asarray(target)
    if np.any(target < 0) or np.any(target >= C):
        raise ValueError(f"target out of range for {C} classes")
    return np.eye(C)[target]


def cross_entropy(y_hat, target):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    oh = _onehot(target, y_hat.shape[-1])
    return log_sum_exp(y_hat, axis=-1) - np.sum(oh * y_hat, axis=-1)


def cross_entropy_grad(y_hat, target):
    return softmax(y_hat, axis=-1) - _onehot(target, np.shape(y_hat)[-1])


def _perturbation(sigma2, mode):
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 < 0):
        raise ValueError("negative variance")
    if mode == "variance":
        return sigma2, np.ones_like(sigma2)
    scale = np.sqrt(sigma2)
    # d sqrt(v)/dv; the zero-variance case has no distortion to differentiate
    dscale = np.where(scale > 0, 0.5 / np.where(scale > 0, scale, 1.0), 0.0)
    return scale, dscale


def _noise(mc, t, shape):
    return gaussian_sample(mc.stream.derive(t), shape)


def distort_logits(y_hat, sigma2, mc: MCConfig, t):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    scale, _ = _perturbation(np.broadcast_to(sigma2, y_hat.shape), mc.perturb_scale)
    return y_hat + _noise(mc, t, y_hat.shape) * scale


def distorted_loss_and_grad(y_hat, sigma2, target, mc: MCConfig):
    """Negative log of the MC-averaged true-class softmax of distorted logits.

    Returns ``(loss, d_loss/d_y_hat, d_loss/d_sigma2)``.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), y_hat.shape)
    oh = _onehot(target, y_hat.shape[-1])
    scale, dscale = _perturbation(sigma2, mc.perturb_scale)
    eps = np.stack([_noise(mc, t, y_hat.shape) for t in range(mc.T)])
    yt = y_hat + eps * scale
    logp = yt - log_sum_exp(yt, axis=-1, keepdims=True)
    ll = np.sum(oh * logp, axis=-1)                       # (T, ...)
    loss = math.log(mc.T) - log_sum_exp(ll, axis=0)
    w = softmax(ll, axis=0)[..., None]
    g_yt = -w * (oh - np.exp(logp))
    d_y = g_yt.sum(axis=0)
    d_sigma2 = (g_yt * eps).sum(axis=0) * dscale
    return loss, d_y, d_sigma2


def aleatoric_loss(y_hat, sigma2_a, target, mc: MCConfig, paper_literal_sign=False):
    loss = distorted_loss_and_grad(y_hat, sigma2_a, target, mc)[0]
    return -loss if paper_literal_sign else loss


def predictive_loss(y_hat, sigma2_p, target, mc: MCConfig):
    """The distorted loss with one scalar variance shared by every class."""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    s = np.asarray(sigma2_p, dtype=np.float64)
    if s.ndim and s.shape == y_hat.shape[:-1]:
        s = s[..., None]
    return aleatoric_loss(y_hat, np.broadcast_to(s, y_hat.shape), target, mc)


def variance_equalizer(sigma2, sigma0=0.0):
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 < 0):
        raise ValueError("negative variance")
    return np.sum(np.maximum(np.exp(sigma2) - math.exp(sigma0 ** 2), 0.0), axis=-1)


def variance_equalizer_grad(sigma2, sigma0=0.0):
    e = np.exp(sigma2)
    return np.where(e > math.exp(sigma0 ** 2), e, 0.0)


def uncertainty_distorted_loss(L_p, L_y, alpha=1.0, variant="equation"):
    delta = np.asarray(L_p, dtype=np.float64) - np.asarray(L_y, dtype=np.float64)
    if variant == "algorithm":
        return np.exp(-delta) ** 2
    if variant != "equation":
        raise ValueError(f"unknown UDL variant {variant!r}")
    return np.where(delta < 0, alpha * np.expm1(np.minimum(delta, 0.0)), delta)


def uncertainty_distorted_loss_grad(L_p, L_y, alpha=1.0, variant="equation"):
    """Derivative with respect to ``L_p - L_y``."""
    delta = np.asarray(L_p, dtype=np.float64) - np.asarray(L_y, dtype=np.float64)
    if variant == "algorithm":
        return -2.0 * np.exp(-2.0 * delta)
    return np.where(delta < 0, alpha * np.exp(np.minimum(delta, 0.0)), 1.0)


def predictive_uncertainty(p, v_list):
    """Entropy of the MC-averaged softmax plus the mean aleatoric variance.

    ``v_list`` holds one aleatoric variance per MC sample; per-class rows are
    reduced by their class mean.
    """
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v_list, dtype=np.float64)
    if v.ndim > 1:
        v = v.mean(axis=-1)
    H = float(entropy(p))
    mean_a = float(np.mean(v))
    return UncertaintyEstimate(sigma2_a=v, H=H, sigma2_p=H + mean_a, mean_aleatoric=mean_a)


def mc_predictive_distribution(params, batch, dropout_rate, mc: MCConfig):
    """Run ``T`` dropout samples of the head over a shared attended map.

    Returns ``(p, v)`` with ``p`` the mean softmax ``(B, C)`` and ``v`` the
    per-sample aleatoric variance ``(T, B)`` (class mean of softplus(s)).
    """
    from .model import DropoutSpec, ForwardPass

    fp = ForwardPass(params, batch.scenes, batch.bow,
                     DropoutSpec(dropout_rate, mc.stream.derive(0)))
    for t in range(1, mc.T):
        fp.add_head(DropoutSpec(dropout_rate, mc.stream.derive(t)))
    probs = np.stack([softmax(h.logits, axis=-1) for h in fp.heads])
    v = np.stack([softplus(h.log_variance).mean(axis=-1) for h in fp.heads])
    return probs.mean(axis=0), v


def total_uncertainty_loss(components, mode, mc=None, eta_loss=0.5):
    """Assemble one :class:`LossBundle` from computed components.

    ``components`` maps ``L_y``, ``L_p``, ``L_VE``, ``L_UDL`` to values;
    only those enabled by ``mode`` enter ``L_u``.
    """
    mode = get_mode(mode) if isinstance(mode, str) else mode
    if "PUL" in mode.components and mc is None:
        raise ValueError(f"mode {mode.name} needs an MC configuration")
    L_y = float(np.mean(components["L_y"]))
    parts = {k: float(np.mean(components.get(k, 0.0))) for k in ("L_p", "L_VE", "L_UDL")}
    L_u = 0.0
    if mode.components & {"AUL", "PUL"}:
        L_u += parts["L_p"]
    if "VE" in mode.components:
        L_u += parts["L_VE"]
    if "UDL" in mode.components:
        L_u += parts["L_UDL"]
    return LossBundle(L_y=L_y, L_p=parts["L_p"], L_VE=parts["L_VE"], L_UDL=parts["L_UDL"],
                      L_u=L_u, C_total=L_y + eta_loss * L_u, mode=mode.name)


def total_cost(bundles, eta_loss):
    bundles = list(bundles)
    if not bundles:
        raise ValueError("empty batch")
    return sum(b.L_y + eta_loss * b.L_u for b in bundles) / len(bundles)


@dataclass
class LossHyper:
    eta_loss: float = 0.5
    sigma0: float = 0.0
    udl_alpha: float = 1.0
    udl_variant: str = "equation"
    # differentiate through the MC entropy term of predictive modes
    entropy_grad: bool = False


def step_objective(fp, targets, mode: Mode, mc: MCConfig, hp: LossHyper):
    """Per-example losses and head cotangents for one recorded pass.

    For predictive modes ``fp.heads[1:]`` must hold the MC-dropout samples
    whose averaged softmax supplies the entropy term.  Returns
    ``(parts, cot_y, cot_u)`` where ``cot_*`` map head index to
    ``(d_logits, d_log_variance)`` for ``L_y`` and ``L_u`` respectively.
    """
    y, s = fp.logits, fp.log_variance
    B = y.shape[0]
    L_y = cross_entropy(y, targets)
    g_ce = cross_entropy_grad(y, targets)
    cot_y = {0: (g_ce, None)}
    zeros = np.zeros(B)
    parts = {"L_y": L_y, "L_p": zeros, "L_VE": zeros, "L_UDL": zeros, "L_u": zeros}
    if not mode.uses_variance:
        return parts, cot_y, None

    sigma2 = softplus(s)
    if mode.distorted == "predictive":
        if len(fp.heads) < 2:
            raise ValueError("predictive modes need MC-dropout head samples")
        probs = np.stack([softmax(h.logits, axis=-1) for h in fp.heads[1:]])
        p_bar = probs.mean(axis=0)
        H = entropy(p_bar)
        sigma2 = sigma2 + H[:, None]
        parts["H"] = H

    dLu_dy = np.zeros_like(y)
    dLu_ds2 = np.zeros_like(y)
    L_u = np.zeros(B)
    needs_lp = mode.components & {"AUL", "PUL", "UDL"}
    if needs_lp:
        L_p, dLp_dy, dLp_ds2 = distorted_loss_and_grad(y, sigma2, targets, mc)
        parts["L_p"] = L_p
        if mode.components & {"AUL", "PUL"}:
            L_u = L_u + L_p
            dLu_dy = dLu_dy + dLp_dy
            dLu_ds2 = dLu_ds2 + dLp_ds2
    if "VE" in mode.components:
        parts["L_VE"] = variance_equalizer(sigma2, hp.sigma0)
        L_u = L_u + parts["L_VE"]
        dLu_ds2 = dLu_ds2 + variance_equalizer_grad(sigma2, hp.sigma0)
    if "UDL" in mode.components:
        parts["L_UDL"] = uncertainty_distorted_loss(L_p, L_y, hp.udl_alpha, hp.udl_variant)
        L_u = L_u + parts["L_UDL"]
        g = uncertainty_distorted_loss_grad(L_p, L_y, hp.udl_alpha, hp.udl_variant)[:, None]
        dLu_dy = dLu_dy + g * (dLp_dy - g_ce)
        dLu_ds2 = dLu_ds2 + g * dLp_ds2
    parts["L_u"] = L_u

    cot_u = {0: (dLu_dy, dLu_ds2 * sigmoid(s))}
    if mode.distorted == "predictive" and hp.entropy_grad:
        T = len(fp.heads) - 1
        dH = dLu_ds2.sum(axis=-1)[:, None]
        log_p = np.log(np.where(p_bar > 0, p_bar, 1.0))
        g_p = -(log_p + 1.0)
        for t in range(T):
            pt = probs[t]
            d_yt = dH * pt * (g_p - np.sum(pt * g_p, axis=-1, keepdims=True)) / T
            cot_u[t + 1] = (d_yt, None)
    return parts, cot_y, cot_u
