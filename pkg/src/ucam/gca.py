"""Gradient-certainty attention: certainty masks injected at the attended map.

One training step records a forward pass, takes the classification and
uncertainty gradients at the tap ``F``, turns them into a certainty mask and
adds the mask to the classification gradient before the backward pass
continues into the attention network and the encoders.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .model import CLASSIFICATION_PARTITIONS, DropoutSpec, ForwardPass, Parameters
from .numerics import softmax


@dataclass(frozen=True)
class GCAConfig:
    lam: float = 1.0
    gamma: float = -10.0
    normalization: str = "softmax"
    eps_norm: float = 1e-12

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.gamma > 0:
            raise ValueError("gamma must be <= 0")
        if self.normalization not in ("softmax", "sum"):
            raise ValueError("normalization must be 'softmax' or 'sum'")
        if self.eps_norm <= 0:
            raise ValueError("eps_norm must be positive")


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def certainty_product(grad_u, grad_y, lam):
    _same_shape(grad_u, grad_y)
    return -lam * np.asarray(grad_u) * np.asarray(grad_y)


def certainty_activation(grad, gamma):
    if gamma > 0:
        raise ValueError("gamma must be <= 0")
    grad = np.asarray(grad, dtype=np.float64)
    return np.maximum(grad, 0.0) + gamma * np.maximum(-grad, 0.0)


def normalize_mask(grad, cfg: GCAConfig, batched=False):
    """Normalize over every tap entry (per example when ``batched``)."""
    grad = np.asarray(grad, dtype=np.float64)
    lead = grad.shape[:1] if batched else ()
    flat = grad.reshape(lead + (-1,))
    if cfg.normalization == "softmax":
        return softmax(flat, axis=-1).reshape(grad.shape)
    total = flat.sum(axis=-1, keepdims=True)
    ok = np.abs(total) >= cfg.eps_norm
    out = np.where(ok, flat / np.where(ok, total, 1.0), 0.0)
    return out.reshape(grad.shape)


def certainty_mask(grad_u, grad_y, cfg: GCAConfig, batched=True):
    g1 = certainty_product(grad_u, grad_y, cfg.lam)
    return normalize_mask(certainty_activation(g1, cfg.gamma), cfg, batched=batched)


def inject_residual_gradient(grad_y, mask):
    _same_shape(grad_y, mask)
    return grad_y + mask


def certainty_map(F, field):
    """Grad-CAM style ``(u, v)`` heatmap of one example, max-normalized.

    ``F`` and ``field`` are ``(u, v, d)``; channel weights are the spatial
    mean of ``field``.
    """
    w = np.asarray(field).mean(axis=(0, 1))
    heat = np.maximum(np.asarray(F) @ w, 0.0)
    m = heat.max()
    return heat / m if m > 0 else heat


# --- optimizers --------------------------------------------------------------

class Adam:
    def __init__(self, lr=1e-4, beta1=0.95, beta2=0.99, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params: Parameters, grads: Parameters, partitions):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in partitions:
            for name, g in grads[p].items():
                key = (p, name)
                m = self.m.get(key, 0.0) * self.beta1 + (1.0 - self.beta1) * g
                v = self.v.get(key, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
                self.m[key], self.v[key] = m, v
                params[p][name] = params[p][name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr=0.004):
        self.lr = lr

    def step(self, params: Parameters, grads: Parameters, partitions):
        for p in partitions:
            for name, g in grads[p].items():
                params[p][name] = params[p][name] - self.lr * g


@dataclass
class Optimizers:
    classification: Adam
    uncertainty: SGD


def make_optimizers(lr=1e-4, lr_uncertainty=0.004, beta1=0.95, beta2=0.99, eps=1e-8):
    return Optimizers(Adam(lr, beta1, beta2, eps), SGD(lr_uncertainty))


# --- training ----------------------------------------------------------------

DROPOUT_STREAM, DISTORT_STREAM = 2, 3


def _scaled(cot_y, cot_u, eta, n):
    out = {}
    for k in sorted(set(cot_y) | set(cot_u or {})):
        dy_y, _ = cot_y.get(k, (None, None))
        dy_u, ds_u = (cot_u or {}).get(k, (None, None))
        if dy_u is None:
            dy = None if dy_y is None else dy_y / n
        elif dy_y is None:
            dy = eta * dy_u / n
        else:
            dy = (dy_y + eta * dy_u) / n
        ds = None if ds_u is None else eta * ds_u / n
        out[k] = (dy, ds)
    return out


@dataclass
class StepResult:
    bundle: L.LossBundle
    parts: dict
    fp: ForwardPass
    mask: np.ndarray = None


def gca_training_step(batch, params, mode, cfg: GCAConfig, mc_T, optimizers: Optimizers,
                      stream, step, dropout=0.3, hp=L.LossHyper(), perturb_scale="stddev"):
    """One update of every parameter partition; returns ``(params, StepResult)``.

    ``stream`` is the run's root stream; dropout masks and logit noise are
    derived from ``(purpose, step, sample)`` so a step is reproducible on its own.
    """
    mode = L.get_mode(mode) if isinstance(mode, str) else mode
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    drop = stream.derive(DROPOUT_STREAM, step)
    fp = ForwardPass(params, batch.scenes, batch.bow, DropoutSpec(dropout, drop.derive(0)))
    mc = L.MCConfig(mc_T, stream.derive(DISTORT_STREAM, step), perturb_scale)
    if mode.uses_variance and mode.distorted == "predictive":
        for t in range(mc_T):
            fp.add_head(DropoutSpec(dropout, drop.derive(t + 1)))
    parts, cot_y, cot_u = L.step_objective(fp, batch.targets, mode, mc, hp)

    inject = mask = None
    if mode.gca and cot_u is not None:
        _, grad_y = fp.head_backward(cot_y, want_params=False)
        _, grad_u = fp.head_backward(cot_u, want_params=False)
        mask = certainty_mask(grad_u, grad_y, cfg, batched=True)
        inject = mask / n
    grads = fp.backward(_scaled(cot_y, cot_u, hp.eta_loss, n), inject)

    new = params.copy()
    optimizers.classification.step(new, grads, CLASSIFICATION_PARTITIONS)
    if cot_u is not None:
        optimizers.uncertainty.step(new, grads, ("uncertainty",))
    bundle = L.total_uncertainty_loss(parts, mode, mc, hp.eta_loss)
    return new, StepResult(bundle, parts, fp, mask)


def sce_training_step(batch, params, optimizer: Adam, stream, step, dropout=0.3):
    """Plain cross-entropy update, the reference for the baseline mode."""
    drop = stream.derive(DROPOUT_STREAM, step)
    fp = ForwardPass(params, batch.scenes, batch.bow, DropoutSpec(dropout, drop.derive(0)))
    g = L.cross_entropy_grad(fp.logits, batch.targets)
    grads = fp.backward({0: (g / len(batch), None)})
    new = params.copy()
    optimizer.step(new, grads, CLASSIFICATION_PARTITIONS)
    return new, float(np.mean(L.cross_entropy(fp.logits, batch.targets)))
