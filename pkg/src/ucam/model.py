"""Toy multimodal classifier with hand-written vector-Jacobian products.

Pipeline (batched over the leading axis)::

    scene --embed--> g_i (B,u,v,C)        tokens --mean+tanh--> g_q (B,dq)
    score = (g_i W_key) . (g_q W_query)   alpha = softmax_{u,v}(score)
    F = alpha * tanh(g_i W_val + g_q W_valq + b_val)       <- gradient tap
    f = sum_{u,v} F -> tanh MLP with dropout -> hidden
    logits = hidden W + b          log_variance = hidden W_u + b_u

Every op is a ``*_forward`` returning ``(out, cache)`` paired with a
``*_vjp`` taking the cotangent of the output.  ``ForwardPass`` records one
pass and exposes the tap at ``F`` where callers may read or add gradient.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import data as _data
from .numerics import softmax, softplus

PARTITIONS = ("image", "question", "attention", "classifier", "answer", "uncertainty")
# partitions trained by the classification optimizer; "uncertainty" uses SGD
CLASSIFICATION_PARTITIONS = PARTITIONS[:5]
TRUNK_PARTITIONS = ("image", "question", "attention")
HEAD_PARTITIONS = ("classifier", "answer", "uncertainty")


@dataclass
class ModelConfig:
    grid: int = 7
    n_objects: int = len(_data.OBJECTS)
    vocab_size: int = len(_data.VOCAB)
    image_dim: int = 32
    question_dim: int = 32
    key_dim: int = 32
    feature_dim: int = 32
    hidden: int = 64
    n_answers: int = len(_data.ANSWERS)
    dropout: float = 0.3


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.0
    stream: object = None  # RngStream; required when rate > 0

    def masks(self, batch, width, n_layers=2):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        if self.rate == 0.0:
            return (None,) * n_layers
        keep = 1.0 - self.rate
        out = []
        for layer in range(n_layers):
            u = self.stream.derive(layer).generator().random((batch, width))
            out.append((u < keep) / keep)
        return tuple(out)


class Parameters:
    """Named partitions of named float64 arrays."""

    def __init__(self, groups):
        self.groups = {p: dict(groups[p]) for p in groups}

    def __getitem__(self, partition):
        return self.groups[partition]

    def items(self):
        for p in PARTITIONS:
            if p in self.groups:
                for name in sorted(self.groups[p]):
                    yield p, name, self.groups[p][name]

    def copy(self):
        return Parameters({p: {k: v.copy() for k, v in g.items()} for p, g in self.groups.items()})

    def zeros_like(self):
        return Parameters({p: {k: np.zeros_like(v) for k, v in g.items()}
                           for p, g in self.groups.items()})

    def count(self):
        return sum(a.size for _, _, a in self.items())

    def digest(self):
        h = hashlib.sha256()
        for p, n, a in self.items():
            h.update(f"{p}/{n}{a.shape}".encode())
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def equal(self, other):
        return all(np.array_equal(a, other[p][n]) for p, n, a in self.items())


def init_params(cfg: ModelConfig, stream):
    def normal(key, shape, scale):
        return stream.derive(key).generator().standard_normal(shape) * scale

    C, dq, dk, d, h = cfg.image_dim, cfg.question_dim, cfg.key_dim, cfg.feature_dim, cfg.hidden
    return Parameters({
        "image": {"embed": normal(0, (cfg.n_objects, C), 1.0)},
        "question": {"embed": normal(1, (cfg.vocab_size, dq), 1.0)},
        "attention": {
            "W_key": normal(2, (C, dk), 0.5 / np.sqrt(C)),
            "W_query": normal(3, (dq, dk), 0.5 / np.sqrt(dq)),
            "W_val": normal(4, (C, d), 1.0 / np.sqrt(C)),
            "W_valq": normal(5, (dq, d), 1.0 / np.sqrt(dq)),
            "b_val": np.zeros(d),
        },
        "classifier": {
            "W1": normal(6, (d, h), 1.0 / np.sqrt(d)),
            "b1": np.zeros(h),
            "W2": normal(7, (h, h), 1.0 / np.sqrt(h)),
            "b2": np.zeros(h),
        },
        "answer": {"W": normal(8, (h, cfg.n_answers), 1.0 / np.sqrt(h)),
                   "b": np.zeros(cfg.n_answers)},
        "uncertainty": {"W": normal(9, (h, cfg.n_answers), 0.1 / np.sqrt(h)),
                        "b": np.zeros(cfg.n_answers)},
    })


# --- ops ---------------------------------------------------------------------

def encode_image(scenes, theta_i, grid=None):
    """Look up the learned embedding of every grid cell."""
    scenes = np.asarray(scenes)
    if grid is not None and scenes.shape[-2:] != (grid, grid):
        raise ValueError(f"scene shape {scenes.shape[-2:]} does not match grid {grid}")
    E = theta_i["embed"]
    if scenes.min() < 0 or scenes.max() >= E.shape[0]:
        raise ValueError("unknown object id in scene")
    return E[scenes], scenes


def encode_image_vjp(d_g, cache, theta_i):
    scenes = cache
    n_obj, C = theta_i["embed"].shape
    onehot = np.eye(n_obj)[scenes.reshape(-1)]
    return {"embed": onehot.T @ d_g.reshape(-1, C)}


def encode_question(bow, theta_q):
    """``tanh`` of the mean token embedding; ``bow`` holds token frequencies."""
    g = np.tanh(np.asarray(bow) @ theta_q["embed"])
    return g, (np.asarray(bow), g)


def encode_question_vjp(d_q, cache, theta_q):
    bow, g = cache
    return {"embed": bow.T @ (d_q * (1.0 - g * g))}


def tokens_to_bow(tokens):
    return _data.encode_question(tokens)


def attend(g_i, g_q, theta_f):
    """Single-glimpse bilinear attention; returns ``(alpha, F)`` and a cache."""
    B, U, V, _ = g_i.shape
    K = g_i @ theta_f["W_key"]
    Q = g_q @ theta_f["W_query"]
    score = np.einsum("buvk,bk->buv", K, Q)
    alpha = softmax(score.reshape(B, U * V), axis=1).reshape(B, U, V)
    Z = g_i @ theta_f["W_val"] + (g_q @ theta_f["W_valq"] + theta_f["b_val"])[:, None, None, :]
    val = np.tanh(Z)
    F = alpha[..., None] * val
    return (alpha, F), (g_i, g_q, K, Q, alpha, val)


def attend_vjp(d_alpha, d_F, cache, theta_f):
    """Returns ``(d_theta_f, d_g_i, d_g_q)``."""
    g_i, g_q, K, Q, alpha, val = cache
    B, U, V, C = g_i.shape
    da = np.einsum("buvd,buvd->buv", d_F, val)
    if d_alpha is not None:
        da = da + d_alpha
    d_val = d_F * alpha[..., None]
    dZ = d_val * (1.0 - val * val)
    a2 = alpha.reshape(B, -1)
    da2 = da.reshape(B, -1)
    d_score = (a2 * (da2 - np.sum(a2 * da2, axis=1, keepdims=True))).reshape(B, U, V)
    dK = d_score[..., None] * Q[:, None, None, :]
    dQ = np.einsum("buv,buvk->bk", d_score, K)
    dZ_sum = dZ.sum(axis=(1, 2))
    flat_g = g_i.reshape(-1, C)
    grads = {
        "W_key": flat_g.T @ dK.reshape(-1, K.shape[-1]),
        "W_query": g_q.T @ dQ,
        "W_val": flat_g.T @ dZ.reshape(-1, dZ.shape[-1]),
        "W_valq": g_q.T @ dZ_sum,
        "b_val": dZ_sum.sum(axis=0),
    }
    d_gi = dK @ theta_f["W_key"].T + dZ @ theta_f["W_val"].T
    d_gq = dQ @ theta_f["W_query"].T + dZ_sum @ theta_f["W_valq"].T
    return grads, d_gi, d_gq


def classify(F, theta_c, masks=(None, None)):
    """Pool the attended map and apply a two-layer tanh MLP with dropout."""
    f = F.sum(axis=(1, 2))
    h1 = np.tanh(f @ theta_c["W1"] + theta_c["b1"])
    h1d = h1 if masks[0] is None else h1 * masks[0]
    h2 = np.tanh(h1d @ theta_c["W2"] + theta_c["b2"])
    hidden = h2 if masks[1] is None else h2 * masks[1]
    return hidden, (F.shape, f, h1, h1d, h2, masks)


def classify_vjp(d_hidden, cache, theta_c):
    shape, f, h1, h1d, h2, masks = cache
    d_h2 = d_hidden if masks[1] is None else d_hidden * masks[1]
    da2 = d_h2 * (1.0 - h2 * h2)
    d_h1d = da2 @ theta_c["W2"].T
    d_h1 = d_h1d if masks[0] is None else d_h1d * masks[0]
    da1 = d_h1 * (1.0 - h1 * h1)
    grads = {"W1": f.T @ da1, "b1": da1.sum(axis=0), "W2": h1d.T @ da2, "b2": da2.sum(axis=0)}
    d_f = da1 @ theta_c["W1"].T
    d_F = np.broadcast_to(d_f[:, None, None, :], shape).copy()
    return grads, d_F


def _affine(hidden, theta):
    return hidden @ theta["W"] + theta["b"]


def _affine_vjp(d_out, hidden, theta):
    return {"W": hidden.T @ d_out, "b": d_out.sum(axis=0)}, d_out @ theta["W"].T


def predict_logits(hidden, theta_y):
    return _affine(hidden, theta_y)


def predict_logits_vjp(d_logits, hidden, theta_y):
    return _affine_vjp(d_logits, hidden, theta_y)


def predict_log_variance(hidden, theta_u):
    """Raw variance-head output ``s``; aleatoric variance is ``softplus(s)``."""
    return _affine(hidden, theta_u)


def predict_log_variance_vjp(d_s, hidden, theta_u):
    return _affine_vjp(d_s, hidden, theta_u)


def aleatoric_variance(s):
    return softplus(s)


# --- recorded pass ---------------------------------------------------------

@dataclass
class HeadPass:
    hidden: np.ndarray
    logits: np.ndarray
    log_variance: np.ndarray
    cache: tuple


class ForwardPass:
    """One recorded forward pass over a batch.

    ``heads[0]`` is the main pass; extra head passes (e.g. MC-dropout
    samples sharing the same attended map) are appended with
    :meth:`add_head`.  The trunk runs once.
    """

    NODES = ("image", "question", "alpha", "F", "hidden", "logits", "log_variance")

    def __init__(self, params, scenes, bow, dropout=DropoutSpec(), grid=None):
        self.params = params
        self.g_i, self._img_cache = encode_image(scenes, params["image"], grid)
        self.g_q, self._q_cache = encode_question(bow, params["question"])
        (self.alpha, self.F), self._att_cache = attend(self.g_i, self.g_q, params["attention"])
        self.heads = []
        self.add_head(dropout)

    def add_head(self, dropout):
        width = self.params["classifier"]["W2"].shape[1]
        masks = dropout.masks(self.F.shape[0], width)
        hidden, ccache = classify(self.F, self.params["classifier"], masks)
        y = predict_logits(hidden, self.params["answer"])
        s = predict_log_variance(hidden, self.params["uncertainty"])
        self.heads.append(HeadPass(hidden, y, s, ccache))
        return self.heads[-1]

    @property
    def logits(self):
        return self.heads[0].logits

    @property
    def log_variance(self):
        return self.heads[0].log_variance

    def head_backward(self, cotangents, want_params=True):
        """Backprop head cotangents to the tap.

        ``cotangents`` maps head index -> ``(d_logits, d_log_variance)``
        (either may be None).  Returns ``(head_grads, d_F)``; heads are
        accumulated in ascending index order.
        """
        p = self.params
        grads = {k: {n: np.zeros_like(a) for n, a in p[k].items()} for k in HEAD_PARTITIONS}
        d_F = np.zeros_like(self.F)
        for idx in sorted(cotangents):
            if not 0 <= idx < len(self.heads):
                raise KeyError(f"head {idx} not in recorded pass")
            dy, ds = cotangents[idx]
            head = self.heads[idx]
            d_hidden = np.zeros_like(head.hidden)
            if dy is not None:
                gy, dh = predict_logits_vjp(dy, head.hidden, p["answer"])
                d_hidden = d_hidden + dh
                _accumulate(grads["answer"], gy)
            if ds is not None:
                gu, dh = predict_log_variance_vjp(ds, head.hidden, p["uncertainty"])
                d_hidden = d_hidden + dh
                _accumulate(grads["uncertainty"], gu)
            gc, dF = classify_vjp(d_hidden, head.cache, p["classifier"])
            _accumulate(grads["classifier"], gc)
            d_F = d_F + dF
        return (grads if want_params else None), d_F

    def trunk_backward(self, d_F, d_alpha=None):
        p = self.params
        g_f, d_gi, d_gq = attend_vjp(d_alpha, d_F, self._att_cache, p["attention"])
        return {
            "image": encode_image_vjp(d_gi, self._img_cache, p["image"]),
            "question": encode_question_vjp(d_gq, self._q_cache, p["question"]),
            "attention": g_f,
        }

    def backward(self, cotangents, inject=None):
        """Full reverse pass; ``inject`` is added to dL/dF before the trunk."""
        head_grads, d_F = self.head_backward(cotangents)
        if inject is not None:
            if inject.shape != d_F.shape:
                raise ValueError("injected field must match the tap shape")
            d_F = d_F + inject
        self.tap_gradient = d_F
        grads = self.trunk_backward(d_F)
        grads.update(head_grads)
        return Parameters(grads)

    def grad(self, node, cotangents):
        """Gradient of the head loss w.r.t. a recorded node."""
        if node not in self.NODES:
            raise KeyError(f"node {node!r} not in recorded pass")
        if node == "F":
            return self.head_backward(cotangents, want_params=False)[1]
        if node == "logits":
            return cotangents[0][0]
        if node == "log_variance":
            return cotangents[0][1]
        raise KeyError(f"gradient at {node!r} is not exposed")


def _accumulate(dst, src):
    for k, v in src.items():
        dst[k] = dst[k] + v


def predict(params, batch, chunk=500):
    """Deterministic (no dropout) logits, log-variances and attention."""
    ys, ss, alphas = [], [], []
    for start in range(0, len(batch), chunk):
        fp = ForwardPass(params, batch.scenes[start:start + chunk], batch.bow[start:start + chunk])
        ys.append(fp.logits)
        ss.append(fp.log_variance)
        alphas.append(fp.alpha)
    return np.concatenate(ys), np.concatenate(ss), np.concatenate(alphas)


# --- checkpoint --------------------------------------------------------------

def save_checkpoint(params, path_bin, path_json, config=None):
    entries, offset, blobs = [], 0, []
    for p, name, arr in params.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"partition": p, "name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    Path(path_bin).write_bytes(blob)
    manifest = {"format": "ucam-checkpoint", "version": 1, "dtype": "<f8",
                "sha256": hashlib.sha256(blob).hexdigest(), "tensors": entries}
    if config is not None:
        manifest["model_config"] = asdict(config)
    Path(path_json).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path_bin, path_json):
    manifest = json.loads(Path(path_json).read_text())
    blob = Path(path_bin).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError(f"checkpoint blob {path_bin} does not match its manifest")
    groups = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        groups.setdefault(e["partition"], {})[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    cfg = ModelConfig(**manifest["model_config"]) if "model_config" in manifest else None
    return Parameters(groups), cfg
