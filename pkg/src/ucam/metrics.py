"""Evaluation metrics: consensus accuracy, map agreement, uncertainty analyses."""
from __future__ import annotations

import math

import numpy as np

from .numerics import softmax

N_ANNOTATIONS = 10


def vqa_accuracy(predicted, annotations):
    if len(annotations) != N_ANNOTATIONS:
        raise ValueError(f"expected {N_ANNOTATIONS} annotations, got {len(annotations)}")
    matches = sum(1 for a in annotations if a == predicted)
    return min(matches / 3.0, 1.0)


def fractional_ranks(x):
    """1-based ranks with ties replaced by their average rank."""
    x = np.asarray(x, dtype=np.float64).ravel()
    _, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    end = np.cumsum(counts)
    avg = (end - counts + 1 + end) / 2.0
    return avg[inv.ravel()]


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denom == 0.0:
        raise ValueError("undefined correlation")
    return float(np.dot(da, db)) / denom


def rank_correlation(a, b):
    """Spearman correlation as the Pearson correlation of fractional ranks."""
    if np.shape(a) != np.shape(b):
        raise ValueError("maps must have equal dimensions")
    return pearson(fractional_ranks(a), fractional_ranks(b))


def area_downsample(m, size):
    """Average-pool a square map onto ``size x size`` by exact area overlap."""
    m = np.asarray(m, dtype=np.float64)
    n = m.shape[0]
    edges_src = np.arange(n + 1) / n
    edges_dst = np.arange(size + 1) / size
    lo = np.maximum(edges_dst[:-1, None], edges_src[None, :-1])
    hi = np.minimum(edges_dst[1:, None], edges_src[None, 1:])
    # fraction of source cell i that falls into target cell k; columns sum to 1
    W = np.clip(hi - lo, 0.0, None) * n
    return W @ m @ W.T


def _grid_cost(shape):
    r, c = np.indices(shape)
    pts = np.stack([r.ravel(), c.ravel()], axis=1).astype(np.float64)
    diff = pts[:, None, :] - pts[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def transport_cost(a, b, C, tol=1e-14):
    """Exact balanced transportation cost by successive shortest paths.

    Augmenting paths come from a dense Dijkstra search on reduced costs, with
    node potentials keeping every residual edge nonnegative. The search tree
    cannot contain cycles, so degenerate (tied) problems are safe.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    src, dst = np.flatnonzero(a > tol), np.flatnonzero(b > tol)
    ra, rb = a[src].copy(), b[dst].copy()
    C = np.asarray(C, dtype=np.float64)[np.ix_(src, dst)]
    n, m = C.shape
    flow = np.zeros((n, m))
    ps, pt = np.zeros(n), np.zeros(m)
    total = 0.0
    while ra.sum() > tol and rb.sum() > tol:
        ds = np.where(ra > tol, 0.0, np.inf)
        dt = np.full(m, np.inf)
        pred_t = np.full(m, -1)
        pred_s = np.full(n, -1)
        done_s = np.zeros(n, dtype=bool)
        done_t = np.zeros(m, dtype=bool)
        j_end = -1
        while True:
            cs = np.where(done_s, np.inf, ds)
            ct = np.where(done_t, np.inf, dt)
            i, j = int(np.argmin(cs)), int(np.argmin(ct))
            if cs[i] <= ct[j]:
                if not np.isfinite(cs[i]):
                    break
                done_s[i] = True
                cand = ds[i] + np.maximum(C[i] + ps[i] - pt, 0.0)
                better = ~done_t & (cand < dt)
                dt = np.where(better, cand, dt)
                pred_t[better] = i
            else:
                done_t[j] = True
                if rb[j] > tol:
                    j_end = j
                    break
                rev = flow[:, j] > tol
                cand = dt[j] + np.maximum(-C[:, j] + pt[j] - ps, 0.0)
                better = rev & ~done_s & (cand < ds)
                ds = np.where(better, cand, ds)
                pred_s[better] = j
        if j_end < 0:
            raise RuntimeError("transport problem is infeasible")
        d_end = dt[j_end]
        ps += np.minimum(ds, d_end)
        pt += np.minimum(dt, d_end)
        # walk back: sink <- source [<- sink via reverse edge <- source ...]
        fwd, rev_edges, j = [], [], j_end
        while True:
            i = pred_t[j]
            fwd.append((i, j))
            if pred_s[i] < 0:
                break
            j = pred_s[i]
            rev_edges.append((i, j))
        i_start = fwd[-1][0]
        delta = min(ra[i_start], rb[j_end], *(flow[e] for e in rev_edges))
        for e in fwd:
            flow[e] += delta
            total += delta * C[e]
        for e in rev_edges:
            flow[e] -= delta
            total -= delta * C[e]
        ra[i_start] -= delta
        rb[j_end] -= delta
    return total


def emd_2d(a, b, max_side=16, resample_to=14):
    """Earth mover distance between two normalized maps on a unit-spaced grid."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("maps must be 2-D with equal dimensions")
    for m in (a, b):
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
            raise ValueError("maps must be normalized (nonnegative, summing to 1)")
    if max(a.shape) > max_side:
        a = area_downsample(a, resample_to)
        b = area_downsample(b, resample_to)
    if np.array_equal(a, b):
        return 0.0
    # under a metric ground cost the shared mass min(a, b) can stay in place
    diff = (a - b).ravel()
    return transport_cost(np.maximum(diff, 0.0), np.maximum(-diff, 0.0), _grid_cost(a.shape))


def classification_error(p_misclassification):
    p = np.asarray(p_misclassification, dtype=np.float64)
    if np.any(p >= 1) or np.any(p < 0):
        raise ValueError("probability of misclassification must lie in [0, 1)")
    return -np.log1p(-p)


def top2_gap(y_hat):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_hat.shape[-1] < 2:
        raise ValueError("top-2 gap needs at least two classes")
    p = np.sort(softmax(y_hat, axis=-1), axis=-1)
    return p[..., -1] - p[..., -2]


def auroc(scores, positive):
    """Area under the ROC curve (Mann-Whitney with tie correction)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    r = fractional_ranks(scores)
    return float((r[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def uncertainty_error_analysis(sigma2_p, correct, error):
    sigma2_p = np.asarray(sigma2_p, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    error = np.asarray(error, dtype=np.float64)
    if sigma2_p.size < 2:
        raise ValueError("need at least two records")
    try:
        corr = pearson(sigma2_p, error)
    except ValueError:
        corr = "undefined"

    def mean_or_nan(x):
        return float(x.mean()) if x.size else float("nan")

    return {
        "n": int(sigma2_p.size),
        "pearson_uncertainty_error": corr,
        "mean_sigma2_p_correct": mean_or_nan(sigma2_p[correct]),
        "mean_sigma2_p_incorrect": mean_or_nan(sigma2_p[~correct]),
        "auroc_misclassification": auroc(sigma2_p, ~correct),
        "scatter": {"sigma2_p": sigma2_p.tolist(), "classification_error": error.tolist(),
                    "correct": correct.tolist()},
    }
