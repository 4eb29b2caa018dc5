"""Stable scalar/array primitives and seeded random streams.

Everything here works in float64.  The random streams are values: two
``RngStream`` objects with the same key always produce the same draws, so
callers derive a fresh child stream for every independent purpose instead
of sharing mutable generator state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    """Derivative of :func:`softplus`."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_axis(x, axis):
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ValueError("empty reduction")


def log_sum_exp(x, axis=-1, keepdims=False):
    x = np.asarray(x, dtype=np.float64)
    _check_axis(x, axis)
    m = np.max(x, axis=axis, keepdims=True)
    # a single element gives m + log(1) == m exactly
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    _check_axis(x, axis)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    return x - log_sum_exp(x, axis=axis, keepdims=True)


def entropy(p, axis=-1):
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=axis)


@dataclass(frozen=True)
class RngStream:
    """Counter-style random stream addressed by ``(master_seed, key...)``.

    The child seed is a hash of the full key (numpy ``SeedSequence``), and
    draws come from a Philox counter generator, so any stream can be
    rebuilt independently of how many other streams were used before it.
    """

    master_seed: int
    key: tuple = ()

    @property
    def stream_id(self):
        return self.key[0] if self.key else 0

    def derive(self, *key):
        return RngStream(self.master_seed, self.key + tuple(int(k) for k in key))

    def generator(self):
        ss = np.random.SeedSequence(entropy=int(self.master_seed) % 2**64,
                                    spawn_key=self.key)
        return np.random.Generator(np.random.Philox(ss))


def gaussian_sample(stream, shape):
    return stream.generator().standard_normal(shape)
