"""Bidirectional WKV attention.

For a sequence of keys ``k`` and values ``v`` of shape ``[T, C]`` and per-channel
decay ``w`` / self bonus ``u``::

    out_t = (sum_{i != t} exp(-(|t-i| - 1) * w / T + k_i) v_i + exp(u + k_t) v_t)
            / (same with v -> 1)

``biwkv_naive`` evaluates the double sum directly (O(T^2 C)); ``biwkv_scan``
uses a forward and a backward recurrence (O(T C)). Both keep a running max
exponent so ``exp`` is only ever taken of non-positive numbers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import DTYPE, NumericError, ensure_finite


@dataclass(frozen=True)
class BiWkvParams:
    w: np.ndarray  # per-channel decay, nats per normalized step
    u: np.ndarray  # per-channel self-importance bonus

    def __post_init__(self):
        object.__setattr__(self, "w", np.atleast_1d(np.asarray(self.w, dtype=DTYPE)))
        object.__setattr__(self, "u", np.atleast_1d(np.asarray(self.u, dtype=DTYPE)))


def _check(k, v, w, u):
    k = np.asarray(k, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    if k.ndim != 2 or k.shape != v.shape:
        raise ValueError(f"k and v must share a [T, C] shape, got {k.shape} and {v.shape}")
    if k.shape[0] < 1:
        raise ValueError("sequence length must be >= 1")
    C = k.shape[1]
    w = np.broadcast_to(np.asarray(w, dtype=DTYPE), (C,))
    u = np.broadcast_to(np.asarray(u, dtype=DTYPE), (C,))
    for name, arr in (("k", k), ("v", v), ("w", w), ("u", u)):
        ensure_finite(arr, name)
    return k, v, w, u


def _exponents(k, w, u, rows):
    """Log-weights e[t, i, c] for output positions ``rows``."""
    T = k.shape[0]
    t = np.asarray(rows)[:, None]
    i = np.arange(T)[None, :]
    dist = (np.abs(t - i) - 1).astype(DTYPE)
    e = -dist[:, :, None] * (w / T) + k[None, :, :]
    diag = t[:, 0]
    e[np.arange(len(diag)), diag, :] = u + k[diag]
    return e


def biwkv_naive(k, v, w, u, chunk: int = 256) -> np.ndarray:
    """Literal double-sum evaluation; the oracle for ``biwkv_scan``."""
    k, v, w, u = _check(k, v, w, u)
    T = k.shape[0]
    out = np.empty_like(v)
    for start in range(0, T, chunk):
        rows = np.arange(start, min(T, start + chunk))
        e = _exponents(k, w, u, rows)
        e -= e.max(axis=1, keepdims=True)
        p = np.exp(e)
        out[rows] = np.einsum("tic,ic->tc", p, v) / p.sum(axis=1)
    return ensure_finite(out, "biwkv_naive output")


def _directional_states(k, v, decay):
    """Running (max exponent, scaled numerator, scaled denominator) of
    F_t = exp(-w/T) F_{t-1} + exp(k_{t-1}) v_{t-1}, with F_0 = 0."""
    T, C = k.shape
    o = np.full((T, C), -np.inf)
    a = np.zeros((T, C))
    b = np.zeros((T, C))
    o_t = np.full(C, -np.inf)
    a_t = np.zeros(C)
    b_t = np.zeros(C)
    for t in range(1, T):
        carried = o_t - decay
        x = np.maximum(carried, k[t - 1])
        e1 = np.exp(carried - x)
        e2 = np.exp(k[t - 1] - x)
        a_t = e1 * a_t + e2 * v[t - 1]
        b_t = e1 * b_t + e2
        o_t = x
        o[t], a[t], b[t] = o_t, a_t, b_t
    return o, a, b


def biwkv_scan(k, v, w, u) -> np.ndarray:
    """Linear-time evaluation via a forward and a mirrored backward scan."""
    k, v, w, u = _check(k, v, w, u)
    T = k.shape[0]
    decay = w / T
    of, af, bf = _directional_states(k, v, decay)
    ob, ab, bb = _directional_states(k[::-1], v[::-1], decay)
    ob, ab, bb = ob[::-1], ab[::-1], bb[::-1]
    s = u + k
    x = np.maximum(np.maximum(of, ob), s)
    ef, eb, es = np.exp(of - x), np.exp(ob - x), np.exp(s - x)
    out = (ef * af + eb * ab + es * v) / (ef * bf + eb * bb + es)
    return ensure_finite(out, "biwkv_scan output")


def biwkv(k, v, params: BiWkvParams, method: str = "scan") -> np.ndarray:
    fn = {"scan": biwkv_scan, "naive": biwkv_naive}.get(method)
    if fn is None:
        raise ValueError(f"unknown method {method!r}")
    return fn(k, v, params.w, params.u)


def biwkv_backward(k, v, w, u, dout):
    """Gradients (dk, dv, dw, du) of ``sum(dout * out)`` via the quadratic form.

    With p[t, i] the normalized weights and out_t = sum_i p[t, i] v_i, the
    log-weight gradient is p[t, i] * dout_t * (v_i - out_t).
    """
    k, v, w, u = _check(k, v, w, u)
    dout = np.asarray(dout, dtype=DTYPE)
    if dout.shape != v.shape:
        raise ValueError(f"upstream shape {dout.shape} does not match output {v.shape}")
    T = k.shape[0]
    rows = np.arange(T)
    e = _exponents(k, w, u, rows)
    e -= e.max(axis=1, keepdims=True)
    p = np.exp(e)
    p /= p.sum(axis=1, keepdims=True)
    out = np.einsum("tic,ic->tc", p, v)
    dv = np.einsum("tic,tc->ic", p, dout)
    de = p * dout[:, None, :] * (v[None, :, :] - out[:, None, :])
    diag = de[rows, rows, :]
    dk = de.sum(axis=0)
    du = diag.sum(axis=0)
    dist = (np.abs(rows[:, None] - rows[None, :]) - 1).astype(DTYPE)
    np.fill_diagonal(dist, 0.0)
    dw = -np.einsum("ti,tic->c", dist, de) / T
    grads = (dk, dv, dw, du)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericError("non-finite biwkv gradient")
    return grads
