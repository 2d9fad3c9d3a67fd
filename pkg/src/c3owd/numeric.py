"""Dense float64 arithmetic shared by every other module.

Tensors are plain ``numpy.ndarray`` objects. Every differentiable op in the
package ships a hand-written backward; this module provides the common
activations, layer norm, the finite-difference oracle used to check those
backwards, seeded generators and the CSV tensor format.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

DTYPE = np.float64


class NumericError(ArithmeticError):
    """Raised when a computation produces NaN/Inf or hits a numeric precondition."""


def ensure_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.Philox(int(seed) % 2**64))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent child streams, e.g. one per trial, reproducible in any order."""
    children = np.random.SeedSequence(int(seed) % 2**64).spawn(n)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


# ---------------------------------------------------------------------------
# activations

def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def squared_relu(x):
    r = np.maximum(np.asarray(x, dtype=DTYPE), 0.0)
    return r * r


def softmax(x, axis: int = -1):
    x = np.asarray(x, dtype=DTYPE)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dy, y, axis: int = -1):
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def logsumexp(x, axis: int = -1):
    x = np.asarray(x, dtype=DTYPE)
    mx = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(mx, axis=axis) + np.log(np.sum(np.exp(x - mx), axis=axis))


# ---------------------------------------------------------------------------
# layer norm over the trailing axis

def layer_norm_forward(x, gain, bias, eps: float = 1e-5):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("layer_norm needs a non-empty trailing axis")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    # zero-variance rows are returned centered (all zeros before the affine)
    flat = var < eps * eps
    xhat = np.where(flat, 0.0, xc * inv)
    y = xhat * gain + bias
    return y, (xhat, inv, flat, np.asarray(gain, dtype=DTYPE))


def layer_norm(x, gain, bias, eps: float = 1e-5):
    return layer_norm_forward(x, gain, bias, eps)[0]


def layer_norm_backward(dy, cache):
    xhat, inv, flat, gain = cache
    lead = tuple(range(dy.ndim - 1))
    dgain = np.sum(dy * xhat, axis=lead)
    dbias = np.sum(dy, axis=lead)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    dx = np.where(flat, 0.0, dx)
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# finite differences

def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5,
                         order: int = 2, dtype=DTYPE) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``order=2`` is the plain (f(x+h) - f(x-h)) / 2h stencil; ``order=4`` and
    ``order=6`` are the five- and seven-point central stencils. Higher orders
    allow a larger ``h``, which keeps round-off (about eps |f| / h) small
    next to tiny gradient entries. ``dtype=np.longdouble`` evaluates ``f`` in
    extended precision when ``f`` preserves its input dtype.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if order not in (2, 4, 6):
        raise ValueError("order must be 2, 4 or 6")
    x = np.array(x, dtype=dtype, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)

    def at(i, step):
        old = flat[i]
        flat[i] = old + step
        val = f(x)
        flat[i] = old
        if not np.isfinite(val):
            raise NumericError(f"f is non-finite at coordinate {np.unravel_index(i, x.shape)}")
        return val

    h = dtype(h)
    for i in range(flat.size):
        # differences first, so a locally flat f gives exactly 0
        d1 = at(i, h) - at(i, -h)
        if order == 2:
            gflat[i] = d1 / (2 * h)
        elif order == 4:
            gflat[i] = (8 * d1 - (at(i, 2 * h) - at(i, -2 * h))) / (12 * h)
        else:
            d2 = at(i, 2 * h) - at(i, -2 * h)
            d3 = at(i, 3 * h) - at(i, -3 * h)
            gflat[i] = (45 * d1 - 9 * d2 + d3) / (60 * h)
    return grad.astype(DTYPE)


def max_rel_err(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


@dataclass(frozen=True)
class GradReport:
    op_name: str
    param_name: str
    max_rel_err: float

    def to_dict(self) -> dict:
        return asdict(self)


def check_gradients(op_name: str, loss: Callable[[Mapping[str, np.ndarray]], float],
                    inputs: Mapping[str, np.ndarray], analytic: Mapping[str, np.ndarray],
                    h: float = 1e-3, order: int = 4, dtype=DTYPE) -> list[GradReport]:
    """Compare ``analytic[name]`` with finite differences of ``loss`` for each input.

    ``loss`` receives a dict shaped like ``inputs``; only the entry being
    perturbed differs from the originals. With ``dtype=np.longdouble`` every
    input is promoted and ``loss`` should return an unrounded scalar.
    """
    base = {k: np.asarray(v, dtype=dtype) for k, v in inputs.items()}
    reports = []
    for name in analytic:
        def f_of(x, name=name):
            trial = dict(base)
            trial[name] = x
            return loss(trial)
        num = finite_diff_gradient(f_of, base[name], h=h, order=order, dtype=dtype)
        reports.append(GradReport(op_name, name, max_rel_err(analytic[name], num)))
    return reports


# ---------------------------------------------------------------------------
# parameter dict helpers

def flatten(params: Mapping[str, np.ndarray], keys=None) -> np.ndarray:
    keys = sorted(params) if keys is None else keys
    if not keys:
        return np.zeros(0)
    return np.concatenate([np.asarray(params[k], dtype=DTYPE).reshape(-1) for k in keys])


def unflatten(vec: np.ndarray, like: Mapping[str, np.ndarray], keys=None) -> dict[str, np.ndarray]:
    keys = sorted(like) if keys is None else keys
    out, pos = {}, 0
    for k in keys:
        n = np.size(like[k])
        out[k] = np.asarray(vec[pos:pos + n], dtype=DTYPE).reshape(np.shape(like[k])).copy()
        pos += n
    if pos != vec.size:
        raise ValueError("vector length does not match parameter layout")
    return out


def copy_params(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.array(v, dtype=DTYPE, copy=True) for k, v in params.items()}


# ---------------------------------------------------------------------------
# CSV tensor format: header "shape=d1xd2x..." then row-major values

def dump_tensor(path, x) -> None:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 0 or x.size == 0:
        raise ValueError("cannot dump a tensor with empty shape")
    ensure_finite(x, "tensor to dump")
    rows = x.reshape(-1, x.shape[-1])
    lines = ["shape=" + "x".join(str(d) for d in x.shape)]
    lines += [",".join(format(v, ".17g") for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def load_tensor(path) -> np.ndarray:
    text = Path(path).read_text().strip().splitlines()
    if not text or not text[0].startswith("shape="):
        raise ValueError(f"{path}: missing 'shape=' header")
    shape = tuple(int(d) for d in text[0][len("shape="):].split("x"))
    if not shape or any(d <= 0 for d in shape):
        raise ValueError(f"{path}: invalid shape {shape}")
    values = [float(v) for line in text[1:] for v in line.split(",") if v.strip()]
    if len(values) != math.prod(shape):
        raise ValueError(f"{path}: expected {math.prod(shape)} values, got {len(values)}")
    return np.array(values, dtype=DTYPE).reshape(shape)
