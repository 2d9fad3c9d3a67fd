"""Text-modulated deformable sampling.

Base offsets come from a linear map of the queries; a softmax attention of the
queries over the text embeddings feeds a small MLP whose output is added to
those offsets. Features are bilinearly sampled at ``ref + offsets`` and the
K samples per query are concatenated and projected back to D.

Coordinates are normalized to [0, 1]^2 as (x, y); pixel coordinates are
``x * (W - 1)`` and ``y * (H - 1)``. Neighbors outside the map read as zero.
"""
from __future__ import annotations

import numpy as np

from .fusion import linear, linear_backward
from .numeric import DTYPE, softmax, softmax_backward


def base_offsets(q, W, b):
    return linear(np.asarray(q, dtype=DTYPE), W, b)


def text_attention(q, t):
    q = np.asarray(q, dtype=DTYPE)
    t = np.asarray(t, dtype=DTYPE)
    if q.shape[1] != t.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} != text dim {t.shape[1]}")
    return softmax(q @ t.T / np.sqrt(q.shape[1]), axis=1)


def text_attention_backward(dattn, q, t, attn):
    scale = 1.0 / np.sqrt(q.shape[1])
    dlogits = softmax_backward(dattn, attn, axis=1) * scale
    return dlogits @ t, dlogits.T @ q


def mlp_forward(x, layers):
    """``layers`` is a list of (W, b); tanh between layers, none after the last."""
    acts = [x]
    h = x
    for i, (W, b) in enumerate(layers):
        h = linear(h, W, b)
        if i < len(layers) - 1:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def mlp_backward(dy, acts, layers):
    grads = []
    d = dy
    for i in reversed(range(len(layers))):
        W, _ = layers[i]
        if i < len(layers) - 1:
            d = d * (1.0 - acts[i + 1] ** 2)
        dx, dW, db = linear_backward(d, acts[i], W)
        grads.append((dW, db))
        d = dx
    return d, grads[::-1]


def modulation_weights(attn, layers):
    return mlp_forward(np.asarray(attn, dtype=DTYPE), layers)[0]


# ---------------------------------------------------------------------------
# bilinear sampling

def _corners(f_ref, points):
    C, H, W = f_ref.shape
    px = points[:, 0] * (W - 1)
    py = points[:, 1] * (H - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = px - x0
    fy = py - y0
    out = []
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                       (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + dy, x0 + dx
        ok = (xx >= 0) & (xx < W) & (yy >= 0) & (yy < H)
        out.append((np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1), ok, wt, dy, dx))
    return out, fx, fy


def bilinear_sample(f_ref, points):
    """[C, H, W] map sampled at P normalized points -> [P, C]."""
    f_ref = np.asarray(f_ref, dtype=DTYPE)
    points = np.asarray(points, dtype=DTYPE).reshape(-1, 2)
    out = np.zeros((points.shape[0], f_ref.shape[0]))
    corners, _, _ = _corners(f_ref, points)
    for yy, xx, ok, wt, _, _ in corners:
        out += np.where(ok, wt, 0.0)[:, None] * f_ref[:, yy, xx].T
    return out


def bilinear_sample_backward(dout, f_ref, points):
    """Gradients w.r.t. the map and the normalized point coordinates."""
    f_ref = np.asarray(f_ref, dtype=DTYPE)
    points = np.asarray(points, dtype=DTYPE).reshape(-1, 2)
    C, H, W = f_ref.shape
    dmap = np.zeros_like(f_ref)
    dpts = np.zeros_like(points)
    corners, fx, fy = _corners(f_ref, points)
    for yy, xx, ok, wt, dy, dx in corners:
        w_ok = np.where(ok, wt, 0.0)
        for c in range(C):
            np.add.at(dmap[c], (yy, xx), w_ok * dout[:, c])
        val = np.where(ok[:, None], f_ref[:, yy, xx].T, 0.0)
        proj = np.sum(val * dout, axis=1)
        dwx = (1 - fy if dy == 0 else fy) * (1.0 if dx == 1 else -1.0)
        dwy = (1 - fx if dx == 0 else fx) * (1.0 if dy == 1 else -1.0)
        dpts[:, 0] += proj * dwx * (W - 1)
        dpts[:, 1] += proj * dwy * (H - 1)
    return dmap, dpts


# ---------------------------------------------------------------------------
# full modulated sampler

def _mod_layers(params):
    n = sum(1 for k in params if k.startswith("mod.W"))
    return [(params[f"mod.W{i}"], params[f"mod.b{i}"]) for i in range(n)]


def modulated_sample_forward(q, t, f_ref, ref_points, params, k_points):
    q = np.asarray(q, dtype=DTYPE)
    t = np.asarray(t, dtype=DTYPE)
    f_ref = np.asarray(f_ref, dtype=DTYPE)
    ref_points = np.asarray(ref_points, dtype=DTYPE)
    N = q.shape[0]
    K = int(k_points)
    if K < 1:
        raise ValueError("need at least one sampling point per query")
    base = base_offsets(q, params["off.W"], params["off.b"])
    attn = text_attention(q, t)
    layers = _mod_layers(params)
    mod, acts = mlp_forward(attn, layers)
    if base.shape != (N, 2 * K) or mod.shape != (N, 2 * K):
        raise ValueError("offset heads must output 2K values per query")
    offsets = (base + mod).reshape(N, K, 2)
    points = (ref_points[:, None, :] + offsets).reshape(N * K, 2)
    samples = bilinear_sample(f_ref, points)
    flat = samples.reshape(N, K * f_ref.shape[0])
    out = linear(flat, params["out.W"], params["out.b"])
    cache = dict(q=q, t=t, f_ref=f_ref, attn=attn, acts=acts, layers=layers,
                 points=points, flat=flat, params=params, N=N, K=K)
    return out, cache


def modulated_sample(q, t, f_ref, ref_points, params, k_points):
    return modulated_sample_forward(q, t, f_ref, ref_points, params, k_points)[0]


def modulated_sample_backward(dout, cache):
    p = cache["params"]
    g = {}
    dflat, g["out.W"], g["out.b"] = linear_backward(dout, cache["flat"], p["out.W"])
    N, K = cache["N"], cache["K"]
    f_ref = cache["f_ref"]
    dsamples = dflat.reshape(N * K, f_ref.shape[0])
    dmap, dpts = bilinear_sample_backward(dsamples, f_ref, cache["points"])
    doffsets = dpts.reshape(N, 2 * K)
    dattn, mod_grads = mlp_backward(doffsets, cache["acts"], cache["layers"])
    for i, (dW, db) in enumerate(mod_grads):
        g[f"mod.W{i}"], g[f"mod.b{i}"] = dW, db
    dq_att, dt = text_attention_backward(dattn, cache["q"], cache["t"], cache["attn"])
    dq_off, g["off.W"], g["off.b"] = linear_backward(doffsets, cache["q"], p["off.W"])
    dref = dpts.reshape(N, K, 2).sum(axis=1)
    return dict(q=dq_att + dq_off, t=dt, f_ref=dmap, ref_points=dref), g


def init_sampler(dim, n_classes, channels, k_points, rng, hidden=None, zero_heads=True):
    """Offset and modulation heads start at zero, so sampling starts at the reference points."""
    hid = hidden or max(n_classes, 2 * k_points)
    two_k = 2 * k_points
    p = {
        "off.W": np.zeros((dim, two_k)) if zero_heads else rng.normal(0, 0.05, (dim, two_k)),
        "off.b": np.zeros(two_k),
        "mod.W0": rng.normal(0, 1.0 / np.sqrt(n_classes), (n_classes, hid)),
        "mod.b0": np.zeros(hid),
        "mod.W1": np.zeros((hid, two_k)) if zero_heads else rng.normal(0, 0.05, (hid, two_k)),
        "mod.b1": np.zeros(two_k),
        "out.W": rng.normal(0, 1.0 / np.sqrt(k_points * channels), (k_points * channels, dim)),
        "out.b": np.zeros(dim),
    }
    return p

