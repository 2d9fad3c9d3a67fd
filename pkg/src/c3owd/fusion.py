"""RGB/IR fusion block: Q-shift, spatial mix (Bi-WKV), channel mix, post-norm
residuals, and a top-down multi-scale merge.

Parameters are flat ``dict[str, ndarray]`` with dotted keys so they can be
flattened for gradient checks and EMA tracking. Every forward returns
``(out, cache)`` and has a matching ``*_backward(dout, cache)``.
Token layout is row-major over (H, W): token ``h * W + w`` holds pixel (h, w).
"""
from __future__ import annotations

import numpy as np

from .biwkv import biwkv_backward, biwkv_scan
from .numeric import (DTYPE, NumericError, layer_norm_backward, layer_norm_forward,
                      sigmoid, squared_relu)

LN_EPS = 1e-5


def sub(params, prefix):
    """View of the entries under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def prefixed(grads, prefix):
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def _stage(x, stage):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values at stage '{stage}'")
    return x


def to_tokens(img):
    C = img.shape[0]
    return img.reshape(C, -1).T


def to_image(tokens, hw):
    H, W = hw
    return tokens.T.reshape(tokens.shape[1], H, W)


def linear(x, W, b=None):
    y = x @ W
    return y if b is None else y + b


def linear_backward(dy, x, W):
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


# ---------------------------------------------------------------------------
# Q-shift

def _shift(x, adjoint=False):
    """Quad-directional one-pixel shift of four channel groups, zero padded."""
    C = x.shape[0]
    g = C // 4
    out = np.zeros_like(x)
    a, b, c = g, 2 * g, 3 * g
    if not adjoint:
        out[:a, :, 1:] = x[:a, :, :-1]
        out[a:b, :, :-1] = x[a:b, :, 1:]
        out[b:c, 1:, :] = x[b:c, :-1, :]
        out[c:, :-1, :] = x[c:, 1:, :]
    else:
        out[:a, :, :-1] = x[:a, :, 1:]
        out[a:b, :, 1:] = x[a:b, :, :-1]
        out[b:c, :-1, :] = x[b:c, 1:, :]
        out[c:, 1:, :] = x[c:, :-1, :]
    return out


def q_shift(x, mu):
    """(1 - mu) * x + mu * shifted(x), per channel; x is [C, H, W]."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3 or x.shape[0] % 4:
        raise ValueError(f"q_shift needs [C, H, W] with C divisible by 4, got {x.shape}")
    m = np.broadcast_to(np.asarray(mu, dtype=DTYPE), (x.shape[0],))[:, None, None]
    return (1.0 - m) * x + m * _shift(x)


def q_shift_backward(dy, x, mu):
    m = np.broadcast_to(np.asarray(mu, dtype=DTYPE), (x.shape[0],))[:, None, None]
    shifted = _shift(x)
    dx = (1.0 - m) * dy + _shift(m * dy, adjoint=True)
    dmu = np.sum(dy * (shifted - x), axis=(1, 2))
    return dx, dmu


def clamp_mix(params):
    """Keep every Q-shift mix ratio inside [0, 1] (applied after each update)."""
    for k in params:
        if k.rsplit(".", 1)[-1].startswith("mu_"):
            np.clip(params[k], 0.0, 1.0, out=params[k])
    return params


# ---------------------------------------------------------------------------
# spatial mix

def spatial_mix_forward(x, p, hw):
    x = np.asarray(x, dtype=DTYPE)
    img = to_image(x, hw)
    xr = to_tokens(q_shift(img, p["mu_r"]))
    xk = to_tokens(q_shift(img, p["mu_k"]))
    xv = to_tokens(q_shift(img, p["mu_v"]))
    r = _stage(linear(xr, p["W_R"], p["b_R"]), "receptance")
    # no key bias: a per-channel shift of k cancels in the WKV normalization
    k = _stage(linear(xk, p["W_K"]), "key")
    v = _stage(linear(xv, p["W_V"], p["b_V"]), "value")
    wkv = _stage(biwkv_scan(k, v, p["w"], p["u"]), "bi-wkv")
    gate = sigmoid(r)
    gated = gate * wkv
    out = _stage(linear(gated, p["W_O"], p["b_O"]), "output")
    cache = dict(img=img, xr=xr, xk=xk, xv=xv, k=k, v=v, wkv=wkv, gate=gate, gated=gated, p=p, hw=hw)
    return out, cache


def spatial_mix(x, p, hw):
    return spatial_mix_forward(x, p, hw)[0]


def spatial_mix_backward(dout, cache):
    p = cache["p"]
    g = {}
    dgated, g["W_O"], g["b_O"] = linear_backward(dout, cache["gated"], p["W_O"])
    gate, wkv = cache["gate"], cache["wkv"]
    dwkv = dgated * gate
    dr = dgated * wkv * gate * (1.0 - gate)
    dk, dv, g["w"], g["u"] = biwkv_backward(cache["k"], cache["v"], p["w"], p["u"], dwkv)
    dxr, g["W_R"], g["b_R"] = linear_backward(dr, cache["xr"], p["W_R"])
    dxk, g["W_K"], _ = linear_backward(dk, cache["xk"], p["W_K"])
    dxv, g["W_V"], g["b_V"] = linear_backward(dv, cache["xv"], p["W_V"])
    img, hw = cache["img"], cache["hw"]
    dimg = np.zeros_like(img)
    for branch, dtok in (("r", dxr), ("k", dxk), ("v", dxv)):
        d, g[f"mu_{branch}"] = q_shift_backward(to_image(dtok, hw), img, p[f"mu_{branch}"])
        dimg += d
    return to_tokens(dimg), g


# ---------------------------------------------------------------------------
# channel mix

def channel_mix_forward(x, p, hw):
    x = np.asarray(x, dtype=DTYPE)
    img = to_image(x, hw)
    xr = to_tokens(q_shift(img, p["mu_r"]))
    xk = to_tokens(q_shift(img, p["mu_k"]))
    r = _stage(linear(xr, p["W_R"], p["b_R"]), "receptance")
    kc = _stage(linear(xk, p["W_K"], p["b_K"]), "key")
    act = squared_relu(kc)
    vc = _stage(linear(act, p["W_V"], p["b_V"]), "value")
    gate = sigmoid(r)
    gated = gate * vc
    out = _stage(linear(gated, p["W_O"], p["b_O"]), "output")
    cache = dict(img=img, xr=xr, xk=xk, kc=kc, act=act, vc=vc, gate=gate, gated=gated, p=p, hw=hw)
    return out, cache


def channel_mix(x, p, hw):
    return channel_mix_forward(x, p, hw)[0]


def channel_mix_backward(dout, cache):
    p = cache["p"]
    g = {}
    dgated, g["W_O"], g["b_O"] = linear_backward(dout, cache["gated"], p["W_O"])
    gate, vc = cache["gate"], cache["vc"]
    dvc = dgated * gate
    dr = dgated * vc * gate * (1.0 - gate)
    dact, g["W_V"], g["b_V"] = linear_backward(dvc, cache["act"], p["W_V"])
    dkc = dact * 2.0 * np.maximum(cache["kc"], 0.0)
    dxr, g["W_R"], g["b_R"] = linear_backward(dr, cache["xr"], p["W_R"])
    dxk, g["W_K"], g["b_K"] = linear_backward(dkc, cache["xk"], p["W_K"])
    img, hw = cache["img"], cache["hw"]
    dimg = np.zeros_like(img)
    for branch, dtok in (("r", dxr), ("k", dxk)):
        d, g[f"mu_{branch}"] = q_shift_backward(to_image(dtok, hw), img, p[f"mu_{branch}"])
        dimg += d
    return to_tokens(dimg), g


# ---------------------------------------------------------------------------
# block

def vrwkv_block_forward(rgb, ir, params):
    rgb = np.asarray(rgb, dtype=DTYPE)
    ir = np.asarray(ir, dtype=DTYPE)
    if rgb.shape != ir.shape:
        raise ValueError(f"modality shapes differ: {rgb.shape} vs {ir.shape}")
    hw = rgb.shape[1:]
    x = to_tokens(np.concatenate([rgb, ir], axis=0))
    a, c_sp = spatial_mix_forward(x, sub(params, "spatial"), hw)
    s, c_ln1 = layer_norm_forward(a + x, params["ln1.gain"], params["ln1.bias"], LN_EPS)
    b, c_ch = channel_mix_forward(s, sub(params, "channel"), hw)
    f, c_ln2 = layer_norm_forward(b + s, params["ln2.gain"], params["ln2.bias"], LN_EPS)
    cache = dict(sp=c_sp, ln1=c_ln1, ch=c_ch, ln2=c_ln2, hw=hw, C=rgb.shape[0])
    return to_image(f, hw), cache


def vrwkv_block(rgb, ir, params):
    """Fused [2C, H, W] map for one pyramid level."""
    return vrwkv_block_forward(rgb, ir, params)[0]


def vrwkv_block_backward(dfused, cache):
    hw = cache["hw"]
    g = {}
    dsum2, g["ln2.gain"], g["ln2.bias"] = layer_norm_backward(to_tokens(dfused), cache["ln2"])
    ds_ch, g_ch = channel_mix_backward(dsum2, cache["ch"])
    ds = dsum2 + ds_ch
    dsum1, g["ln1.gain"], g["ln1.bias"] = layer_norm_backward(ds, cache["ln1"])
    dx_sp, g_sp = spatial_mix_backward(dsum1, cache["sp"])
    dx = dsum1 + dx_sp
    g.update(prefixed(g_sp, "spatial"))
    g.update(prefixed(g_ch, "channel"))
    dimg = to_image(dx, hw)
    C = cache["C"]
    return dimg[:C], dimg[C:], g


def init_block(channels, rng, hidden=None, scale=None):
    """Parameters for a block whose fused input has ``channels`` channels."""
    C = channels
    if C % 4:
        raise ValueError("fused channel count must be divisible by 4")
    Hd = hidden or C
    s = scale if scale is not None else 1.0 / np.sqrt(C)

    def W(n_in, n_out, sc=s):
        return rng.normal(0.0, sc, (n_in, n_out))

    p = {}
    for name in ("R", "K", "V", "O"):
        p[f"spatial.W_{name}"] = W(C, C)
        if name != "K":
            p[f"spatial.b_{name}"] = np.zeros(C)
    for name in ("r", "k", "v"):
        p[f"spatial.mu_{name}"] = np.full(C, 0.5)
    p["spatial.w"] = rng.uniform(-1.0, 1.0, C)
    p["spatial.u"] = rng.uniform(-0.5, 0.5, C)
    p["channel.W_R"] = W(C, C)
    p["channel.b_R"] = np.zeros(C)
    p["channel.W_K"] = W(C, Hd)
    p["channel.b_K"] = np.zeros(Hd)
    p["channel.W_V"] = W(Hd, C, 1.0 / np.sqrt(Hd))
    p["channel.b_V"] = np.zeros(C)
    p["channel.W_O"] = W(C, C)
    p["channel.b_O"] = np.zeros(C)
    p["channel.mu_r"] = np.full(C, 0.5)
    p["channel.mu_k"] = np.full(C, 0.5)
    for ln in ("ln1", "ln2"):
        p[f"{ln}.gain"] = np.ones(C)
        p[f"{ln}.bias"] = np.zeros(C)
    return p


# ---------------------------------------------------------------------------
# multi-scale merge

def _upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upsample2_backward(dy):
    C, H, W = dy.shape
    return dy.reshape(C, H // 2, 2, W // 2, 2).sum(axis=(2, 4))


def multi_scale_merge_forward(levels, laterals):
    """Top-down merge: 1x1 lateral projection per level, nearest 2x upsampling,
    elementwise sum; returns the finest level.

    ``levels`` is ordered finest first; ``laterals[i]`` holds ``W`` [C_i, D] and ``b`` [D].
    """
    if not levels or len(levels) != len(laterals):
        raise ValueError("need one lateral projection per level")
    for fine, coarse in zip(levels, levels[1:]):
        if fine.shape[1] != 2 * coarse.shape[1] or fine.shape[2] != 2 * coarse.shape[2]:
            raise ValueError(f"non-dyadic level sizes {fine.shape[1:]} and {coarse.shape[1:]}")
    lats = []
    for x, lat in zip(levels, laterals):
        hw = x.shape[1:]
        lats.append(to_image(linear(to_tokens(x), lat["W"], lat["b"]), hw))
    out = lats[-1]
    for lat in reversed(lats[:-1]):
        out = lat + _upsample2(out)
    return out, dict(levels=levels, laterals=laterals)


def multi_scale_merge(levels, laterals):
    return multi_scale_merge_forward(levels, laterals)[0]


def multi_scale_merge_backward(dout, cache):
    levels, laterals = cache["levels"], cache["laterals"]
    dlats = [dout]
    d = dout
    for _ in levels[1:]:
        d = _upsample2_backward(d)
        dlats.append(d)
    dlevels, grads = [], []
    for x, lat, dl in zip(levels, laterals, dlats):
        dx, dW, db = linear_backward(to_tokens(dl), to_tokens(x), lat["W"])
        dlevels.append(to_image(dx, x.shape[1:]))
        grads.append({"W": dW, "b": db})
    return dlevels, grads
