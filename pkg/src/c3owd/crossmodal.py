"""Image/text semantic fusion: level projection, patch embedding and the
gated bidirectional RWKV exchange between patch tokens and class embeddings."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fusion import linear, linear_backward, prefixed, sub, to_tokens
from .numeric import DTYPE, ensure_finite, sigmoid, softmax


@dataclass
class TextBank:
    t_clip: np.ndarray          # [CLA, D]
    class_names: list[str]
    normalized: bool = False

    def __post_init__(self):
        self.t_clip = np.asarray(self.t_clip, dtype=DTYPE)
        if self.t_clip.ndim != 2 or self.t_clip.shape[0] < 1:
            raise ValueError("text bank needs at least one [D] embedding row")
        if len(self.class_names) != self.t_clip.shape[0]:
            raise ValueError("one class name per embedding row")
        ensure_finite(self.t_clip, "text bank")

    @property
    def dim(self) -> int:
        return self.t_clip.shape[1]

    @classmethod
    def synthetic(cls, n_classes: int, dim: int, rng, normalize: bool = True) -> "TextBank":
        t = rng.normal(size=(n_classes, dim))
        if normalize:
            t /= np.linalg.norm(t, axis=1, keepdims=True)
        return cls(t, [f"class_{i}" for i in range(n_classes)], normalize)

    @classmethod
    def load(cls, path, normalize: bool = False) -> "TextBank":
        names, rows = [], []
        with open(path, newline="") as fh:
            for rec in csv.reader(fh):
                if not rec:
                    continue
                names.append(rec[0].strip())
                rows.append([float(v) for v in rec[1:]])
        if not rows or len({len(r) for r in rows}) != 1:
            raise ValueError(f"{path}: ragged or empty text bank")
        t = np.array(rows, dtype=DTYPE)
        if normalize:
            t /= np.linalg.norm(t, axis=1, keepdims=True)
        return cls(t, names, normalize)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for name, row in zip(self.class_names, self.t_clip):
                w.writerow([name] + [format(v, ".17g") for v in row])


# ---------------------------------------------------------------------------
# level projection and patch embedding

def project_levels(levels, projections):
    """Flatten each [C_l, H_l, W_l] level to tokens, project to D, concatenate."""
    dims = {proj["W"].shape[1] for proj in projections}
    if len(levels) != len(projections):
        raise ValueError("need one projection per level")
    if len(dims) != 1:
        raise ValueError(f"projections disagree on D: {sorted(dims)}")
    seqs = []
    for x, proj in zip(levels, projections):
        if proj["W"].shape[0] != x.shape[0]:
            raise ValueError(f"projection expects {proj['W'].shape[0]} channels, level has {x.shape[0]}")
        seqs.append(linear(to_tokens(np.asarray(x, dtype=DTYPE)), proj["W"], proj.get("b")))
    return np.concatenate(seqs, axis=0)


@dataclass
class PatchTokens:
    m: np.ndarray   # [N, D]
    h_p: int
    w_p: int
    patch_size: int

    def __post_init__(self):
        if self.m.shape[0] != self.h_p * self.w_p:
            raise ValueError("token count must equal h_p * w_p")


def _patchify(x, p):
    C, H, W = x.shape
    hp, wp = H // p, W // p
    return x.reshape(C, hp, p, wp, p).transpose(1, 3, 0, 2, 4).reshape(hp * wp, C * p * p)


def _unpatchify(patches, shape, p):
    C, H, W = shape
    hp, wp = H // p, W // p
    return patches.reshape(hp, wp, C, p, p).transpose(2, 0, 3, 1, 4).reshape(C, H, W)


def patch_embed_forward(c2, patch_size, W, b):
    c2 = np.asarray(c2, dtype=DTYPE)
    C, H, Wd = c2.shape
    p = int(patch_size)
    if p < 1 or H % p or Wd % p:
        raise ValueError(f"map {H}x{Wd} is not divisible by patch size {p}")
    flat = _patchify(c2, p)
    tokens = PatchTokens(linear(flat, W, b), H // p, Wd // p, p)
    return tokens, dict(flat=flat, shape=c2.shape, p=p, W=W)


def patch_embed(c2, patch_size, W, b) -> PatchTokens:
    return patch_embed_forward(c2, patch_size, W, b)[0]


def patch_embed_backward(dm, cache):
    dflat, dW, db = linear_backward(dm, cache["flat"], cache["W"])
    return _unpatchify(dflat, cache["shape"], cache["p"]), dW, db


# ---------------------------------------------------------------------------
# cross-sequence WKV

def cross_wkv_forward(rec, kv, p):
    """Receptance from ``rec`` [A, D], keys/values from ``kv`` [B, D].

    No shared positions exist across modalities, so the distance decay drops
    out and the pooled value is a per-channel softmax(k)-weighted mean of v.
    """
    rec = np.asarray(rec, dtype=DTYPE)
    kv = np.asarray(kv, dtype=DTYPE)
    if kv.shape[0] == 0:
        raise ValueError("cross_wkv needs a non-empty key/value sequence")
    r = linear(rec, p["W_r"], p["b_r"])
    k = linear(kv, p["W_k"])
    v = linear(kv, p["W_v"], p["b_v"])
    attn = softmax(k, axis=0)
    pooled = np.sum(attn * v, axis=0)
    gate = sigmoid(r)
    out = gate * pooled
    return out, dict(rec=rec, kv=kv, v=v, attn=attn, pooled=pooled, gate=gate, p=p)


def cross_wkv(rec, kv, p):
    return cross_wkv_forward(rec, kv, p)[0]


def cross_wkv_backward(dout, cache):
    p = cache["p"]
    gate, pooled, attn, v = cache["gate"], cache["pooled"], cache["attn"], cache["v"]
    g = {}
    dr = dout * pooled * gate * (1.0 - gate)
    dpooled = np.sum(dout * gate, axis=0)
    dv = attn * dpooled
    dk = attn * dpooled * (v - pooled)
    drec, g["W_r"], g["b_r"] = linear_backward(dr, cache["rec"], p["W_r"])
    dkv_k, g["W_k"], _ = linear_backward(dk, cache["kv"], p["W_k"])
    dkv_v, g["W_v"], g["b_v"] = linear_backward(dv, cache["kv"], p["W_v"])
    return drec, dkv_k + dkv_v, g


# ---------------------------------------------------------------------------
# gated exchange

def _gate_forward(z, p):
    h = np.tanh(linear(z, p["W1"], p["b1"]))
    g = sigmoid(linear(h, p["W2"], p["b2"]))
    return g, (z, h, g)


def _gate_backward(dg, cache, p):
    z, h, g = cache
    grads = {}
    dpre2 = dg * g * (1.0 - g)
    dh, grads["W2"], grads["b2"] = linear_backward(dpre2, h, p["W2"])
    dpre1 = dh * (1.0 - h * h)
    dz, grads["W1"], grads["b1"] = linear_backward(dpre1, z, p["W1"])
    return dz, grads


@dataclass
class ExchangeState:
    m_out: np.ndarray
    t_out: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray
    cache: dict = field(default=None, repr=False)


def gated_exchange(m, t, params) -> ExchangeState:
    m = np.asarray(m, dtype=DTYPE)
    t = np.asarray(t, dtype=DTYPE)
    D = m.shape[1]
    v_i, c_i = cross_wkv_forward(m, t, sub(params, "i2t"))
    v_t, c_t = cross_wkv_forward(t, m, sub(params, "t2i"))
    gamma, c_gm = _gate_forward(np.concatenate([m, v_i], axis=1), sub(params, "gate_m"))
    delta, c_gt = _gate_forward(np.concatenate([t, v_t], axis=1), sub(params, "gate_t"))
    m_out = m + gamma * v_i
    t_out = t + delta * v_t
    cache = dict(v_i=v_i, v_t=v_t, c_i=c_i, c_t=c_t, c_gm=c_gm, c_gt=c_gt, D=D, params=params)
    return ExchangeState(ensure_finite(m_out, "m_out"), ensure_finite(t_out, "t_out"), gamma, delta, cache)


def gated_exchange_backward(dm_out, dt_out, state: ExchangeState):
    c = state.cache
    params, D = c["params"], c["D"]
    g = {}
    dm = dm_out.copy()
    dt = dt_out.copy()
    dv_i = dm_out * state.gamma
    dv_t = dt_out * state.delta
    dz_m, g_gm = _gate_backward(dm_out * c["v_i"], c["c_gm"], sub(params, "gate_m"))
    dz_t, g_gt = _gate_backward(dt_out * c["v_t"], c["c_gt"], sub(params, "gate_t"))
    dm += dz_m[:, :D]
    dv_i += dz_m[:, D:]
    dt += dz_t[:, :D]
    dv_t += dz_t[:, D:]
    dm_rec, dt_kv, g_i = cross_wkv_backward(dv_i, c["c_i"])
    dt_rec, dm_kv, g_t = cross_wkv_backward(dv_t, c["c_t"])
    dm += dm_rec + dm_kv
    dt += dt_rec + dt_kv
    for prefix, gg in (("i2t", g_i), ("t2i", g_t), ("gate_m", g_gm), ("gate_t", g_gt)):
        g.update(prefixed(gg, prefix))
    return dm, dt, g


def semantic_fusion(m, t, params, rounds: int = 2):
    """Apply the exchange ``rounds`` times with shared parameters.

    Returns ``(m_final, t_final, states)``; ``states[l]`` is round ``l + 1``.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    states = []
    for _ in range(rounds):
        st = gated_exchange(m, t, params)
        states.append(st)
        m, t = st.m_out, st.t_out
    return m, t, states


def semantic_fusion_backward(dm, dt, states, dm_rounds=None, dt_rounds=None):
    """Backprop through all rounds; ``dm_rounds[l]`` adds upstream gradient on
    round ``l``'s outputs (used by per-layer auxiliary heads)."""
    grads = {}
    dm = np.asarray(dm, dtype=DTYPE).copy()
    dt = np.asarray(dt, dtype=DTYPE).copy()
    for l in reversed(range(len(states))):
        if dm_rounds is not None and dm_rounds[l] is not None:
            dm = dm + dm_rounds[l]
        if dt_rounds is not None and dt_rounds[l] is not None:
            dt = dt + dt_rounds[l]
        dm, dt, g = gated_exchange_backward(dm, dt, states[l])
        for k, v in g.items():
            grads[k] = grads[k] + v if k in grads else v
    return dm, dt, grads


def init_exchange(dim, rng, scale=None):
    s = scale if scale is not None else 1.0 / np.sqrt(dim)
    p = {}
    for side in ("i2t", "t2i"):
        p[f"{side}.W_r"] = rng.normal(0, s, (dim, dim))
        p[f"{side}.b_r"] = np.zeros(dim)
        p[f"{side}.W_k"] = rng.normal(0, s, (dim, dim))
        p[f"{side}.W_v"] = rng.normal(0, s, (dim, dim))
        p[f"{side}.b_v"] = np.zeros(dim)
    for gate in ("gate_m", "gate_t"):
        p[f"{gate}.W1"] = rng.normal(0, 1.0 / np.sqrt(2 * dim), (2 * dim, dim))
        p[f"{gate}.b1"] = np.zeros(dim)
        # zero final layer: every gate starts at 0.5
        p[f"{gate}.W2"] = np.zeros((dim, dim))
        p[f"{gate}.b2"] = np.zeros(dim)
    return p
