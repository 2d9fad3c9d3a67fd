"""Region/text momentum contrast with multi-positive InfoNCE.

Online projectors (``theta``) embed RoI features and text embeddings as
queries; their EMA copies (``theta_m``) produce keys. Keys of previous steps
live in two FIFO queues that supply extra negatives (and extra positives
when their class ids match).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .fusion import linear, linear_backward, prefixed, sub
from .numeric import DTYPE, NumericError, copy_params, flatten, unflatten

log = logging.getLogger(__name__)


def _real(x):
    """Float array keeping an extended input precision (used by the gradient oracle)."""
    x = np.asarray(x)
    return x if x.dtype in (np.float64, np.longdouble) else x.astype(DTYPE)

SENTINEL = -1  # class id of never-written queue slots; never a positive


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = -1

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"box must have positive area: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def select_positives(proposals, gt, tau_iou: float = 0.3):
    """Pairs (proposal index, gt index) for proposals whose best IoU reaches
    ``tau_iou`` (inclusive). Ties go to the lower gt index."""
    if not 0 < tau_iou <= 1:
        raise ValueError("tau_iou must lie in (0, 1]")
    pairs = []
    if not gt:
        return pairs
    for i, p in enumerate(proposals):
        scores = [iou(p, g) for g in gt]
        j = int(np.argmax(scores))
        if scores[j] >= tau_iou:
            pairs.append((i, j))
    return pairs


def ema_update(theta_m, theta, m: float):
    """theta_m <- m * theta_m + (1 - m) * theta, for arrays or dicts of arrays.

    Written as theta_m + (1 - m) * (theta - theta_m) so that m = 1 and
    theta == theta_m leave theta_m bit-identical.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    if isinstance(theta_m, dict):
        if theta_m.keys() != theta.keys():
            raise ValueError("parameter sets differ")
        return {k: ema_update(theta_m[k], theta[k], m) for k in theta_m}
    a = np.asarray(theta_m, dtype=DTYPE)
    b = np.asarray(theta, dtype=DTYPE)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if m == 0.0:
        return b.copy()
    return a + (1.0 - m) * (b - a)


def l2_normalize(x):
    x = _real(x)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise NumericError("cannot normalize a zero-norm row")
    return x / n


class FeatureQueue:
    """FIFO ring of unit-norm key embeddings with class ids."""

    def __init__(self, capacity: int, dim: int, rng=None):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = int(capacity)
        self.dim = int(dim)
        init = rng.normal(size=(capacity, dim)) if rng is not None else np.eye(capacity, dim) + 1e-3
        self.storage = l2_normalize(init)
        self.labels = np.full(capacity, SENTINEL, dtype=np.int64)
        self.ptr = 0
        self.fill = 0

    def push(self, batch, labels=None) -> None:
        batch = np.asarray(batch, dtype=DTYPE).reshape(-1, self.dim)
        B = batch.shape[0]
        if B > self.capacity:
            raise ValueError(f"batch of {B} exceeds queue capacity {self.capacity}")
        if not np.allclose(np.linalg.norm(batch, axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("queue entries must be L2-normalized")
        labels = np.full(B, SENTINEL) if labels is None else np.asarray(labels, dtype=np.int64)
        idx = (self.ptr + np.arange(B)) % self.capacity
        self.storage[idx] = batch
        self.labels[idx] = labels
        self.ptr = int((self.ptr + B) % self.capacity)
        self.fill = min(self.capacity, self.fill + B)

    @property
    def filled(self) -> bool:
        return self.fill == self.capacity

    def snapshot(self):
        return self.storage.copy(), self.labels.copy()


# ---------------------------------------------------------------------------
# logits and loss

def similarity_logits(r_q, keys, alpha: float):
    return (_real(r_q) @ _real(keys).T) * np.exp(alpha)


def _positive_mask(positives, shape):
    if isinstance(positives, np.ndarray) and positives.dtype == bool:
        if positives.shape != shape:
            raise ValueError("positive mask shape does not match logits")
        return positives
    mask = np.zeros(shape, dtype=bool)
    for i, cols in enumerate(positives):
        mask[i, list(cols)] = True
    return mask


def info_nce_grad(s, positives, tau: float):
    """Multi-positive InfoNCE and its gradient w.r.t. the logits ``s``."""
    s = _real(s)
    if tau <= 0:
        raise ValueError("tau must be positive")
    mask = _positive_mask(positives, s.shape)
    if not np.all(mask.any(axis=1)):
        raise ValueError("every row needs at least one positive")
    z = s / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    e_pos = np.where(mask, e, 0.0)
    e_neg = np.where(mask, 0.0, e)
    pos = e_pos.sum(axis=1)
    neg = e_neg.sum(axis=1)
    tot = pos + neg
    n = s.shape[0]
    # log(tot / pos) written as log1p(neg / pos): accurate when the loss is
    # small, and exactly 0 for all-positive rows
    row = np.log1p(neg / pos)
    loss = np.mean(row)
    dz = (e / tot[:, None] - e_pos / pos[:, None]) / n
    return loss, dz / tau


def info_nce_multi_pos(s, positives, tau: float) -> float:
    return info_nce_grad(s, positives, tau)[0]


# ---------------------------------------------------------------------------
# projector: two-layer tanh MLP followed by L2 normalization

def init_projector(d_in, d_hidden, d_out, rng):
    return {
        "W1": rng.normal(0, 1.0 / np.sqrt(d_in), (d_in, d_hidden)),
        "b1": np.zeros(d_hidden),
        "W2": rng.normal(0, 1.0 / np.sqrt(d_hidden), (d_hidden, d_out)),
        "b2": rng.normal(0, 0.1, d_out),
    }


def projector_forward(x, p, normalize: bool = True):
    x = np.atleast_2d(_real(x))
    h = np.tanh(linear(x, p["W1"], p["b1"]))
    y = linear(h, p["W2"], p["b2"])
    if not normalize:
        return y, (x, h, y, None)
    n = np.linalg.norm(y, axis=1, keepdims=True)
    if np.any(n == 0):
        raise NumericError("projector produced a zero embedding")
    return y / n, (x, h, y, n)


def projector_backward(dz, cache, p):
    x, h, y, n = cache
    if n is not None:
        z = y / n
        dy = (dz - z * np.sum(dz * z, axis=1, keepdims=True)) / n
    else:
        dy = dz
    g = {}
    dh, g["W2"], g["b2"] = linear_backward(dy, h, p["W2"])
    dpre = dh * (1.0 - h * h)
    dx, g["W1"], g["b1"] = linear_backward(dpre, x, p["W1"])
    return dx, g


def projector_layers(p):
    """Layer description consumed by ``ema.lipschitz_upper_bound``."""
    from .ema import Layer
    return [Layer(p["W1"], p["b1"], "tanh"), Layer(p["W2"], p["b2"], "identity")]


def _direction(q, keys, q_labels, key_labels, alpha, tau):
    """One InfoNCE direction; rows without any positive are dropped."""
    mask = q_labels[:, None] == key_labels[None, :]
    mask &= key_labels[None, :] != SENTINEL
    rows = mask.any(axis=1)
    if not rows.any():
        return 0.0, np.zeros_like(q), np.zeros_like(keys), 0.0, 0
    scale = np.exp(alpha)
    s = similarity_logits(q[rows], keys, alpha)
    loss, ds = info_nce_grad(s, mask[rows], tau)
    dq = np.zeros_like(q)
    dq[rows] = ds @ keys * scale
    dkeys = ds.T @ q[rows] * scale
    dalpha = np.sum(ds * s)
    return loss, dq, dkeys, dalpha, int(rows.sum())


def paired_contrast_loss(theta, x_region, region_labels, x_text, text_labels,
                         alpha=0.0, tau=0.07, lambda_i2t=1.0, lambda_t2i=1.0):
    """Symmetric InfoNCE where queries and keys both come from ``theta``.

    This is the loss L(theta) the EMA loss-preservation bound talks about.
    Returns ``(loss, grads)`` with ``grads`` keyed like ``theta``.
    """
    region_labels = np.asarray(region_labels)
    text_labels = np.asarray(text_labels)
    r, c_r = projector_forward(x_region, sub(theta, "region"))
    t, c_t = projector_forward(x_text, sub(theta, "text"))
    l_i2t, dr1, dt1, _, _ = _direction(r, t, region_labels, text_labels, alpha, tau)
    l_t2i, dt2, dr2, _, _ = _direction(t, r, text_labels, region_labels, alpha, tau)
    loss = lambda_i2t * l_i2t + lambda_t2i * l_t2i
    dr = lambda_i2t * dr1 + lambda_t2i * dr2
    dt = lambda_i2t * dt1 + lambda_t2i * dt2
    _, g_r = projector_backward(dr, c_r, sub(theta, "region"))
    _, g_t = projector_backward(dt, c_t, sub(theta, "text"))
    grads = {**prefixed(g_r, "region"), **prefixed(g_t, "text")}
    return loss, grads


# ---------------------------------------------------------------------------
# RoI pooling

def roi_cells(box: Box, shape):
    """Cells whose centers fall inside the box (pixel units); at least one."""
    _, H, W = shape
    ys = np.arange(H) + 0.5
    xs = np.arange(W) + 0.5
    iy = np.nonzero((ys >= box.y1) & (ys <= box.y2))[0]
    ix = np.nonzero((xs >= box.x1) & (xs <= box.x2))[0]
    if iy.size == 0 or ix.size == 0:
        cy = int(np.clip(np.floor((box.y1 + box.y2) / 2), 0, H - 1))
        cx = int(np.clip(np.floor((box.x1 + box.x2) / 2), 0, W - 1))
        return np.array([cy]), np.array([cx])
    return iy, ix


def roi_mean_pool(fmap, boxes):
    fmap = np.asarray(fmap, dtype=DTYPE)
    out = np.empty((len(boxes), fmap.shape[0]))
    for n, b in enumerate(boxes):
        iy, ix = roi_cells(b, fmap.shape)
        out[n] = fmap[:, iy[:, None], ix[None, :]].mean(axis=(1, 2))
    return out


def roi_mean_pool_backward(dout, fmap_shape, boxes):
    dmap = np.zeros(fmap_shape)
    for n, b in enumerate(boxes):
        iy, ix = roi_cells(b, fmap_shape)
        dmap[:, iy[:, None], ix[None, :]] += dout[n][:, None, None] / (iy.size * ix.size)
    return dmap


# ---------------------------------------------------------------------------
# state and step

@dataclass
class ContrastState:
    theta: dict
    theta_m: dict
    region_queue: FeatureQueue
    text_queue: FeatureQueue
    m: float = 0.999
    alpha: float = 0.0
    tau: float = 0.07
    lambda_i2t: float = 1.0
    lambda_t2i: float = 1.0
    steps: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.m <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        if {k: np.shape(v) for k, v in self.theta.items()} != {k: np.shape(v) for k, v in self.theta_m.items()}:
            raise ValueError("theta and theta_m must share shapes")

    @classmethod
    def create(cls, d_region, d_text, d_proj, queue_size, rng, d_hidden=None, **kw):
        d_hidden = d_hidden or 2 * d_proj
        theta = {**prefixed(init_projector(d_region, d_hidden, d_proj, rng), "region"),
                 **prefixed(init_projector(d_text, d_hidden, d_proj, rng), "text")}
        return cls(theta=theta, theta_m=copy_params(theta),
                   region_queue=FeatureQueue(queue_size, d_proj, rng),
                   text_queue=FeatureQueue(queue_size, d_proj, rng), **kw)

    def lag_norm(self) -> float:
        return float(np.linalg.norm(flatten(self.theta) - flatten(self.theta_m)))


@dataclass
class ContrastResult:
    loss: float
    loss_i2t: float
    loss_t2i: float
    n_regions: int
    grads: dict = field(repr=False)
    d_alpha: float = 0.0
    d_regions: np.ndarray = field(default=None, repr=False)
    d_texts: np.ndarray = field(default=None, repr=False)
    region_keys: np.ndarray = field(default=None, repr=False)
    region_labels: np.ndarray = field(default=None, repr=False)
    text_keys: np.ndarray = field(default=None, repr=False)


def contrast_forward_backward(region_feats, region_labels, text_feats, text_labels,
                              state: ContrastState) -> ContrastResult:
    """Loss and gradients at the current state; keys and queues are constants."""
    region_labels = np.asarray(region_labels, dtype=np.int64)
    text_labels = np.asarray(text_labels, dtype=np.int64)
    th, thm = state.theta, state.theta_m
    r_q, c_rq = projector_forward(region_feats, sub(th, "region"))
    t_q, c_tq = projector_forward(text_feats, sub(th, "text"))
    r_k, _ = projector_forward(region_feats, sub(thm, "region"))
    t_k, _ = projector_forward(text_feats, sub(thm, "text"))
    q_text, ql_text = state.text_queue.snapshot()
    q_reg, ql_reg = state.region_queue.snapshot()
    keys_t = np.concatenate([t_k, q_text])
    keys_r = np.concatenate([r_k, q_reg])
    l_i2t, dr_q, _, da1, _ = _direction(r_q, keys_t, region_labels,
                                        np.concatenate([text_labels, ql_text]), state.alpha, state.tau)
    l_t2i, dt_q, _, da2, _ = _direction(t_q, keys_r, text_labels,
                                        np.concatenate([region_labels, ql_reg]), state.alpha, state.tau)
    li, lt = state.lambda_i2t, state.lambda_t2i
    dx_r, g_r = projector_backward(li * dr_q, c_rq, sub(th, "region"))
    dx_t, g_t = projector_backward(lt * dt_q, c_tq, sub(th, "text"))
    return ContrastResult(
        loss=li * l_i2t + lt * l_t2i, loss_i2t=l_i2t, loss_t2i=l_t2i,
        n_regions=len(region_labels),
        grads={**prefixed(g_r, "region"), **prefixed(g_t, "text")},
        d_alpha=li * da1 + lt * da2, d_regions=dx_r, d_texts=dx_t,
        region_keys=r_k, region_labels=region_labels, text_keys=t_k,
    )


def commit(state: ContrastState, result: ContrastResult, text_labels) -> ContrastState:
    """Momentum update followed by both enqueues (the order of the training loop)."""
    state.theta_m = ema_update(state.theta_m, state.theta, state.m)
    if result.n_regions:
        state.region_queue.push(result.region_keys, result.region_labels)
        state.text_queue.push(result.text_keys, text_labels)
    state.steps += 1
    return state


def contrastive_step(fmap, proposals, gt, text_feats, text_labels, state: ContrastState,
                     tau_iou: float = 0.3, lr: float | None = None, clip: float | None = None):
    """One full step: positives by IoU, RoI mean-pool, loss, optional clipped
    gradient step on ``theta``/``alpha``, EMA, enqueue.

    Returns ``(result, state)``. ``result.d_regions`` is mapped back onto the
    feature map as ``result.d_fmap``.
    """
    pairs = select_positives(proposals, gt, tau_iou)
    if not pairs:
        log.info("no positive proposals at step %d; loss 0, queues unchanged", state.steps)
        state.theta_m = ema_update(state.theta_m, state.theta, state.m)
        state.steps += 1
        res = ContrastResult(0.0, 0.0, 0.0, 0, {k: np.zeros_like(v) for k, v in state.theta.items()})
        res.d_fmap = np.zeros_like(fmap)
        res.d_texts = np.zeros_like(np.asarray(text_feats, dtype=DTYPE))
        return res, state
    boxes = [proposals[i] for i, _ in pairs]
    labels = np.array([gt[j].class_id for _, j in pairs], dtype=np.int64)
    feats = roi_mean_pool(fmap, boxes)
    res = contrast_forward_backward(feats, labels, text_feats, text_labels, state)
    res.d_fmap = roi_mean_pool_backward(res.d_regions, np.shape(fmap), boxes)
    if lr:
        keys = sorted(state.theta)
        step = -lr * np.concatenate([flatten(res.grads, keys), [res.d_alpha]])
        norm = np.linalg.norm(step)
        if clip is not None and norm > clip:
            step *= clip / norm
        state.theta = unflatten(flatten(state.theta, keys) + step[:-1], state.theta, keys)
        state.alpha = float(state.alpha + step[-1])
    commit(state, res, text_labels)
    return res, state
