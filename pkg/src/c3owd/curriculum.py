"""Desk-scale two-stage curriculum on synthetic RGB/IR scenes.

Stage 1 trains the fusion backbone and a dense toy detection head. Stage 2
adds patch embedding, the image/text exchange, text-modulated sampling,
auxiliary objectness heads and momentum contrast, while an EMA copy of all
parameters is tracked. At every logged Stage-2 step the Stage-1 loss of the
momentum branch is compared with that of the online branch.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import contrast as ct
from .contrast import Box, ContrastState, ema_update
from .crossmodal import (TextBank, init_exchange, patch_embed_backward, patch_embed_forward,
                         semantic_fusion, semantic_fusion_backward)
from .ema import corrected_lag_factor, segment_gradient_bound, stated_lag_factor
from .fusion import (clamp_mix, init_block, linear, linear_backward, multi_scale_merge_backward,
                     multi_scale_merge_forward, prefixed, sub, to_image, to_tokens,
                     vrwkv_block_backward, vrwkv_block_forward)
from .numeric import DTYPE, NumericError, copy_params, flatten, make_rng, sigmoid, unflatten
from .sampling import init_sampler, modulated_sample_backward, modulated_sample_forward

log = logging.getLogger(__name__)

N_LEVELS = 3
VISIBILITY = ("rgb", "ir", "both")


@dataclass
class CurriculumConfig:
    lambda_c: float = 0.01
    lambda_aux: float = 0.1
    lambda_1: float = 1.0
    tau: float = 0.07
    tau_iou: float = 0.3
    queue_size: int = 256
    momentum: float = 0.999
    k_heads: int = 2
    l_dec: int = 2
    stage1_lr: float = 0.1
    stage2_lr: float = 0.05
    clip: float = 1.0
    stage1_steps: int = 200
    stage2_steps: int = 30
    n_train: int = 8
    n_eval: int = 8
    n_probe: int = 4
    grid: int = 8
    channels: int = 4
    dim: int = 8
    d_proj: int = 8
    n_classes: int = 4
    noise: float = 0.1
    patch_size: int = 2
    k_points: int = 2
    log_every: int = 1
    segment_points: int = 5

    def __post_init__(self):
        for name in ("lambda_c", "lambda_aux", "lambda_1", "stage1_lr", "stage2_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.clip <= 0:
            raise ValueError("clip must be > 0 so per-step motion stays bounded")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0 < self.momentum <= 1:
            raise ValueError("momentum must lie in (0, 1]")
        if self.k_heads < 0 or self.l_dec < 1:
            raise ValueError("k_heads must be >= 0 and l_dec >= 1")

    @classmethod
    def from_json(cls, path) -> "CurriculumConfig":
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# data

@dataclass
class SyntheticScene:
    rgb: np.ndarray
    ir: np.ndarray
    gt: list
    visibility: list
    levels: list = field(default=None, repr=False)  # [(rgb_l, ir_l)] finest first

    def __post_init__(self):
        G = self.rgb.shape[1]
        for b in self.gt:
            if b.x1 < 0 or b.y1 < 0 or b.x2 > G or b.y2 > G:
                raise ValueError(f"gt box {b} leaves the image")
        if self.levels is None:
            self.levels = [(self.rgb, self.ir)]
            for _ in range(N_LEVELS - 1):
                r, i = self.levels[-1]
                self.levels.append((_pool2(r), _pool2(i)))


def _pool2(x):
    C, H, W = x.shape
    return x.reshape(C, H // 2, 2, W // 2, 2).mean(axis=(2, 4))


def class_signatures(n_classes, channels):
    """Fixed per-class appearance in each modality (independent of the data seed)."""
    rng = make_rng(7919)
    sig_rgb = rng.normal(size=(n_classes, channels))
    sig_ir = rng.normal(size=(n_classes, channels))
    sig_rgb /= np.linalg.norm(sig_rgb, axis=1, keepdims=True) / 1.5
    sig_ir /= np.linalg.norm(sig_ir, axis=1, keepdims=True) / 1.5
    return sig_rgb, sig_ir


def gen_stage1_data(seed, n_scenes, grid=8, channels=4, n_classes=4, noise=0.1,
                    max_objects=2, visibility=None):
    """Axis-aligned blobs; ``visibility`` forces one of rgb/ir/both for every object."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    if grid < 4 or grid % 4:
        raise ValueError(f"grid {grid} too small or not divisible by 4")
    if visibility is not None and visibility not in VISIBILITY:
        raise ValueError(f"visibility must be one of {VISIBILITY}")
    rng = make_rng(seed)
    sig_rgb, sig_ir = class_signatures(n_classes, channels)
    lo, hi = 2, max(2, grid // 2)
    scenes = []
    for _ in range(n_scenes):
        rgb = np.zeros((channels, grid, grid))
        ir = np.zeros((channels, grid, grid))
        occupied = np.zeros((grid, grid), dtype=bool)
        gt, vis = [], []
        for _ in range(int(rng.integers(1, max_objects + 1))):
            for _attempt in range(20):
                w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
                x0 = int(rng.integers(0, grid - w + 1))
                y0 = int(rng.integers(0, grid - h + 1))
                if not occupied[y0:y0 + h, x0:x0 + w].any():
                    break
            else:
                continue
            occupied[y0:y0 + h, x0:x0 + w] = True
            c = int(rng.integers(n_classes))
            v = visibility or VISIBILITY[int(rng.choice(3, p=[0.25, 0.25, 0.5]))]
            if v in ("rgb", "both"):
                rgb[:, y0:y0 + h, x0:x0 + w] += sig_rgb[c][:, None, None]
            if v in ("ir", "both"):
                ir[:, y0:y0 + h, x0:x0 + w] += sig_ir[c][:, None, None]
            gt.append(Box(x0, y0, x0 + w, y0 + h, c))
            vis.append(v)
        rgb += noise * rng.normal(size=rgb.shape)
        ir += noise * rng.normal(size=ir.shape)
        scenes.append(SyntheticScene(rgb, ir, gt, vis))
    return scenes


def cell_targets(scene):
    """Objectness [G*G] and (l, t, r, b) / G distance targets [G*G, 4]."""
    G = scene.rgb.shape[1]
    obj = np.zeros(G * G)
    reg = np.zeros((G * G, 4))
    for y in range(G):
        for x in range(G):
            cx, cy = x + 0.5, y + 0.5
            for b in scene.gt:
                if b.x1 <= cx <= b.x2 and b.y1 <= cy <= b.y2:
                    obj[y * G + x] = 1.0
                    reg[y * G + x] = np.array([cx - b.x1, cy - b.y1, b.x2 - cx, b.y2 - cy]) / G
                    break
    return obj, reg


def patch_targets(obj, grid, p):
    o = obj.reshape(grid // p, p, grid // p, p).max(axis=(1, 3))
    return o.reshape(-1)


# ---------------------------------------------------------------------------
# model

def init_stage1(cfg: CurriculumConfig, rng):
    p = {}
    for l in range(N_LEVELS):
        p.update(prefixed(init_block(2 * cfg.channels, rng), f"block{l}"))
        p[f"lat{l}.W"] = rng.normal(0, 1.0 / np.sqrt(2 * cfg.channels), (2 * cfg.channels, cfg.dim))
        p[f"lat{l}.b"] = np.zeros(cfg.dim)
    p["head.W"] = rng.normal(0, 0.1, (cfg.dim, 5))
    p["head.b"] = np.zeros(5)
    return p


def init_stage2(cfg: CurriculumConfig, rng):
    D, P = cfg.dim, cfg.patch_size
    p = {"patch.W": rng.normal(0, 1.0 / np.sqrt(D * P * P), (D * P * P, D)), "patch.b": np.zeros(D)}
    p.update(prefixed(init_exchange(D, rng), "xchg"))
    p.update(prefixed(init_sampler(D, cfg.n_classes, D, cfg.k_points, rng), "samp"))
    for i in range(cfg.k_heads):
        for side in ("enc", "dec"):
            p[f"{side}{i}.W"] = rng.normal(0, 0.1, (D, 1))
            p[f"{side}{i}.b"] = np.zeros(1)
    return p


def backbone_forward(scene, p):
    fused, caches = [], []
    for l, (r, i) in enumerate(scene.levels):
        f, c = vrwkv_block_forward(r, i, sub(p, f"block{l}"))
        fused.append(f)
        caches.append(c)
    F, mc = multi_scale_merge_forward(fused, [sub(p, f"lat{l}") for l in range(N_LEVELS)])
    return F, (caches, mc)


def backbone_backward(dF, cache):
    caches, mc = cache
    dfused, lat_grads = multi_scale_merge_backward(dF, mc)
    g = {}
    for l, (df, c) in enumerate(zip(dfused, caches)):
        _, _, gb = vrwkv_block_backward(df, c)
        g.update(prefixed(gb, f"block{l}"))
        g.update(prefixed(lat_grads[l], f"lat{l}"))
    return g


def bce_with_logits(z, y):
    """Mean BCE and its gradient w.r.t. the logits."""
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return np.mean(loss), (sigmoid(z) - y) / z.size


def det_loss(F, scene, p):
    """BCE objectness over all cells plus mean L1 box regression on positive cells."""
    tokens = to_tokens(F)
    out = linear(tokens, p["head.W"], p["head.b"])
    obj, reg = cell_targets(scene)
    l_obj, dz = bce_with_logits(out[:, 0], obj)
    pos = obj > 0
    n_pos = int(pos.sum())
    dout = np.zeros_like(out)
    dout[:, 0] = dz
    l_reg = 0.0
    if n_pos:
        diff = out[pos, 1:] - reg[pos]
        l_reg = np.abs(diff).sum() / n_pos
        dout[pos, 1:] = np.sign(diff) / n_pos
    dtok, dW, db = linear_backward(dout, tokens, p["head.W"])
    return l_obj + l_reg, dict(obj=l_obj, reg=l_reg), to_image(dtok, F.shape[1:]), {"head.W": dW, "head.b": db}


def stage1_loss_grad(scenes, p):
    """Mean L_stage1 over ``scenes`` and its gradient (stage-1 keys only)."""
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in p.items() if k.startswith(("block", "lat", "head"))}
    for s in scenes:
        F, cache = backbone_forward(s, p)
        loss, _, dF, gh = det_loss(F, s, p)
        gb = backbone_backward(dF, cache)
        total += loss
        for k, v in {**gb, **gh}.items():
            grads[k] += v
    n = len(scenes)
    if not math.isfinite(total):
        raise NumericError("non-finite stage-1 loss")
    return total / n, {k: v / n for k, v in grads.items()}


def stage1_loss(scenes, p) -> float:
    total = 0.0
    for s in scenes:
        F, _ = backbone_forward(s, p)
        total += det_loss(F, s, p)[0]
    return total / len(scenes)


def clipped_step(params, grads, lr, clip, keys=None):
    """Gradient step whose global norm is clipped to ``clip``; returns (params, norm)."""
    keys = keys or sorted(grads)
    step = -lr * flatten(grads, keys)
    norm = float(np.linalg.norm(step))
    if norm > clip:
        step *= clip / norm
        norm = float(np.linalg.norm(step))
    new = dict(params)
    new.update(unflatten(flatten(params, keys) + step, params, keys))
    return clamp_mix(new), norm


def stage1_step(scenes, p, cfg: CurriculumConfig):
    loss, g = stage1_loss_grad(scenes, p)
    p, norm = clipped_step(p, g, cfg.stage1_lr, cfg.clip)
    if norm > cfg.clip * (1 + 1e-12):
        raise AssertionError(f"step norm {norm} exceeds clip {cfg.clip}")
    return loss, p, norm


# ---------------------------------------------------------------------------
# evaluation

def predict_boxes(F, p, grid, thresh=0.5):
    out = linear(to_tokens(F), p["head.W"], p["head.b"])
    score = sigmoid(out[:, 0])
    boxes = []
    for idx in np.nonzero(score > thresh)[0]:
        y, x = divmod(int(idx), grid)
        cx, cy = x + 0.5, y + 0.5
        l, t, r, b = np.maximum(out[idx, 1:] * grid, 0.05)
        boxes.append((float(score[idx]), Box(cx - l, cy - t, cx + r, cy + b)))
    return boxes


def nms(scored, thresh=0.5):
    keep = []
    for s, b in sorted(scored, key=lambda sb: -sb[0]):
        if all(ct.iou(b, k) < thresh for _, k in keep):
            keep.append((s, b))
    return keep


def evaluate_stage1(p, scenes, iou_thresh=0.5) -> dict:
    """Per-scene F1 of greedy IoU matching, averaged; plus mean objectness BCE."""
    if not scenes:
        raise ValueError("need at least one eval scene")
    f1s, bces = [], []
    for s in scenes:
        G = s.rgb.shape[1]
        F, _ = backbone_forward(s, p)
        preds = nms(predict_boxes(F, p, G))
        obj, _ = cell_targets(s)
        z = linear(to_tokens(F), p["head.W"], p["head.b"])[:, 0]
        bces.append(bce_with_logits(z, obj)[0])
        if not s.gt and not preds:
            f1s.append(1.0)
            continue
        used = set()
        tp = 0
        for _, b in preds:
            best, bj = 0.0, -1
            for j, g in enumerate(s.gt):
                if j in used:
                    continue
                v = ct.iou(b, g)
                if v > best:
                    best, bj = v, j
            if bj >= 0 and best >= iou_thresh:
                used.add(bj)
                tp += 1
        fp, fn = len(preds) - tp, len(s.gt) - tp
        f1s.append(2 * tp / (2 * tp + fp + fn))
    return dict(f1=float(np.mean(f1s)), bce=float(np.mean(bces)))


# ---------------------------------------------------------------------------
# stage 2

def _proposals(scene, rng, n_random=2):
    G = scene.rgb.shape[1]
    props = []
    for b in scene.gt:
        for _ in range(2):
            j = rng.uniform(-0.5, 0.5, 4)
            x1, y1 = max(0.0, b.x1 + j[0]), max(0.0, b.y1 + j[1])
            x2, y2 = min(G, b.x2 + j[2]), min(G, b.y2 + j[3])
            props.append(Box(x1, y1, max(x2, x1 + 0.5), max(y2, y1 + 0.5)))
    for _ in range(n_random):
        x1, y1 = rng.uniform(0, G - 2, 2)
        w, h = rng.uniform(1, 3, 2)
        props.append(Box(x1, y1, min(G, x1 + w), min(G, y1 + h)))
    return props


def patch_centers(grid, p):
    n = grid // p
    c = (np.arange(n) * p + (p - 1) / 2) / (grid - 1)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)


@dataclass
class Stage2Out:
    total: float
    breakdown: dict
    grads: dict = field(repr=False)
    contrast: object = field(default=None, repr=False)
    text_labels: np.ndarray = field(default=None, repr=False)


def stage2_loss_grad(scene, p, text: TextBank, cstate: ContrastState, cfg: CurriculumConfig, rng):
    """L_stage2 = L_det + lambda_c L_contrast + lambda_aux (sum enc + lambda_1 sum dec) and its gradient."""
    G, P, D = scene.rgb.shape[1], cfg.patch_size, cfg.dim
    g = {k: np.zeros_like(v) for k, v in p.items()}
    F, bcache = backbone_forward(scene, p)
    l_det, _, dF, gh = det_loss(F, scene, p)
    for k, v in gh.items():
        g[k] += v
    obj, _ = cell_targets(scene)
    ftok = to_tokens(F)
    dftok = np.zeros_like(ftok)

    enc_losses = []
    for i in range(cfg.k_heads):
        z = linear(ftok, p[f"enc{i}.W"], p[f"enc{i}.b"])[:, 0]
        li, dz = bce_with_logits(z, obj)
        enc_losses.append(li)
        dz = cfg.lambda_aux * dz[:, None]
        dx, g[f"enc{i}.W"], g[f"enc{i}.b"] = linear_backward(dz, ftok, p[f"enc{i}.W"])
        dftok += dx

    tokens, pcache = patch_embed_forward(F, P, p["patch.W"], p["patch.b"])
    m_L, t_L, states = semantic_fusion(tokens.m, text.t_clip, sub(p, "xchg"), rounds=cfg.l_dec)
    refs = patch_centers(G, P)
    ptarget = patch_targets(obj, G, P)
    dm_rounds, dt_rounds = [], []
    dec_losses = []
    dF_samp = np.zeros_like(F)
    samp_p = sub(p, "samp")
    samp_g = {k: np.zeros_like(v) for k, v in samp_p.items()}
    for l, st in enumerate(states):
        y, scache = modulated_sample_forward(st.m_out, st.t_out, F, refs, samp_p, cfg.k_points)
        x_l = st.m_out + y
        dx_l = np.zeros_like(x_l)
        for i in range(cfg.k_heads):
            z = linear(x_l, p[f"dec{i}.W"], p[f"dec{i}.b"])[:, 0]
            li, dz = bce_with_logits(z, ptarget)
            dec_losses.append(li)
            dz = cfg.lambda_aux * cfg.lambda_1 * dz[:, None]
            dx, dW, db = linear_backward(dz, x_l, p[f"dec{i}.W"])
            g[f"dec{i}.W"] += dW
            g[f"dec{i}.b"] += db
            dx_l += dx
        din, gs = modulated_sample_backward(dx_l, scache)
        for k, v in gs.items():
            samp_g[k] += v
        dF_samp += din["f_ref"]
        dm_rounds.append(dx_l + din["q"])
        dt_rounds.append(din["t"])

    # momentum contrast on RoI-pooled enhanced features and the final text tokens
    props = _proposals(scene, rng)
    pairs = ct.select_positives(props, scene.gt, cfg.tau_iou)
    text_labels = np.arange(text.t_clip.shape[0])
    cres = None
    l_con = 0.0
    dF_con = np.zeros_like(F)
    if pairs:
        boxes = [props[i] for i, _ in pairs]
        labels = np.array([scene.gt[j].class_id for _, j in pairs])
        feats = ct.roi_mean_pool(F, boxes)
        cres = ct.contrast_forward_backward(feats, labels, t_L, text_labels, cstate)
        l_con = cres.loss
        dF_con = ct.roi_mean_pool_backward(cfg.lambda_c * cres.d_regions, F.shape, boxes)
        dt_rounds[-1] = dt_rounds[-1] + cfg.lambda_c * cres.d_texts
        for k, v in cres.grads.items():
            g[f"proj.{k}"] = cfg.lambda_c * v
    else:
        log.info("no positive proposals; contrastive term is 0")
        for k, v in cstate.theta.items():
            g[f"proj.{k}"] = np.zeros_like(v)

    dm0, _, gx = semantic_fusion_backward(np.zeros_like(m_L), np.zeros_like(t_L), states,
                                          dm_rounds, dt_rounds)
    dF_patch, g["patch.W"], g["patch.b"] = patch_embed_backward(dm0, pcache)
    for k, v in gx.items():
        g[f"xchg.{k}"] = v
    for k, v in samp_g.items():
        g[f"samp.{k}"] = v
    dF_total = dF + to_image(dftok, F.shape[1:]) + dF_samp + dF_con + dF_patch
    for k, v in backbone_backward(dF_total, bcache).items():
        g[k] += v

    breakdown = dict(
        det=l_det,
        contrast=cfg.lambda_c * l_con,
        aux_enc=cfg.lambda_aux * float(np.sum(enc_losses)),
        aux_dec=cfg.lambda_aux * cfg.lambda_1 * float(np.sum(dec_losses)),
        raw_contrast=l_con,
        raw_aux=float(np.sum(enc_losses)) + cfg.lambda_1 * float(np.sum(dec_losses)),
    )
    total = breakdown["det"] + breakdown["contrast"] + breakdown["aux_enc"] + breakdown["aux_dec"]
    if not math.isfinite(total):
        raise NumericError(f"non-finite stage-2 loss: {breakdown}")
    breakdown["total"] = total
    return Stage2Out(total, breakdown, g, cres, text_labels)


def stage2_loss(scene, p, text, cstate, cfg, rng) -> float:
    return stage2_loss_grad(scene, p, text, cstate, cfg, rng).total


def _with_proj(p, cstate):
    return {**p, **prefixed(cstate.theta, "proj")}


# ---------------------------------------------------------------------------
# full run

@dataclass
class CurriculumReport:
    config: dict
    seed: int
    stage1: dict
    stage2: list
    passed: bool
    corrected_passed: bool
    elapsed_s: float

    def to_dict(self) -> dict:
        return dict(config=self.config, seed=self.seed, stage1=self.stage1, stage2=self.stage2,
                    **{"pass": self.passed}, corrected_pass=self.corrected_passed)


def run_curriculum(cfg: CurriculumConfig, seed: int, stage1_params=None) -> CurriculumReport:
    t0 = time.perf_counter()
    rng = make_rng(seed)
    train = gen_stage1_data(seed, cfg.n_train, cfg.grid, cfg.channels, cfg.n_classes, cfg.noise)
    evals = gen_stage1_data(seed + 10_000, cfg.n_eval, cfg.grid, cfg.channels, cfg.n_classes, cfg.noise)
    probe = train[:cfg.n_probe]

    # stage 1
    p = copy_params(stage1_params) if stage1_params is not None else init_stage1(cfg, rng)
    s1_losses, s1_norms = [], []
    for _ in range(cfg.stage1_steps):
        loss, p, norm = stage1_step(train, p, cfg)
        s1_losses.append(loss)
        s1_norms.append(norm)
    final = stage1_loss(train, p)
    stage1 = dict(steps=cfg.stage1_steps, initial_loss=s1_losses[0] if s1_losses else final,
                  final_loss=final, f1=evaluate_stage1(p, evals)["f1"],
                  max_step_norm=max(s1_norms, default=0.0), losses=s1_losses)

    # stage 2
    p.update(init_stage2(cfg, rng))
    text = TextBank.synthetic(cfg.n_classes, cfg.dim, rng)
    cstate = ContrastState.create(cfg.dim, cfg.dim, cfg.d_proj, cfg.queue_size, rng,
                                  m=cfg.momentum, tau=cfg.tau)
    p_m = copy_params(p)
    m = cfg.momentum
    s1_keys = sorted(k for k in p if k.startswith(("block", "lat", "head")))
    max_delta = 0.0
    rows = []
    passed = corrected = True
    for step in range(1, cfg.stage2_steps + 1):
        scene = train[(step - 1) % len(train)]
        out = stage2_loss_grad(scene, p, text, cstate, cfg, rng)
        full = _with_proj(p, cstate)
        new, delta = clipped_step(full, out.grads, cfg.stage2_lr, cfg.clip)
        cstate.theta = sub(new, "proj")
        p = {k: v for k, v in new.items() if not k.startswith("proj.")}
        p_m = ema_update(p_m, p, m)
        if out.contrast is not None:
            ct.commit(cstate, out.contrast, out.text_labels)
        else:
            cstate.theta_m = ema_update(cstate.theta_m, cstate.theta, m)
            cstate.steps += 1
        max_delta = max(max_delta, delta)
        if step % cfg.log_every and step != cfg.stage2_steps:
            continue
        lag = float(np.linalg.norm(np.concatenate([
            flatten(p) - flatten(p_m), flatten(cstate.theta) - flatten(cstate.theta_m)])))
        a = flatten(p, s1_keys)
        b = flatten(p_m, s1_keys)

        def grad_at(vec):
            pp = dict(p)
            pp.update(unflatten(vec, p, s1_keys))
            return flatten(stage1_loss_grad(probe, pp)[1], s1_keys)

        rho_k = segment_gradient_bound(grad_at, a, b, cfg.segment_points)
        gap = abs(stage1_loss(probe, p_m) - stage1_loss(probe, p))
        bound = rho_k * stated_lag_factor(m) * max_delta
        cbound = rho_k * float(corrected_lag_factor(m, step)) * max_delta
        ok = gap <= bound * (1 + 1e-12) + 1e-12
        cok = gap <= cbound * (1 + 1e-12) + 1e-12
        passed &= ok
        corrected &= cok
        if not ok:
            log.warning("step %d: loss gap %.3e exceeds bound %.3e", step, gap, bound)
        ev_m = evaluate_stage1(p_m, evals)
        rows.append(dict(step=step, delta_t=max_delta, step_norm=delta, lag=lag, loss_gap=gap,
                         bound=bound, rho_k=rho_k, corrected_bound=cbound, within_bound=bool(ok),
                         within_corrected_bound=bool(cok),
                         online_f1=evaluate_stage1(p, evals)["f1"],
                         momentum_f1=ev_m["f1"], momentum_bce=ev_m["bce"],
                         loss=out.breakdown))
    return CurriculumReport(cfg.to_dict(), seed, stage1, rows, bool(passed), bool(corrected),
                            time.perf_counter() - t0)
