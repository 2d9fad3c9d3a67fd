"""Seeded verification suites shared by the CLI and the acceptance tests.

Each suite returns a JSON-ready dict with a boolean ``passed`` field.
Backward functions are looked up through their modules at call time, so a
test can patch one of them and watch the suite fail.
"""
from __future__ import annotations

import time

import numpy as np

from . import biwkv as bw
from . import contrast as ct
from . import crossmodal as cm
from . import curriculum as cu
from . import fusion as fu
from . import sampling as sp
from .numeric import check_gradients, make_rng, max_rel_err, spawn_rngs

ORACLE_TOL = 1e-10
GRAD_TOL = 1e-5


# ---------------------------------------------------------------------------
# oracle equivalence

def biwkv_instance(rng, max_t=64, max_c=8, span=3.0):
    T = int(rng.integers(1, max_t + 1))
    C = int(rng.integers(1, max_c + 1))
    k, v = rng.uniform(-span, span, (2, T, C))
    w, u = rng.uniform(-span, span, (2, C))
    return k, v, w, u


def oracle_biwkv(trials=1000, seed=0, max_t=64, max_c=8) -> dict:
    t0 = time.perf_counter()
    worst = 0.0
    for rng in spawn_rngs(seed, trials):
        k, v, w, u = biwkv_instance(rng, max_t, max_c)
        worst = max(worst, max_rel_err(bw.biwkv_scan(k, v, w, u), bw.biwkv_naive(k, v, w, u)))
    return dict(op="biwkv", trials=trials, max_rel_err=worst, tol=ORACLE_TOL,
                passed=worst <= ORACLE_TOL, seconds=time.perf_counter() - t0)


def oracle_identities(trials=100, seed=0) -> dict:
    """Closed-gate exchange, zero-head sampling and mu=0 Q-shift reduce to identities."""
    fusion_err, sample_exact, shift_exact = 0.0, True, True
    for rng in spawn_rngs(seed, trials):
        D = int(rng.integers(2, 7))
        N = int(rng.integers(1, 9))
        n_cls = int(rng.integers(1, 5))
        m, t = rng.normal(size=(N, D)), rng.normal(size=(n_cls, D))
        p = cm.init_exchange(D, rng)
        for g in ("gate_m", "gate_t"):
            p[f"{g}.b2"] = np.full(D, -1e4)
        m2, t2, _ = cm.semantic_fusion(m, t, p, rounds=2)
        fusion_err = max(fusion_err, float(np.max(np.abs(m2 - m))), float(np.max(np.abs(t2 - t))))

        C, H, W = int(rng.integers(1, 4)), int(rng.integers(2, 7)), int(rng.integers(2, 7))
        f = rng.normal(size=(C, H, W))
        K = int(rng.integers(1, 4))
        sp_p = sp.init_sampler(D, n_cls, C, K, rng)
        refs = rng.uniform(0, 1, (N, 2))
        out = sp.modulated_sample(m, t, f, refs, sp_p, K)
        plain = fu.linear(np.repeat(sp.bilinear_sample(f, refs), K, axis=0).reshape(N, K * C),
                          sp_p["out.W"], sp_p["out.b"])
        sample_exact &= bool(np.array_equal(out, plain))

        x = rng.normal(size=(4 * int(rng.integers(1, 3)), H, W))
        shift_exact &= bool(np.array_equal(fu.q_shift(x, 0.0), x))
    return dict(op="identities", trials=trials, fusion_max_abs=fusion_err,
                sampling_bit_exact=sample_exact, q_shift_bit_exact=shift_exact,
                passed=fusion_err <= 1e-12 and sample_exact and shift_exact)


def oracle_info_nce(trials=10_000, seed=0, mono_trials=1000) -> dict:
    rng = make_rng(seed)
    neg = 0
    for _ in range(trials):
        n, a = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        s = rng.uniform(-1, 1, (n, a)) * np.exp(rng.uniform(-1, 1))
        mask = rng.random((n, a)) < 0.4
        mask[np.arange(n), rng.integers(0, a, n)] = True
        if ct.info_nce_multi_pos(s, mask, 0.07) < 0:
            neg += 1
    all_pos = ct.info_nce_multi_pos(rng.uniform(-1, 1, (3, 5)), np.ones((3, 5), bool), 0.07)
    mono_fail = 0
    for _ in range(mono_trials):
        n, a = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        s = rng.uniform(-1, 1, (n, a))
        mask = rng.random((n, a)) < 0.4
        mask[np.arange(n), rng.integers(0, a, n)] = True
        base = ct.info_nce_multi_pos(s, mask, 0.07)
        s2 = np.hstack([s, rng.uniform(-1, 1, (n, 1))])
        m2 = np.hstack([mask, np.zeros((n, 1), bool)])
        if not ct.info_nce_multi_pos(s2, m2, 0.07) > base:
            mono_fail += 1
    ln2 = ct.info_nce_multi_pos(np.array([[0.3, 0.3]]), [[0]], 0.07)
    return dict(op="info_nce", trials=trials, negative=neg, all_positive=all_pos,
                monotonic_failures=mono_fail, ln2_err=abs(ln2 - np.log(2)),
                passed=neg == 0 and all_pos == 0.0 and mono_fail == 0 and abs(ln2 - np.log(2)) <= 1e-12)


def oracle_queue(trials=100, seed=0) -> dict:
    """Replay random push traces against a plain list model of the FIFO."""
    bad = 0
    for rng in spawn_rngs(seed, trials):
        K, D = int(rng.integers(1, 17)), int(rng.integers(1, 5))
        q = ct.FeatureQueue(K, D, rng)
        history = []
        for _ in range(int(rng.integers(1, 12))):
            B = int(rng.integers(1, K + 1))
            rows = ct.l2_normalize(rng.normal(size=(B, D)))
            q.push(rows, rng.integers(0, 5, B))
            history.extend(map(tuple, rows))
        want = sorted(history[-K:])
        stored = q.storage if len(history) >= K else q.storage[:len(history)]
        got = sorted(map(tuple, stored))
        if got != want or q.fill != min(K, len(history)):
            bad += 1
    return dict(op="queue", trials=trials, mismatches=bad, passed=bad == 0)


ORACLES = {"biwkv": oracle_biwkv, "identities": oracle_identities,
           "info_nce": oracle_info_nce, "queue": oracle_queue}


# ---------------------------------------------------------------------------
# gradient suite

# Finite-difference settings per op family. Smooth ops take a wide seven-point
# stencil (round-off ~ eps |f| / h stays tiny); ops with kinks take a narrow
# five-point stencil on instances drawn clear of the kinks. InfoNCE at
# tau = 0.07 is both very curved and saturated, and the L1 box loss has
# exactly-zero gradient entries, so both are differenced in extended precision.
SMOOTH = dict(h=1e-2, order=6)
KINKED = dict(h=1e-3, order=4)
EXTENDED = dict(h=1e-3, order=6, dtype=np.longdouble)


def _dot(out, G):
    return np.sum(out * G)


def _clear_of_relu_kink(cache, margin=0.01):
    return float(np.min(np.abs(cache["kc"]))) > margin


def grad_biwkv(rng):
    T, C = int(rng.integers(2, 9)), int(rng.integers(1, 5))
    k, v = rng.uniform(-2, 2, (2, T, C))
    w, u = rng.uniform(-2, 2, (2, C))
    G = rng.normal(size=(T, C))
    dk, dv, dw, du = bw.biwkv_backward(k, v, w, u, G)

    def loss(d):
        return _dot(bw.biwkv_scan(d["k"], d["v"], d["w"], d["u"]), G)
    return check_gradients("biwkv", loss, dict(k=k, v=v, w=w, u=u), dict(k=dk, v=dv, w=dw, u=du),
                           **SMOOTH)


def _mix_params(rng, C, kind):
    blk = fu.init_block(C, rng)
    p = fu.sub(blk, kind)
    for key in p:
        if key.startswith("mu_"):
            p[key] = rng.uniform(0.1, 0.9, C)
        elif key.startswith("b_"):
            p[key] = rng.normal(0, 0.1, p[key].shape)
    return p


def _grad_mix(rng, kind):
    fwd = fu.spatial_mix_forward if kind == "spatial" else fu.channel_mix_forward
    bwd = fu.spatial_mix_backward if kind == "spatial" else fu.channel_mix_backward
    while True:
        C, hw = 4, (int(rng.integers(2, 4)), int(rng.integers(2, 4)))
        p = _mix_params(rng, C, kind)
        x = rng.normal(size=(hw[0] * hw[1], C))
        out, cache = fwd(x, p, hw)
        if kind == "spatial" or _clear_of_relu_kink(cache):
            break
    G = rng.normal(size=out.shape)
    dx, g = bwd(G, cache)

    def loss(d):
        return _dot(fwd(d["x"], {k: d[k] for k in p}, hw)[0], G)
    opts = SMOOTH if kind == "spatial" else KINKED
    return check_gradients(f"{kind}_mix", loss, {"x": x, **p}, {"x": dx, **g}, **opts)


def grad_spatial_mix(rng):
    return _grad_mix(rng, "spatial")


def grad_channel_mix(rng):
    return _grad_mix(rng, "channel")


def grad_vrwkv_block(rng):
    while True:
        C, H, W = 2, int(rng.integers(2, 4)), int(rng.integers(2, 4))
        p = fu.init_block(2 * C, rng)
        for key in p:
            if ".mu_" in key:
                p[key] = rng.uniform(0.1, 0.9, p[key].shape)
            if key.startswith("ln"):
                p[key] = p[key] + rng.normal(0, 0.1, p[key].shape)
        rgb, ir = rng.normal(size=(2, C, H, W))
        out, cache = fu.vrwkv_block_forward(rgb, ir, p)
        if _clear_of_relu_kink(cache["ch"]):
            break
    G = rng.normal(size=out.shape)
    drgb, dir_, g = fu.vrwkv_block_backward(G, cache)

    def loss(d):
        return _dot(fu.vrwkv_block(d["rgb"], d["ir"], {k: d[k] for k in p}), G)
    return check_gradients("vrwkv_block", loss, {"rgb": rgb, "ir": ir, **p},
                           {"rgb": drgb, "ir": dir_, **g}, **KINKED)


def grad_gated_exchange(rng):
    D, N, n_cls = int(rng.integers(2, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
    p = cm.init_exchange(D, rng)
    for gate in ("gate_m", "gate_t"):
        p[f"{gate}.W2"] = rng.normal(0, 0.5, (D, D))
        p[f"{gate}.b2"] = rng.normal(0, 0.5, D)
    m, t = rng.normal(size=(N, D)), rng.normal(size=(n_cls, D))
    st = cm.gated_exchange(m, t, p)
    Gm, Gt = rng.normal(size=st.m_out.shape), rng.normal(size=st.t_out.shape)
    dm, dt, g = cm.gated_exchange_backward(Gm, Gt, st)

    def loss(d):
        s = cm.gated_exchange(d["m"], d["t"], {k: d[k] for k in p})
        return _dot(s.m_out, Gm) + _dot(s.t_out, Gt)
    return check_gradients("gated_exchange", loss, {"m": m, "t": t, **p}, {"m": dm, "t": dt, **g},
                           **SMOOTH)


def _sampler_instance(rng):
    D, N, n_cls, C, K = 4, int(rng.integers(1, 4)), int(rng.integers(1, 4)), 2, int(rng.integers(1, 3))
    H, W = int(rng.integers(3, 6)), int(rng.integers(3, 6))
    p = sp.init_sampler(D, n_cls, C, K, rng, zero_heads=False)
    p["off.b"] = rng.normal(0, 0.1, p["off.b"].shape)
    q, t = rng.normal(size=(N, D)), rng.normal(size=(n_cls, D))
    f = rng.normal(size=(C, H, W))
    refs = rng.uniform(0.05, 0.95, (N, 2))
    return q, t, f, refs, p, K


def grad_modulated_sample(rng):
    # bilinear sampling has kinks on integer pixel coordinates; redraw until
    # every sampling point sits clear of them so differences stay smooth
    while True:
        q, t, f, refs, p, K = _sampler_instance(rng)
        out, cache = sp.modulated_sample_forward(q, t, f, refs, p, K)
        H, W = f.shape[1:]
        px = cache["points"] * np.array([W - 1, H - 1])
        if np.min(np.abs(px - np.round(px))) > 0.05:
            break
    G = rng.normal(size=out.shape)
    din, g = sp.modulated_sample_backward(G, cache)

    def loss(d):
        return _dot(sp.modulated_sample(d["q"], d["t"], d["f_ref"], d["ref_points"],
                                        {k: d[k] for k in p}, K), G)
    return check_gradients("modulated_sample", loss,
                           {"q": q, "t": t, "f_ref": f, "ref_points": refs, **p}, {**din, **g}, **KINKED)


def grad_info_nce(rng):
    d_in, d_proj, n_cls = 4, 3, int(rng.integers(2, 4))
    state = ct.ContrastState.create(d_in, d_in, d_proj, int(rng.integers(2, 6)), rng,
                                    alpha=float(rng.uniform(-0.5, 0.5)), tau=0.07,
                                    lambda_i2t=float(rng.uniform(0.5, 1.5)), lambda_t2i=float(rng.uniform(0.5, 1.5)))
    state.theta_m = {k: v + rng.normal(0, 0.05, v.shape) for k, v in state.theta.items()}
    state.region_queue.push(ct.l2_normalize(rng.normal(size=(2, d_proj))), rng.integers(0, n_cls, 2))
    state.text_queue.push(ct.l2_normalize(rng.normal(size=(2, d_proj))), rng.integers(0, n_cls, 2))
    n_r = int(rng.integers(1, 5))
    feats = rng.normal(size=(n_r, d_in))
    labels = rng.integers(0, n_cls, n_r)
    texts = rng.normal(size=(n_cls, d_in))
    tl = np.arange(n_cls)
    res = ct.contrast_forward_backward(feats, labels, texts, tl, state)
    base = dict(state.theta)

    def loss(d):
        state.theta = {k: d[k] for k in base}
        try:
            return ct.contrast_forward_backward(feats, labels, texts, tl, state).loss
        finally:
            state.theta = base
    return check_gradients("info_nce", loss, base, res.grads, **EXTENDED)


def grad_heads(rng):
    D = 4
    while True:
        scene = cu.gen_stage1_data(int(rng.integers(0, 2**31)), 1, grid=4, channels=2, noise=0.1)[0]
        F = rng.normal(size=(D, 4, 4))
        p = {"head.W": rng.normal(0, 0.3, (D, 5)), "head.b": rng.normal(0, 0.3, 5),
             "aux.W": rng.normal(0, 0.3, (D, 1)), "aux.b": rng.normal(0, 0.3, 1)}
        obj, reg = cu.cell_targets(scene)
        box = fu.linear(fu.to_tokens(F), p["head.W"], p["head.b"])[:, 1:]
        # L1 regression has a kink where a prediction meets its target
        if np.min(np.abs(box - reg)[obj > 0], initial=np.inf) > 0.02:
            break

    def full(d):
        l_det, _, dF, gh = cu.det_loss(d["F"], scene, d)
        tok = fu.to_tokens(d["F"])
        l_aux, dz = cu.bce_with_logits(fu.linear(tok, d["aux.W"], d["aux.b"])[:, 0], obj)
        dtok, dW, db = fu.linear_backward(dz[:, None], tok, d["aux.W"])
        grads = {**gh, "aux.W": dW, "aux.b": db, "F": dF + fu.to_image(dtok, d["F"].shape[1:])}
        return l_det + l_aux, grads

    inputs = {"F": F, **p}
    _, grads = full(inputs)
    return check_gradients("toy_heads", lambda d: full(d)[0], inputs, grads, **EXTENDED)


GRADIENT_CHECKS = {
    "biwkv": grad_biwkv, "spatial_mix": grad_spatial_mix, "channel_mix": grad_channel_mix,
    "vrwkv_block": grad_vrwkv_block, "gated_exchange": grad_gated_exchange,
    "modulated_sample": grad_modulated_sample, "info_nce": grad_info_nce, "heads": grad_heads,
}


def gradient_suite(modules=None, instances=20, seed=0) -> dict:
    t0 = time.perf_counter()
    modules = list(GRADIENT_CHECKS) if modules in (None, "all", ["all"]) else list(modules)
    unknown = [m for m in modules if m not in GRADIENT_CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient check(s): {unknown}")
    results = {}
    for i, name in enumerate(modules):
        worst = {}
        for rng in spawn_rngs(seed * 1000 + i, instances):
            for r in GRADIENT_CHECKS[name](rng):
                worst[r.param_name] = max(worst.get(r.param_name, 0.0), r.max_rel_err)
        top = max(worst.values(), default=0.0)
        results[name] = dict(instances=instances, max_rel_err=top, passed=top <= GRAD_TOL,
                             worst_param=max(worst, key=worst.get) if worst else None)
    return dict(suite="gradcheck", tol=GRAD_TOL, modules=results,
                passed=all(r["passed"] for r in results.values()), seconds=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# scaling benchmark

def bench_biwkv(sizes=(1024, 2048, 4096, 8192), channels=2, reps=5, seed=0, naive=True) -> list:
    """Median wall time per size; repetitions are interleaved across sizes so
    slow drift in machine speed hits every size alike."""
    rng = make_rng(seed)
    inputs = []
    for T in sizes:
        k, v = rng.uniform(-1, 1, (2, T, channels))
        w, u = rng.uniform(-1, 1, (2, channels))
        inputs.append((k, v, w, u))
    scan = _interleaved_ms(bw.biwkv_scan, inputs, reps)
    slow = _interleaved_ms(bw.biwkv_naive, inputs, reps) if naive else [float("nan")] * len(sizes)
    return [{"T": int(T), "scan_ms": a, "naive_ms": b} for T, a, b in zip(sizes, scan, slow)]


def _interleaved_ms(fn, inputs, reps):
    fn(*inputs[0])  # warm-up
    times = [[] for _ in inputs]
    for _ in range(reps):
        for i, args in enumerate(inputs):
            t0 = time.perf_counter()
            fn(*args)
            times[i].append(1e3 * (time.perf_counter() - t0))
    return [float(np.median(t)) for t in times]


def scaling_ratios(rows, small=4096, large=8192) -> dict:
    by_t = {r["T"]: r for r in rows}
    if small not in by_t or large not in by_t:
        return {}
    scan = by_t[large]["scan_ms"] / by_t[small]["scan_ms"]
    naive = by_t[large]["naive_ms"] / by_t[small]["naive_ms"]
    return dict(scan_ratio=scan, naive_ratio=naive,
                passed=bool(1.7 <= scan <= 2.6 and naive >= 3.4))
