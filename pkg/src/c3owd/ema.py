"""Numerical checks of the EMA preservation bounds.

Every report carries two bounds. ``bound`` uses the lag factor
(1 - m) / m exactly as the claimed inequality states it. ``corrected_bound``
uses the factor that the update rule actually implies: from
theta_t - theta_m,t = m (theta_t - theta_m,t-1) the lag obeys
x_t <= m (delta_t + x_{t-1}), hence x_t <= Delta_t * m (1 - m^t) / (1 - m),
which tends to m / (1 - m) * Delta_t and is attained by constant 1-D steps.
For m < 1/2 the claimed factor is the larger one; for the usual m close
to 1 it is smaller than the true lag, so the stated checks fail.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numeric import DTYPE, flatten, make_rng, spawn_rngs, unflatten

MIN_MOMENTUM = 0.05
ONE_LIPSCHITZ = ("identity", "relu", "tanh")


@dataclass
class EmaTrace:
    thetas: np.ndarray      # [T+1, P]
    theta_ms: np.ndarray    # [T+1, P]
    deltas: np.ndarray      # [T] motions of steps 1..T
    m: float

    @property
    def lags(self) -> np.ndarray:
        return np.linalg.norm(self.thetas - self.theta_ms, axis=1)

    @property
    def running_max(self) -> np.ndarray:
        """Delta_t = max_{j<=t} delta_j for t = 0..T (Delta_0 = 0)."""
        return np.concatenate([[0.0], np.maximum.accumulate(self.deltas)]) if self.deltas.size else np.zeros(1)


def ema_track(trajectory, m: float) -> EmaTrace:
    thetas = np.asarray(trajectory, dtype=DTYPE)
    if thetas.size == 0 or thetas.shape[0] == 0:
        raise ValueError("trajectory must contain at least theta_0")
    if not MIN_MOMENTUM <= m <= 1.0:
        raise ValueError(f"momentum must lie in [{MIN_MOMENTUM}, 1]")
    thetas = thetas.reshape(thetas.shape[0], -1)
    ms = np.empty_like(thetas)
    ms[0] = thetas[0]
    for t in range(1, len(thetas)):
        ms[t] = m * ms[t - 1] + (1.0 - m) * thetas[t]
    deltas = np.linalg.norm(np.diff(thetas, axis=0), axis=1)
    return EmaTrace(thetas, ms, deltas, m)


def stated_lag_factor(m: float) -> float:
    return (1.0 - m) / m


def corrected_lag_factor(m: float, t) -> np.ndarray:
    """sum_{k=1..t} m^k: the tight lag factor after t steps."""
    t = np.asarray(t, dtype=DTYPE)
    if m == 1.0:
        return t
    return m * (1.0 - m ** t) / (1.0 - m)


@dataclass
class BoundReport:
    name: str
    measured: np.ndarray = field(repr=False)
    bound: np.ndarray = field(repr=False)
    corrected_bound: np.ndarray = field(repr=False)

    @staticmethod
    def _ratio(meas, bnd) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(meas == 0, 0.0, meas / bnd)
        return float(np.max(r)) if r.size else 0.0

    @staticmethod
    def _ok(meas, bnd) -> np.ndarray:
        with np.errstate(over="ignore"):
            return meas <= bnd * (1 + 1e-12) + 1e-12

    @property
    def max_measured(self) -> float:
        return float(np.max(self.measured)) if self.measured.size else 0.0

    @property
    def ratio(self) -> float:
        return self._ratio(self.measured, self.bound)

    @property
    def violations(self) -> int:
        return int(np.sum(~self._ok(self.measured, self.bound)))

    @property
    def passed(self) -> bool:
        return self.violations == 0

    @property
    def corrected_ratio(self) -> float:
        return self._ratio(self.measured, self.corrected_bound)

    @property
    def corrected_violations(self) -> int:
        return int(np.sum(~self._ok(self.measured, self.corrected_bound)))

    @property
    def corrected_passed(self) -> bool:
        return self.corrected_violations == 0

    def summary(self) -> dict:
        return dict(name=self.name, max_measured=self.max_measured,
                    bound=float(np.max(self.bound)) if self.bound.size else 0.0,
                    ratio=self.ratio, violations=self.violations, passed=self.passed,
                    corrected_ratio=self.corrected_ratio,
                    corrected_violations=self.corrected_violations,
                    corrected_passed=self.corrected_passed)


def lag_bound_check(trace: EmaTrace) -> BoundReport:
    steps = np.arange(len(trace.thetas))
    big = trace.running_max
    return BoundReport("lag", trace.lags, stated_lag_factor(trace.m) * big,
                       corrected_lag_factor(trace.m, steps) * big)


# ---------------------------------------------------------------------------
# Lipschitz constants

@dataclass
class Layer:
    weight: np.ndarray          # [d_in, d_out], applied as x @ W
    bias: np.ndarray | None = None
    activation: str = "identity"


def spectral_norm(W, iters: int = 200, tol: float = 1e-10, rng=None) -> float:
    """Largest singular value by power iteration on W^T W."""
    W = np.asarray(W, dtype=DTYPE)
    if W.size == 0:
        return 0.0
    rng = rng or make_rng(0)
    v = rng.normal(size=W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0
        w = W.T @ (u / nu)
        new = np.linalg.norm(w)
        v = w / new
        if abs(new - sigma) <= tol * new:
            sigma = new
            break
        sigma = new
    return float(sigma)


def _check_family(layers):
    for L in layers:
        if L.activation not in ONE_LIPSCHITZ:
            raise ValueError(f"activation {L.activation!r} is not in the 1-Lipschitz family {ONE_LIPSCHITZ}")


def lipschitz_upper_bound(layers: Sequence[Layer], input_norm: float | None = None,
                          envelope: Sequence[Sequence[Layer]] = ()) -> float:
    """Upper bound for a chain of linear maps and 1-Lipschitz activations.

    Without ``input_norm``: the input-to-output constant, the product of the
    operator norms.

    With ``input_norm`` (a bound on ||x||): the parameter-to-output constant,
    i.e. a K with ||f(theta, x) - f(theta', x)|| <= K ||theta - theta'|| for every
    theta' on the segment between the given network and each network in
    ``envelope`` (same architecture). With a_l a bound on the layer-l output
    norm and S_l the sensitivity, a_l = ||W_l|| a_{l-1} + ||b_l|| and
    S_l = ||W_l|| S_{l-1} + a_{l-1} + 1[bias]. Norms on the segment are bounded
    by their maxima at the endpoints (convexity), so the result over-estimates.
    """
    _check_family(layers)
    nets = [list(layers)] + [list(e) for e in envelope]
    for e in nets[1:]:
        _check_family(e)
        if len(e) != len(layers):
            raise ValueError("envelope networks must share the architecture")
    if input_norm is None:
        return float(np.prod([max(spectral_norm(n[i].weight) for n in nets) for i in range(len(layers))]))
    a, S = float(input_norm), 0.0
    for i in range(len(layers)):
        w = max(spectral_norm(n[i].weight) for n in nets)
        has_b = layers[i].bias is not None
        b = max(np.linalg.norm(n[i].bias) for n in nets) if has_b else 0.0
        S = w * S + a + (1.0 if has_b else 0.0)
        a = w * a + b
    return float(S)


class MLPProjector:
    """Two-layer tanh MLP on a flat parameter vector, optionally L2-normalized."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, normalize: bool = True):
        self.shapes = {"W1": (d_in, d_hidden), "b1": (d_hidden,), "W2": (d_hidden, d_out), "b2": (d_out,)}
        self.normalize = normalize
        self._like = {k: np.zeros(s) for k, s in self.shapes.items()}

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())

    def params(self, theta) -> dict:
        return unflatten(np.asarray(theta, dtype=DTYPE), self._like)

    def flat(self, params) -> np.ndarray:
        return flatten(params)

    def init(self, rng) -> np.ndarray:
        from .contrast import init_projector
        d_in, d_h = self.shapes["W1"]
        return self.flat(init_projector(d_in, d_h, self.shapes["W2"][1], rng))

    def raw(self, theta, x):
        from .contrast import projector_forward
        return projector_forward(x, self.params(theta), normalize=False)[0]

    def __call__(self, theta, x):
        y = self.raw(theta, x)
        if self.normalize:
            y = y / np.linalg.norm(y, axis=1, keepdims=True)
        return y

    def layers(self, theta):
        p = self.params(theta)
        return [Layer(p["W1"], p["b1"], "tanh"), Layer(p["W2"], p["b2"], "identity")]

    def param_lipschitz(self, theta_a, theta_b, x) -> float:
        """K with ||f(theta_a, x) - f(theta_b, x)|| <= K ||theta_a - theta_b|| for every row of ``x``.

        For the normalized projector this uses the inner-product inequality
        ||u/|u| - v/|v||| <= 2 ||u - v|| / (|u| + |v|), applied to the raw
        outputs, so K = 2 S / min_x (|y_a(x)| + |y_b(x)|).
        """
        x = np.atleast_2d(x)
        S = lipschitz_upper_bound(self.layers(theta_a), float(np.max(np.linalg.norm(x, axis=1))),
                                  envelope=[self.layers(theta_b)])
        if not self.normalize:
            return S
        na = np.linalg.norm(self.raw(theta_a, x), axis=1)
        nb = np.linalg.norm(self.raw(theta_b, x), axis=1)
        den = float(np.min(na + nb))
        return 2.0 * S / den if den > 0 else float("inf")


def function_consistency_check(trace: EmaTrace, projector: Callable, eval_inputs,
                               k_const=None) -> BoundReport:
    """Mean ||f(theta_t, x) - f(theta_m,t, x)|| over inputs vs K * factor * Delta_t.

    ``k_const`` may be a number or a per-step sequence; by default it is
    ``projector.param_lipschitz`` evaluated on each step's segment.
    """
    x = np.atleast_2d(np.asarray(eval_inputs, dtype=DTYPE))
    T1 = len(trace.thetas)
    meas = np.empty(T1)
    ks = np.empty(T1)
    for t in range(T1):
        a, b = trace.thetas[t], trace.theta_ms[t]
        meas[t] = float(np.mean(np.linalg.norm(np.atleast_2d(projector(a, x) - projector(b, x)), axis=1)))
        if k_const is None:
            ks[t] = projector.param_lipschitz(a, b, x)
        else:
            ks[t] = np.broadcast_to(np.asarray(k_const, dtype=DTYPE), (T1,))[t]
    big = trace.running_max
    steps = np.arange(T1)
    with np.errstate(invalid="ignore"):
        bound = np.nan_to_num(ks * stated_lag_factor(trace.m) * big, nan=0.0)
        corr = np.nan_to_num(ks * corrected_lag_factor(trace.m, steps) * big, nan=0.0)
    return BoundReport("function_consistency", meas, bound, corr)


def loss_gap_check(trace: EmaTrace, loss_fn: Callable, rho: float, k_const) -> BoundReport:
    """|L(theta_m,t) - L(theta_t)| vs rho * K * factor * Delta_t.

    ``k_const`` is a number, a per-step sequence, or ``callable(theta, theta_m)``.
    """
    T1 = len(trace.thetas)
    meas = np.empty(T1)
    ks = np.empty(T1)
    for t in range(T1):
        a, b = trace.thetas[t], trace.theta_ms[t]
        meas[t] = abs(loss_fn(b) - loss_fn(a))
        if callable(k_const):
            ks[t] = k_const(a, b)
        else:
            ks[t] = np.broadcast_to(np.asarray(k_const, dtype=DTYPE), (T1,))[t]
    big = trace.running_max
    steps = np.arange(T1)
    with np.errstate(invalid="ignore"):
        bound = np.nan_to_num(rho * ks * stated_lag_factor(trace.m) * big, nan=0.0)
        corr = np.nan_to_num(rho * ks * corrected_lag_factor(trace.m, steps) * big, nan=0.0)
    return BoundReport("loss_gap", meas, bound, corr)


def tolerance_certificate(m: float, delta: float, rho_k: float) -> float:
    """Smallest tolerance eps for which the stated condition
    (1 - m) / m * Delta <= eps / (rho (K_r + K_t)) holds."""
    return rho_k * stated_lag_factor(m) * delta


# ---------------------------------------------------------------------------
# harnesses

def random_trajectory(rng, steps: int, dim: int, max_step: float = 1.0) -> np.ndarray:
    """Random walk whose step lengths are uniform in (0, max_step]."""
    d = rng.normal(size=(steps, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    d *= max_step * (1.0 - rng.random(steps))[:, None]
    theta0 = rng.normal(size=dim)
    return np.vstack([theta0, theta0 + np.cumsum(d, axis=0)])


def constant_step_lag(m: float, delta: float = 1.0, steps: int = 10_000) -> float:
    """Final lag of the 1-D trajectory 0, delta, 2 delta, ... under EMA."""
    theta, theta_m = 0.0, 0.0
    for _ in range(steps):
        theta += delta
        theta_m = m * theta_m + (1.0 - m) * theta
    return theta - theta_m


@dataclass
class LossGapRun:
    seed: int
    report: BoundReport
    k_r: np.ndarray = field(repr=False)
    k_t: np.ndarray = field(repr=False)
    losses: np.ndarray = field(repr=False)

    def summary(self) -> dict:
        return dict(seed=self.seed, **self.report.summary(),
                    k_r_max=float(np.max(self.k_r)), k_t_max=float(np.max(self.k_t)),
                    loss_first=float(self.losses[0]), loss_last=float(self.losses[-1]))


def contrast_loss_gap_run(seed: int, steps: int = 200, m: float = 0.999, tau: float = 0.07,
                          n_classes: int = 4, regions_per_class: int = 2, d_in: int = 6,
                          d_hidden: int = 8, d_proj: int = 4, lr: float = 0.05,
                          clip: float = 0.05) -> LossGapRun:
    """Clipped gradient descent on the symmetric InfoNCE of a fixed batch,
    with EMA tracking and the loss-gap bound evaluated at every step.

    rho = 1 / tau and alpha = 0; K_r, K_t come from ``param_lipschitz`` on
    each step's [theta_t, theta_m,t] segment.
    """
    from .contrast import paired_contrast_loss

    rng = make_rng(seed)
    x_r = rng.normal(size=(n_classes * regions_per_class, d_in))
    y_r = np.repeat(np.arange(n_classes), regions_per_class)
    x_t = rng.normal(size=(n_classes, d_in))
    y_t = np.arange(n_classes)
    proj = MLPProjector(d_in, d_hidden, d_proj, normalize=True)
    n_r = proj.n_params
    theta = np.concatenate([proj.init(rng), proj.init(rng)])

    def as_dict(vec):
        return {**{f"region.{k}": v for k, v in proj.params(vec[:n_r]).items()},
                **{f"text.{k}": v for k, v in proj.params(vec[n_r:]).items()}}

    keys = [f"region.{k}" for k in sorted(proj.shapes)] + [f"text.{k}" for k in sorted(proj.shapes)]

    def loss(vec):
        return paired_contrast_loss(as_dict(vec), x_r, y_r, x_t, y_t, tau=tau)

    traj = [theta.copy()]
    for _ in range(steps):
        _, g = loss(theta)
        step = -lr * flatten(g, keys)
        norm = np.linalg.norm(step)
        if norm > clip:
            step *= clip / norm
        theta = theta + step
        traj.append(theta.copy())
    trace = ema_track(np.array(traj), m)
    k_r = np.array([proj.param_lipschitz(a[:n_r], b[:n_r], x_r) for a, b in zip(trace.thetas, trace.theta_ms)])
    k_t = np.array([proj.param_lipschitz(a[n_r:], b[n_r:], x_t) for a, b in zip(trace.thetas, trace.theta_ms)])
    losses = np.array([loss(th)[0] for th in trace.thetas])
    report = loss_gap_check(trace, lambda v: loss(v)[0], 1.0 / tau, k_r + k_t)
    return LossGapRun(seed, report, k_r, k_t, losses)


def verify(trials: int = 100, steps: int = 1000, dim: int = 50, m: float = 0.99, seed: int = 0,
           max_step: float = 1.0, loss_runs: int = 5, loss_steps: int = 100) -> dict:
    """Monte-Carlo lag check plus seeded loss-gap runs; JSON-ready dict."""
    lag_reports = [lag_bound_check(ema_track(random_trajectory(r, steps, dim, max_step), m))
                   for r in spawn_rngs(seed, trials)]
    gap_runs = [contrast_loss_gap_run(seed * 1000 + i, steps=loss_steps, m=m) for i in range(loss_runs)]
    lag_viol = sum(1 for r in lag_reports if not r.passed)
    gap_viol = sum(1 for g in gap_runs if not g.report.passed)
    return dict(
        trials=trials, steps=steps, dim=dim, momentum=m,
        violations=lag_viol + gap_viol,
        lag_violations=lag_viol, loss_gap_violations=gap_viol,
        max_ratio_lag=max((r.ratio for r in lag_reports), default=0.0),
        max_ratio_loss_gap=max((g.report.ratio for g in gap_runs), default=0.0),
        corrected=dict(
            lag_violations=sum(1 for r in lag_reports if not r.corrected_passed),
            loss_gap_violations=sum(1 for g in gap_runs if not g.report.corrected_passed),
            max_ratio_lag=max((r.corrected_ratio for r in lag_reports), default=0.0),
            max_ratio_loss_gap=max((g.report.corrected_ratio for g in gap_runs), default=0.0),
        ),
        loss_gap_runs=[g.summary() for g in gap_runs],
    )



def segment_gradient_bound(grad_fn: Callable, a, b, n_points: int = 5) -> float:
    """Estimate of max ||grad L|| on the segment [a, b] from ``n_points`` evenly
    spaced samples (endpoints included). By the mean value theorem
    |L(b) - L(a)| <= sup ||grad L|| * ||b - a||; the sampled maximum stands in
    for that supremum, so this is an estimate, not a certificate.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if np.array_equal(a, b):
        return float(np.linalg.norm(grad_fn(a)))
    ss = np.linspace(0.0, 1.0, max(2, n_points))
    return float(max(np.linalg.norm(grad_fn(a + s * (b - a))) for s in ss))
