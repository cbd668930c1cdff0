"""Feedback regulation, SAI share planning and reachability envelopes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    STEPPERS,
    BlowUpError,
    Trajectory,
    constant_forcing,
    integrate_euler,
    integrate_rk4,
    table_forcing,
)
from .ebm import Ebm0dParams, ParameterDomainError, ebm0d_model


# -- PI regulation ------------------------------------------------------------

@dataclass(frozen=True)
class PiGains:
    """Discrete PI law with output clamping and integral anti-windup.

    ``reverse_acting`` flips the error sign, for actuators that lower the
    controlled output when increased (e.g. albedo against temperature).
    """

    kp: float
    ki: float
    u_min: float = -np.inf
    u_max: float = np.inf
    integral_limit: float = np.inf
    reverse_acting: bool = False

    def __post_init__(self):
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be strictly below u_max")
        if not self.integral_limit >= 0:
            raise ValueError("integral_limit must be non-negative")


def pi_step(error, integral, dt, gains: PiGains):
    """Return ``(u, integral')`` for one controller update."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    lim = gains.integral_limit
    integral = min(max(integral + error * dt, -lim), lim)
    u = gains.kp * error + gains.ki * integral
    return min(max(u, gains.u_min), gains.u_max), integral


def _as_signal(disturbance, dim):
    if disturbance is None:
        zero = np.zeros(dim)
        return lambda t: zero
    if callable(disturbance):
        return lambda t: np.atleast_1d(np.asarray(disturbance(t), dtype=float))
    const = np.atleast_1d(np.asarray(disturbance, dtype=float))
    return lambda t: const


def closed_loop_simulate(model, gains: PiGains, target, x0, dt, n_steps, disturbance=None,
                         method="euler", output_index=0, input_map=None,
                         output_noise_std=0.0, seed=None, t0=0.0) -> Trajectory:
    """Simulate the plant under PI feedback on one output channel.

    Each step measures ``y[output_index]`` (plus optional Gaussian noise),
    computes ``u_k`` with :func:`pi_step`, holds it over the step and
    records it. ``input_map`` spreads the scalar command over the model's
    input vector (default: the same value on every channel).
    """
    stepper = STEPPERS[method]
    w_of_t = _as_signal(disturbance, model.disturbance_dim)
    input_map = np.ones(model.input_dim) if input_map is None else np.asarray(input_map, float)
    rng = np.random.default_rng(seed) if output_noise_std > 0 else None
    sign = -1.0 if gains.reverse_acting else 1.0

    times = t0 + dt * np.arange(n_steps + 1)
    x = np.array(x0, dtype=float).reshape(-1)
    states, inputs, outputs, dists = [], [], [], []
    integral = 0.0
    for k, t in enumerate(times):
        w = w_of_t(t)
        y = model.h(x, input_map * 0.0, w, None, t)
        measured = y[output_index]
        if rng is not None:
            measured = measured + rng.normal(0.0, output_noise_std)
        u_cmd, integral = pi_step(sign * (target - measured), integral, dt, gains)
        u_vec = input_map * u_cmd
        states.append(x)
        inputs.append(u_vec)
        outputs.append(y)
        dists.append(w)
        if k == n_steps:
            break
        held = (lambda uu: (lambda s: (uu, w_of_t(s), None)))(u_vec)
        x = stepper(model, x, t, dt, held)
        if not np.all(np.isfinite(x)):
            raise BlowUpError(f"non-finite state at step {k + 1}", step=k + 1)
    return Trajectory(times, np.array(states), np.array(inputs), np.array(outputs), np.array(dists))


# -- SAI share planning ---------------------------------------------------------

@dataclass(frozen=True)
class SaiSurrogate:
    """Linear response surrogate: diagnostics ~= G @ shares."""

    G: np.ndarray
    target: np.ndarray
    total_cooling: float
    weights: Optional[np.ndarray] = None
    policy_names: Sequence[str] = field(default=())
    diagnostic_names: Sequence[str] = field(default=())

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.G, dtype=float))
        object.__setattr__(self, "G", G)
        target = np.asarray(self.target, dtype=float).reshape(-1)
        if target.size != G.shape[0]:
            raise ValueError(f"target has {target.size} entries, G has {G.shape[0]} rows")
        object.__setattr__(self, "target", target)
        w = np.ones(G.shape[0]) if self.weights is None else np.asarray(self.weights, float).reshape(-1)
        if w.size != G.shape[0]:
            raise ValueError("weights must have one entry per diagnostic")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        object.__setattr__(self, "weights", w)
        if not np.all(np.isfinite(G)) or not np.all(np.isfinite(target)):
            raise ValueError("G and target must be finite")
        if self.total_cooling < 0:
            raise ParameterDomainError("total_cooling must be non-negative")
        names = tuple(self.policy_names) or tuple(f"policy_{j}" for j in range(G.shape[1]))
        if len(names) != G.shape[1]:
            raise ValueError("policy_names must have one entry per column of G")
        object.__setattr__(self, "policy_names", names)

    @property
    def n_policies(self):
        return self.G.shape[1]

    def objective(self, shares):
        r = self.G @ np.asarray(shares, float) - self.target
        return float(np.sum(self.weights * r * r))

    @classmethod
    def from_dict(cls, doc):
        return cls(
            G=doc["G"], target=doc["target"], total_cooling=float(doc["total_cooling"]),
            weights=doc.get("weights"), policy_names=doc.get("policy_names", ()),
            diagnostic_names=doc.get("diagnostic_names", ()),
        )


def project_scaled_simplex(v, total):
    """Euclidean projection of ``v`` onto {s >= 0, sum(s) = total}."""
    v = np.asarray(v, dtype=float)
    if total == 0:
        return np.zeros_like(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    ind = np.arange(1, v.size + 1)
    # index 0 always qualifies in exact arithmetic; rounding can hide it
    support = np.nonzero(u - css / ind > 0)[0]
    rho = support[-1] if support.size else 0
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


@dataclass
class SaiPlan:
    shares: np.ndarray
    objective: float
    iterations: int
    converged: bool


def plan_sai_shares(s: SaiSurrogate, tol=1e-10, max_iter=200_000, return_info=False):
    """Weighted least squares over nonnegative shares summing to ``total_cooling``.

    Projected gradient descent with Armijo backtracking, started from the
    even split; stops once the projected step moves the shares by no more
    than ``tol * max(1, total_cooling)``.
    """
    if s.total_cooling < 0:
        raise ParameterDomainError("total_cooling must be non-negative")
    GW = s.G.T * s.weights
    H = 2.0 * GW @ s.G
    b = 2.0 * GW @ s.target
    c = s.total_cooling
    x = np.full(s.n_policies, c / s.n_policies)
    f = s.objective(x)
    lip = max(float(np.linalg.eigvalsh(H)[-1]), 1e-300)
    step = 1.0 / lip
    converged = c == 0
    it = 0
    while not converged and it < max_iter:
        it += 1
        g = H @ x - b
        step *= 2.0
        for _ in range(60):
            x_new = project_scaled_simplex(x - step * g, c)
            d = x_new - x
            f_new = s.objective(x_new)
            if f_new <= f + g @ d + (0.5 / step) * (d @ d):
                break
            step *= 0.5
        if np.linalg.norm(d) <= tol * max(1.0, c):
            if f_new <= f:
                x, f = x_new, f_new
            converged = True
        else:
            x, f = x_new, f_new
    plan = SaiPlan(shares=x, objective=f, iterations=it, converged=converged)
    return plan if return_info else plan.shares


# -- reachability ---------------------------------------------------------------

@dataclass(frozen=True)
class BoundsBox:
    u_lo: float
    u_hi: float
    w_lo: float
    w_hi: float

    def __post_init__(self):
        if self.u_lo > self.u_hi or self.w_lo > self.w_hi:
            raise ValueError("BoundsBox needs u_lo <= u_hi and w_lo <= w_hi")

    def validate_for(self, p: Ebm0dParams):
        if p.alpha + self.u_lo < 0 or p.alpha + self.u_hi > 1:
            raise ParameterDomainError("box takes alpha + u outside [0, 1]")
        if p.epsilon + self.w_lo <= 0 or p.epsilon + self.w_hi > 1:
            raise ParameterDomainError("box takes epsilon + w outside (0, 1]")

    def contains(self, other: "BoundsBox"):
        return (self.u_lo <= other.u_lo and other.u_hi <= self.u_hi
                and self.w_lo <= other.w_lo and other.w_hi <= self.w_hi)


def reachable_envelope(p: Ebm0dParams, box: BoundsBox, T0, dt, n_steps):
    """Lower and upper forward-Euler trajectories bracketing every input
    signal that stays inside ``box``.

    The right-hand side decreases in both u and w, so the lower bound runs
    with (u_hi, w_hi) and the upper with (u_lo, w_lo). The bracket holds for
    the discrete scheme as long as dt * |df/dT| <= 1 along the envelope,
    which is checked (a RuntimeWarning flags violations).
    """
    if p.albedo_ramp is not None:
        raise ParameterDomainError("monotone bracketing needs constant albedo")
    box.validate_for(p)
    model = ebm0d_model(p)
    lower = integrate_euler(model, [T0], constant_forcing([box.u_hi], [box.w_hi]), dt, n_steps)
    upper = integrate_euler(model, [T0], constant_forcing([box.u_lo], [box.w_lo]), dt, n_steps)
    T_max = float(np.max(upper.states))
    slope = 4.0 * (p.epsilon + box.w_hi) * p.sigma * T_max ** 3 / p.C
    if dt * slope > 1.0:
        warnings.warn(
            f"dt*|df/dT| = {dt * slope:.3g} > 1; discrete bracketing not guaranteed",
            RuntimeWarning, stacklevel=2,
        )
    return lower, upper


def random_piecewise_signal(rng, lo, hi, n_steps, n_segments):
    """Piecewise-constant per-step values uniform in [lo, hi]."""
    edges = np.sort(rng.choice(np.arange(1, n_steps), size=min(n_segments - 1, n_steps - 1),
                               replace=False)) if n_steps > 1 and n_segments > 1 else np.array([], int)
    levels = rng.uniform(lo, hi, size=len(edges) + 1)
    seg = np.searchsorted(edges, np.arange(n_steps), side="right")
    return levels[seg]


def envelope_containment(p: Ebm0dParams, box: BoundsBox, T0, dt, n_steps, n_signals=1000,
                         n_segments=10, seed=0):
    """Smallest slack of random piecewise-constant signals against the envelope.

    Returns ``min_k min(T_k - lower_k, upper_k - T_k)`` over all sampled
    signals; negative values indicate an escape.
    """
    lower, upper = reachable_envelope(p, box, T0, dt, n_steps)
    lo, hi = lower.states[:, 0], upper.states[:, 0]
    model = ebm0d_model(p)
    u_sig = np.empty((n_signals, n_steps))
    w_sig = np.empty((n_signals, n_steps))
    for r in range(n_signals):
        rng = np.random.default_rng([seed, r])
        u_sig[r] = random_piecewise_signal(rng, box.u_lo, box.u_hi, n_steps, n_segments)
        w_sig[r] = random_piecewise_signal(rng, box.w_lo, box.w_hi, n_steps, n_segments)
    x = np.full((n_signals, 1), float(T0))
    worst = 0.0
    for k in range(n_steps):
        x = x + dt * model.f(x, u_sig[:, k:k + 1], w_sig[:, k:k + 1])
        worst = min(worst, float(np.min(x[:, 0] - lo[k + 1])), float(np.min(hi[k + 1] - x[:, 0])))
    return worst


def sampled_reach_bounds(model, x0, u_lo, u_hi, w_lo, w_hi, dt, n_steps, n_samples=200,
                         n_segments=10, method="euler", seed=0):
    """Per-time componentwise min/max over sampled input/disturbance signals.

    This is an under-approximation of the reachable tube for general
    multi-state models; it carries no containment guarantee.
    """
    u_lo, u_hi = np.broadcast_to(u_lo, (model.input_dim,)), np.broadcast_to(u_hi, (model.input_dim,))
    w_lo, w_hi = (np.broadcast_to(w_lo, (model.disturbance_dim,)),
                  np.broadcast_to(w_hi, (model.disturbance_dim,)))
    integrator = integrate_euler if method == "euler" else integrate_rk4
    lo = hi = None
    for r in range(n_samples):
        rng = np.random.default_rng([seed, r])
        u_tab = np.column_stack([random_piecewise_signal(rng, a, b, n_steps + 1, n_segments)
                                 for a, b in zip(u_lo, u_hi)]) if model.input_dim else None
        w_tab = np.column_stack([random_piecewise_signal(rng, a, b, n_steps + 1, n_segments)
                                 for a, b in zip(w_lo, w_hi)]) if model.disturbance_dim else None
        times = dt * np.arange(n_steps + 1)
        traj = integrator(model, x0, table_forcing(times, u_tab, w_tab), dt, n_steps)
        lo = traj.states if lo is None else np.minimum(lo, traj.states)
        hi = traj.states if hi is None else np.maximum(hi, traj.states)
    return lo, hi
