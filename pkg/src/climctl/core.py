"""State-space contract, explicit integrators and numerical linearization.

Every model in the package is a :class:`StateSpaceModel`:

    dx/dt = rhs(x, u, w, theta, c, t)
    y     = output(x, u, w, theta, c, t)

with state ``x``, control input ``u``, disturbance ``w``, time-varying
parameters ``theta``, constants ``c``. The integrators turn this into the
discrete map ``x[k+1] = f_d(x[k], ...)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

Forcing = Callable[[float], tuple]

DEFAULT_EPS = 1e-6
ABS_FLOOR = 1e-9


class BlowUpError(FloatingPointError):
    """Raised when an integration produces non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class LinearizationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class StateSpaceModel:
    """Nonlinear continuous-time system.

    ``rhs`` and ``output`` are called as ``f(x, u, w, theta, c, t)``.
    ``output`` defaults to the identity map on the state.

    Models flagged ``vectorized`` accept a stacked state of shape
    ``(batch, state_dim)`` and broadcast their parameters over it; the
    Monte-Carlo driver uses that to advance whole ensembles at once.
    """

    state_dim: int
    input_dim: int
    disturbance_dim: int
    rhs: Callable[..., np.ndarray]
    output: Optional[Callable[..., np.ndarray]] = None
    output_dim: Optional[int] = None
    constants: Any = None
    name: str = ""
    vectorized: bool = False

    def __post_init__(self):
        if self.state_dim <= 0:
            raise ValueError("state_dim must be positive")
        if self.input_dim < 0 or self.disturbance_dim < 0:
            raise ValueError("input_dim and disturbance_dim must be non-negative")
        if self.output_dim is None:
            object.__setattr__(
                self, "output_dim", self.state_dim if self.output is None else None
            )

    def f(self, x, u, w, theta=None, t=0.0):
        return np.asarray(self.rhs(x, u, w, theta, self.constants, t), dtype=float)

    def h(self, x, u, w, theta=None, t=0.0):
        if self.output is None:
            return np.array(x, dtype=float, copy=True)
        return np.atleast_1d(
            np.asarray(self.output(x, u, w, theta, self.constants, t), dtype=float)
        )

    def zero_input(self):
        return np.zeros(self.input_dim)

    def zero_disturbance(self):
        return np.zeros(self.disturbance_dim)


@dataclass
class Trajectory:
    """Time-indexed record of states, applied inputs, disturbances and outputs.

    Row ``k`` of every array belongs to ``times[k]``.
    """

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    disturbances: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.times)
        for name in ("states", "inputs", "outputs"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if self.disturbances is not None and len(self.disturbances) != n:
            raise ValueError("disturbances length mismatch")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @property
    def final_state(self):
        return self.states[-1]


def constant_forcing(u=(), w=(), theta=None) -> Forcing:
    """Forcing that returns the same ``(u, w, theta)`` at every time."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))

    def forcing(t):
        return u, w, theta

    return forcing


def table_forcing(times, u_table=None, w_table=None, theta_table=None) -> Forcing:
    """Zero-order hold over tabulated samples.

    The value at ``times[i]`` is held until ``times[i+1]``; before the first
    sample the first row applies, after the last the last row applies.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) == 0:
        raise ValueError("times must be a non-empty 1-D array")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")

    def _rows(table):
        if table is None:
            return None
        arr = np.asarray(table, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if len(arr) != len(times):
            raise ValueError("forcing table length does not match times")
        return arr

    u_rows, w_rows = _rows(u_table), _rows(w_table)
    empty = np.zeros(0)

    def forcing(t):
        i = int(np.searchsorted(times, t, side="right")) - 1
        i = min(max(i, 0), len(times) - 1)
        u = empty if u_rows is None else u_rows[i]
        w = empty if w_rows is None else w_rows[i]
        theta = None if theta_table is None else theta_table[i]
        return u, w, theta

    return forcing


def _default_forcing(model):
    return constant_forcing(model.zero_input(), model.zero_disturbance())


def euler_step(model, x, t, dt, forcing, scale=1.0):
    u, w, theta = forcing(t)
    return x + (dt * scale) * model.f(x, u, w, theta, t)


def rk4_step(model, x, t, dt, forcing, scale=1.0):
    h = dt * scale
    half = 0.5 * dt
    u, w, th = forcing(t)
    k1 = model.f(x, u, w, th, t)
    u, w, th = forcing(t + half)
    k2 = model.f(x + (0.5 * h) * k1, u, w, th, t + half)
    k3 = model.f(x + (0.5 * h) * k2, u, w, th, t + half)
    u, w, th = forcing(t + dt)
    k4 = model.f(x + h * k3, u, w, th, t + dt)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


STEPPERS = {"euler": euler_step, "rk4": rk4_step}


def _integrate(stepper, model, x0, forcing, dt, n_steps, t0, rhs_scale):
    if dt <= 0:
        raise ValueError("dt must be positive")
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    x = np.array(x0, dtype=float).reshape(-1)
    if x.size != model.state_dim:
        raise ValueError(f"x0 has {x.size} entries, model expects {model.state_dim}")
    if forcing is None:
        forcing = _default_forcing(model)
    if rhs_scale is not None:
        rhs_scale = np.asarray(rhs_scale, dtype=float)
        if len(rhs_scale) != n_steps:
            raise ValueError("rhs_scale needs one entry per step")

    times = t0 + dt * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, model.state_dim))
    states[0] = x
    for k in range(n_steps):
        scale = 1.0 if rhs_scale is None else rhs_scale[k]
        x = stepper(model, x, times[k], dt, forcing, scale)
        if not np.all(np.isfinite(x)):
            raise BlowUpError(f"non-finite state at step {k + 1} (t={times[k + 1]:g})", step=k + 1)
        states[k + 1] = x
    return _record(model, times, states, forcing)


def _record(model, times, states, forcing):
    inputs, dists, outputs = [], [], []
    for t, x in zip(times, states):
        u, w, theta = forcing(t)
        inputs.append(np.atleast_1d(np.asarray(u, dtype=float)))
        dists.append(np.atleast_1d(np.asarray(w, dtype=float)))
        outputs.append(model.h(x, u, w, theta, t))
    return Trajectory(
        times=times,
        states=states,
        inputs=np.array(inputs),
        outputs=np.array(outputs),
        disturbances=np.array(dists),
    )


def integrate_euler(model, x0, forcing=None, dt=1.0, n_steps=1, t0=0.0, rhs_scale=None):
    """Forward Euler: ``x[k+1] = x[k] + dt * rhs(x[k], ..., t[k])``.

    ``rhs_scale`` optionally multiplies the right-hand side on each step
    (used for multiplicative process noise). Raises :class:`BlowUpError`
    with the offending step index if the state stops being finite.
    """
    return _integrate(euler_step, model, x0, forcing, dt, n_steps, t0, rhs_scale)


def integrate_rk4(model, x0, forcing=None, dt=1.0, n_steps=1, t0=0.0, rhs_scale=None):
    """Classical fourth-order Runge-Kutta; same contract as :func:`integrate_euler`."""
    return _integrate(rk4_step, model, x0, forcing, dt, n_steps, t0, rhs_scale)


def integrate(model, x0, forcing=None, dt=1.0, n_steps=1, t0=0.0, method="euler", rhs_scale=None):
    try:
        stepper = STEPPERS[method]
    except KeyError:
        raise ValueError(f"unknown integration method {method!r}") from None
    return _integrate(stepper, model, x0, forcing, dt, n_steps, t0, rhs_scale)


def integrate_batch(model, x0, forcing, dt, n_steps, t0=0.0, method="euler", rhs_scale=None):
    """Advance a stack of states ``(batch, state_dim)`` together.

    Requires a vectorized model. Non-finite members are not an error here;
    they are left as NaN/inf for the caller to screen. Returns the state
    history with shape ``(n_steps + 1, batch, state_dim)``.
    """
    if not model.vectorized:
        raise ValueError("integrate_batch needs a vectorized model")
    stepper = STEPPERS[method]
    x = np.array(x0, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.state_dim:
        raise ValueError("x0 must have shape (batch, state_dim)")
    if forcing is None:
        forcing = _default_forcing(model)
    times = t0 + dt * np.arange(n_steps + 1)
    out = np.empty((n_steps + 1,) + x.shape)
    out[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            scale = 1.0 if rhs_scale is None else rhs_scale[k]
            x = stepper(model, x, times[k], dt, forcing, scale)
            out[k + 1] = x
    return times, out


def _fd_step(value, eps):
    return max(eps * abs(value), ABS_FLOOR)


def _jacobian(fun, z0, eps, label):
    z0 = np.asarray(z0, dtype=float)
    f0 = np.atleast_1d(fun(z0))
    jac = np.empty((f0.size, z0.size))
    for j in range(z0.size):
        h = _fd_step(z0[j], eps)
        zp, zm = z0.copy(), z0.copy()
        zp[j] += h
        zm[j] -= h
        col = (np.atleast_1d(fun(zp)) - np.atleast_1d(fun(zm))) / (2.0 * h)
        bad = ~np.isfinite(col)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise LinearizationError(f"non-finite Jacobian entry d{label[0]}[{i}]/d{label[1]}[{j}]")
        jac[:, j] = col
    return jac


def linearize(model, x_star, u_star=None, eps=DEFAULT_EPS, w_star=None, theta=None, t=0.0):
    """Central finite-difference Jacobians ``(A, B, C_obs)`` at ``(x*, u*)``.

    The step on coordinate ``j`` is ``max(eps * |z_j|, 1e-9)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x_star = np.asarray(x_star, dtype=float).reshape(-1)
    u_star = model.zero_input() if u_star is None else np.asarray(u_star, dtype=float).reshape(-1)
    w_star = model.zero_disturbance() if w_star is None else np.asarray(w_star, dtype=float)

    A = _jacobian(lambda x: model.f(x, u_star, w_star, theta, t), x_star, eps, ("rhs", "x"))
    if model.input_dim:
        B = _jacobian(lambda u: model.f(x_star, u, w_star, theta, t), u_star, eps, ("rhs", "u"))
    else:
        B = np.zeros((model.state_dim, 0))
    C = _jacobian(lambda x: model.h(x, u_star, w_star, theta, t), x_star, eps, ("y", "x"))
    return A, B, C
