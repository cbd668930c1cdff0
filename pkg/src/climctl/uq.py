"""Seeded Monte-Carlo ensembles and percentile envelopes.

Run ``r`` draws everything from ``numpy.random.default_rng(base_seed + r)``:
first one multiplicative factor per perturbed parameter, then one RHS
multiplier ``1 + xi_k`` per step. The result therefore does not depend on
how runs are scheduled or batched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numpy as np

from .core import BlowUpError, integrate, integrate_batch
from .ebm import KELVIN_OFFSET, Ebm0dParams, ParameterDomainError, ebm0d_model

DEFAULT_LEVELS = (5.0, 50.0, 95.0)


@dataclass(frozen=True)
class NoiseSpec:
    process_rel_std: float = 0.0
    param_rel_std: float = 0.0
    perturbed_params: Sequence[str] = ()
    base_seed: int = 0

    def __post_init__(self):
        if self.process_rel_std < 0 or self.param_rel_std < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not 0 <= int(self.base_seed) < 2 ** 64:
            raise ValueError("base_seed must fit in an unsigned 64-bit integer")
        object.__setattr__(self, "perturbed_params", tuple(self.perturbed_params))

    def draw(self, run, n_steps):
        """Parameter factors and per-step RHS multipliers for one run."""
        rng = np.random.default_rng(int(self.base_seed) + int(run))
        eta = rng.normal(0.0, self.param_rel_std, size=len(self.perturbed_params))
        xi = rng.normal(0.0, self.process_rel_std, size=n_steps)
        factors = {name: 1.0 + e for name, e in zip(self.perturbed_params, eta)}
        return factors, 1.0 + xi


@dataclass
class EnsembleEnvelope:
    times: np.ndarray
    bands: Dict[float, np.ndarray]
    n_runs: int
    terminal_states: np.ndarray
    n_failed: int = 0
    failed_runs: list = field(default_factory=list)

    def band(self, level):
        return self.bands[float(level)]

    @property
    def levels(self):
        return sorted(self.bands)


def percentiles(trajectories, levels=DEFAULT_LEVELS, component=0, times=None):
    """Per-time empirical percentiles, linear interpolation between order
    statistics (position ``q/100 * (n-1)`` in the sorted sample).

    ``trajectories`` is a list of Trajectory objects or an array shaped
    (runs, times).
    """
    if len(trajectories) == 0:
        raise ValueError("need at least one trajectory")
    if hasattr(trajectories[0], "states"):
        times = trajectories[0].times if times is None else times
        data = np.array([tr.states[:, component] for tr in trajectories])
        terminal = np.array([tr.states[-1] for tr in trajectories])
    else:
        data = np.atleast_2d(np.asarray(trajectories, dtype=float))
        terminal = data[:, -1:]
        times = np.arange(data.shape[1]) if times is None else times
    levels = [float(q) for q in levels]
    if any(not 0 <= q <= 100 for q in levels):
        raise ValueError("percentile levels must lie in [0, 100]")
    values = np.percentile(data, levels, axis=0, method="linear")
    bands = {q: values[i] for i, q in enumerate(levels)}
    return EnsembleEnvelope(np.asarray(times), bands, data.shape[0], terminal)


ModelFactory = Callable[[Dict[str, object]], object]


def monte_carlo(model_factory: ModelFactory, x0, forcing, dt, n_steps, n_runs, noise: NoiseSpec,
                method="euler", levels=DEFAULT_LEVELS, component=0, batch=True,
                return_runs=False):
    """Monte-Carlo ensemble under parameter and multiplicative process noise.

    ``model_factory(factors)`` must return a StateSpaceModel built with each
    named parameter multiplied by ``factors[name]``. When the model is
    vectorized the factors arrive as ``(n_runs, 1)`` arrays and all runs
    advance together; results are bit-identical to the run-by-run path.

    Runs that blow up are dropped and counted in ``n_failed``.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    draws = [noise.draw(r, n_steps) for r in range(n_runs)]
    x0 = np.asarray(x0, dtype=float).reshape(-1)

    states = None
    if batch:
        stacked = {
            name: np.array([d[0][name] for d in draws])[:, None] for name in noise.perturbed_params
        }
        try:
            model = model_factory(stacked)
            if model.vectorized:
                scale = np.stack([d[1] for d in draws], axis=1)[:, :, None]
                times, X = integrate_batch(model, np.tile(x0, (n_runs, 1)), forcing, dt, n_steps,
                                           method=method, rhs_scale=scale)
                states = np.transpose(X, (1, 0, 2))  # (runs, steps, dim)
        except (ParameterDomainError, FloatingPointError):
            states = None
    if states is None:
        times = None
        states = np.full((n_runs, n_steps + 1, x0.size), np.nan)
        for r, (factors, scale) in enumerate(draws):
            try:
                model = model_factory(factors)
                traj = integrate(model, x0, forcing, dt, n_steps, method=method, rhs_scale=scale)
            except (BlowUpError, ParameterDomainError):
                continue
            states[r] = traj.states
            times = traj.times
        if times is None:
            times = dt * np.arange(n_steps + 1)

    ok = np.all(np.isfinite(states), axis=(1, 2))
    if not np.any(ok):
        raise BlowUpError("every Monte-Carlo run failed")
    env = percentiles(states[ok][:, :, component], levels, times=times)
    env.terminal_states = states[ok][:, -1, :]
    env.n_failed = int(np.sum(~ok))
    env.failed_runs = [int(r) for r in np.nonzero(~ok)[0]]
    if return_runs:
        return env, states
    return env


def ebm0d_factory(p: Ebm0dParams):
    """Model factory for :func:`monte_carlo` perturbing named Ebm0dParams fields."""

    def factory(factors):
        return ebm0d_model(p.perturbed(**factors) if factors else p)

    return factory


def write_envelope_csv(path, env: EnsembleEnvelope, celsius=True):
    """CSV with columns time_s, pXX...; temperatures in degC unless disabled."""
    offset = KELVIN_OFFSET if celsius else 0.0
    unit = "degC" if celsius else "K"
    names = [f"p{int(q):02d}" if float(q).is_integer() else f"p{q:g}" for q in env.levels]
    with open(path, "w", newline="") as fh:
        fh.write("# units: time_s=s, " + ", ".join(f"{n}={unit}" for n in names) + "\n")
        fh.write(",".join(["time_s"] + names) + "\n")
        cols = [env.bands[q] - offset for q in env.levels]
        for k, t in enumerate(env.times):
            fh.write(",".join([repr(float(t))] + [repr(float(c[k])) for c in cols]) + "\n")
