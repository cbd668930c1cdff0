"""Zero-dimensional and gridded energy-balance models.

0D:  C dT/dt = g*S*(1 - (alpha + u)) - (epsilon + w) * sigma * T^4
2D:  C_ij dT_ij/dt = S_ij*(1 - (alpha_ij + u_ij)) - eps_ij*sigma*T_ij^4 + L_ij(T) + F_ij

``g`` is ``geometric_factor``. It defaults to 1, which keeps the solar term
exactly as written in the original tutorial experiment (equilibria near
408 K); 0.25 gives the usual disc-to-sphere dilution.

Temperatures are Kelvin everywhere in this module; Celsius only appears
when results are written out.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .core import StateSpaceModel

SIGMA = 5.67e-8  # W m^-2 K^-4
KELVIN_OFFSET = 273.15
SECONDS_PER_DAY = 86400.0
SECONDS_PER_YEAR = 365.0 * SECONDS_PER_DAY
ALLOWED_GEOMETRIC_FACTORS = (1.0, 0.25)


class ParameterDomainError(ValueError):
    pass


def _fourth(T):
    # (T*T)*(T*T) keeps scalar and array evaluation bit-identical
    T2 = T * T
    return T2 * T2


@dataclass(frozen=True)
class AlbedoRamp:
    """Piecewise-linear albedo(T): ``cold_albedo`` below ``T_cold``,
    ``warm_albedo`` above ``T_warm``, linear in between.
    """

    T_cold: float = 250.0
    T_warm: float = 280.0
    cold_albedo: float = 0.6
    warm_albedo: float = 0.3

    def __post_init__(self):
        if not self.T_cold < self.T_warm:
            raise ParameterDomainError("AlbedoRamp needs T_cold < T_warm")
        for a in (self.cold_albedo, self.warm_albedo):
            if not 0.0 <= a <= 1.0:
                raise ParameterDomainError("ramp albedos must lie in [0, 1]")

    def __call__(self, T):
        frac = np.clip((T - self.T_cold) / (self.T_warm - self.T_cold), 0.0, 1.0)
        return self.cold_albedo + frac * (self.warm_albedo - self.cold_albedo)


@dataclass(frozen=True)
class Ebm0dParams:
    C: float = 8e8
    S: float = 1367.6
    alpha: float = 0.3
    epsilon: float = 0.61
    sigma: float = SIGMA
    geometric_factor: float = 1.0
    albedo_ramp: Optional[AlbedoRamp] = None

    def __post_init__(self):
        # array-valued fields are allowed (Monte-Carlo batches)
        if np.any(np.asarray(self.C) <= 0):
            raise ParameterDomainError("C must be positive")
        if np.any(np.asarray(self.S) <= 0):
            raise ParameterDomainError("S must be positive")
        if np.any(np.asarray(self.sigma) <= 0):
            raise ParameterDomainError("sigma must be positive")
        for name in ("alpha", "epsilon"):
            v = np.asarray(getattr(self, name))
            if np.any(v < 0) or np.any(v > 1):
                raise ParameterDomainError(f"{name} must lie in [0, 1]")
        if self.geometric_factor not in ALLOWED_GEOMETRIC_FACTORS:
            raise ParameterDomainError(
                f"geometric_factor must be one of {ALLOWED_GEOMETRIC_FACTORS}, got {self.geometric_factor}"
            )

    def perturbed(self, **factors):
        """Copy with the named fields multiplied by the given factors."""
        return replace(self, **{k: getattr(self, k) * v for k, v in factors.items()})


@dataclass(frozen=True)
class Ebm0dState:
    T: float

    def __post_init__(self):
        if not self.T > 0:
            raise ParameterDomainError(f"non-physical absolute temperature {self.T} K")

    @property
    def celsius(self):
        return self.T - KELVIN_OFFSET


def _check_effective(a_eff, e_eff, T=None):
    if np.any(a_eff < 0) or np.any(a_eff > 1):
        raise ParameterDomainError("alpha + u must lie in [0, 1]")
    if np.any(e_eff < 0) or np.any(e_eff > 1):
        raise ParameterDomainError("epsilon + w must lie in [0, 1]")
    if T is not None and np.any(T <= 0):
        raise ParameterDomainError("temperature must be positive (Kelvin)")


def ebm0d_rhs(T, p: Ebm0dParams, u=0.0, w=0.0):
    """dT/dt in K/s for the forced, disturbed 0D model."""
    alpha = p.alpha if p.albedo_ramp is None else p.albedo_ramp(T)
    a_eff = alpha + u
    e_eff = p.epsilon + w
    _check_effective(a_eff, e_eff, T)
    absorbed = p.geometric_factor * p.S * (1.0 - a_eff)
    emitted = e_eff * p.sigma * _fourth(T)
    return (absorbed - emitted) / p.C


def ebm0d_equilibrium(p: Ebm0dParams, u=0.0, w=0.0):
    """Fixed point of :func:`ebm0d_rhs` for constant ``u``, ``w``."""
    if p.albedo_ramp is not None:
        raise ParameterDomainError("closed-form equilibrium needs constant albedo")
    a_eff = p.alpha + u
    e_eff = p.epsilon + w
    if np.any(e_eff <= 0):
        raise ParameterDomainError("degenerate emissivity: epsilon + w must be positive")
    _check_effective(a_eff, e_eff)
    return (p.geometric_factor * p.S * (1.0 - a_eff) / (e_eff * p.sigma)) ** 0.25


def ebm0d_model(p: Ebm0dParams, name="ebm0d") -> StateSpaceModel:
    """0D EBM as a vectorized state-space model: x = [T], u = [albedo
    increment], w = [emissivity increment], y = [T].
    """

    def rhs(x, u, w, theta, c, t):
        return ebm0d_rhs(x, c, u[..., :1], w[..., :1])

    return StateSpaceModel(
        state_dim=1, input_dim=1, disturbance_dim=1, rhs=rhs,
        constants=p, name=name, vectorized=True,
    )


@dataclass(frozen=True)
class GridField2d:
    m: int
    n: int
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(-1)
        if vals.size != self.m * self.n:
            raise ValueError(f"GridField2d expects {self.m * self.n} values, got {vals.size}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("GridField2d values must be finite")
        object.__setattr__(self, "values", vals)

    @classmethod
    def full(cls, m, n, value):
        return cls(m, n, np.full(m * n, float(value)))

    @classmethod
    def from_grid(cls, grid):
        grid = np.asarray(grid, dtype=float)
        return cls(grid.shape[0], grid.shape[1], grid.reshape(-1))

    @property
    def grid(self):
        return self.values.reshape(self.m, self.n)

    @property
    def shape(self):
        return (self.m, self.n)


Kappa = Union[float, tuple]


def _as_field(value, m, n):
    if isinstance(value, GridField2d):
        if value.shape != (m, n):
            raise ValueError(f"field shape {value.shape} does not match grid {(m, n)}")
        return value
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return GridField2d.full(m, n, float(arr))
    return GridField2d(m, n, arr)


def _edge_coefficients(kappa, m, n, boundary):
    """Return (k_east, k_south), each m x n.

    ``k_east[i, j]`` couples (i, j) with (i, j+1); ``k_south[i, j]`` couples
    (i, j) with (i+1, j). Wrap-around edges are zeroed for zero-flux grids.
    """
    if isinstance(kappa, tuple):
        k_east = np.asarray(kappa[0], dtype=float)
        k_south = np.asarray(kappa[1], dtype=float)
        if k_east.shape != (m, n) or k_south.shape != (m, n):
            raise ValueError(f"per-edge kappa arrays must both be {m}x{n}")
        k_east, k_south = k_east.copy(), k_south.copy()
    else:
        k_east = np.full((m, n), float(kappa))
        k_south = np.full((m, n), float(kappa))
    if np.any(k_east < 0) or np.any(k_south < 0):
        raise ParameterDomainError("kappa must be non-negative")
    if boundary == "zero-flux":
        k_east[:, -1] = 0.0
        k_south[-1, :] = 0.0
    elif boundary != "periodic":
        raise ValueError(f"unknown boundary {boundary!r}")
    # periodic grids of extent <= 2 would otherwise count an edge twice
    if boundary == "periodic":
        if n == 2:
            k_east[:, -1] = 0.0
        if m == 2:
            k_south[-1, :] = 0.0
    return k_east, k_south


def diffusion_apply(T, kappa: Kappa = 1.0, boundary="zero-flux"):
    """Linear 4-neighbour heat exchange L_ij = sum_kl kappa_edge (T_kl - T_ij).

    ``kappa`` is a scalar or a pair ``(k_east, k_south)`` of m x n per-edge
    arrays (see :func:`_edge_coefficients`). Accepts a GridField2d or a
    2-D array and returns the same kind.
    """
    is_field = isinstance(T, GridField2d)
    grid = T.grid if is_field else np.asarray(T, dtype=float)
    m, n = grid.shape
    k_east, k_south = _edge_coefficients(kappa, m, n, boundary)

    east_flux = k_east * (np.roll(grid, -1, axis=1) - grid)
    south_flux = k_south * (np.roll(grid, -1, axis=0) - grid)
    out = east_flux - np.roll(east_flux, 1, axis=1) + south_flux - np.roll(south_flux, 1, axis=0)
    return GridField2d.from_grid(out) if is_field else out


@dataclass(frozen=True)
class Ebm2dParams:
    m: int
    n: int
    C: GridField2d
    S: GridField2d
    alpha: GridField2d
    epsilon: GridField2d
    kappa: Kappa = 0.0
    boundary: str = "zero-flux"
    sigma: float = SIGMA

    def __post_init__(self):
        if self.m <= 0 or self.n <= 0:
            raise ValueError("grid dimensions must be positive")
        for name in ("C", "S", "alpha", "epsilon"):
            object.__setattr__(self, name, _as_field(getattr(self, name), self.m, self.n))
        if np.any(self.C.values <= 0):
            raise ParameterDomainError("C must be positive in every cell")
        if np.any(self.S.values <= 0):
            raise ParameterDomainError("S must be positive in every cell")
        for name in ("alpha", "epsilon"):
            v = getattr(self, name).values
            if np.any(v < 0) or np.any(v > 1):
                raise ParameterDomainError(f"{name} must lie in [0, 1] in every cell")
        # validates shape, sign and boundary name
        _edge_coefficients(self.kappa, self.m, self.n, self.boundary)

    @classmethod
    def uniform(cls, m, n, base: Ebm0dParams = Ebm0dParams(), kappa=0.0, boundary="zero-flux"):
        return cls(
            m=m, n=n,
            C=GridField2d.full(m, n, base.C),
            S=GridField2d.full(m, n, base.geometric_factor * base.S),
            alpha=GridField2d.full(m, n, base.alpha),
            epsilon=GridField2d.full(m, n, base.epsilon),
            kappa=kappa, boundary=boundary, sigma=base.sigma,
        )


def _ebm2d_rhs_flat(T, p: Ebm2dParams, u, F):
    """Flat-array kernel; ``T``, ``u`` and ``F`` are length m*n (or batched)."""
    a_eff = p.alpha.values + u
    _check_effective(a_eff, p.epsilon.values, T)
    absorbed = p.S.values * (1.0 - a_eff)
    emitted = p.epsilon.values * p.sigma * _fourth(T)
    shape = np.shape(T)
    grid = np.reshape(T, shape[:-1] + (p.m, p.n))
    if grid.ndim == 2:
        lap = diffusion_apply(grid, p.kappa, p.boundary)
    else:
        lap = np.stack([diffusion_apply(g, p.kappa, p.boundary) for g in grid])
    lap = lap.reshape(shape)
    return (absorbed - emitted + lap + F) / p.C.values


def ebm2d_rhs(T: GridField2d, p: Ebm2dParams, u: Optional[GridField2d] = None,
              F: Optional[GridField2d] = None) -> GridField2d:
    """Per-cell dT_ij/dt (K/s) of the gridded model."""
    T = _as_field(T, p.m, p.n)
    u = _as_field(0.0 if u is None else u, p.m, p.n)
    F = _as_field(0.0 if F is None else F, p.m, p.n)
    return GridField2d(p.m, p.n, _ebm2d_rhs_flat(T.values, p, u.values, F.values))


def ebm2d_model(p: Ebm2dParams, sensors=None, name="ebm2d") -> StateSpaceModel:
    """Gridded EBM as a state-space model.

    State, input (albedo increments) and disturbance (forcing F, W/m^2) are
    all row-major length m*n vectors. ``sensors`` is a list of flat cell
    indices that are observed; ``None`` observes every cell.
    """
    size = p.m * p.n
    if sensors is None:
        output, output_dim = None, None
    else:
        idx = np.asarray(sensors, dtype=int)
        if np.any(idx < 0) or np.any(idx >= size):
            raise ValueError("sensor index out of range")

        def output(x, u, w, theta, c, t):
            return np.asarray(x)[..., idx]

        output_dim = len(idx)

    def rhs(x, u, w, theta, c, t):
        return _ebm2d_rhs_flat(x, c, u, w)

    return StateSpaceModel(
        state_dim=size, input_dim=size, disturbance_dim=size, rhs=rhs,
        output=output, output_dim=output_dim, constants=p, name=name, vectorized=True,
    )


def to_celsius(T):
    return np.asarray(T) - KELVIN_OFFSET
