"""Dry primitive-equation core on a small 3-D finite-difference grid.

Semi-discrete system (``*`` is element-wise):

    dv/dt   = -(v . grad) v - f k x v - rho^-1 * grad p + nu lap v
    dT/dt   = -v . grad T + Q_T
    drho/dt = -div(rho v)
    p       = rho R T

Horizontal boundaries are periodic. Vertically the default is a rigid lid
and floor (``vertical="wall"``): gradients use one-sided differences at the
end levels, and the mass flux is mirrored with opposite sign across the
walls so that the column mass budget still telescopes. ``vertical="periodic"``
makes the grid fully periodic.

Cell (i, j, k) maps to flat index ``(i * ny + j) * nz + k``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .core import BlowUpError, StateSpaceModel

R_DRY_AIR = 287.0  # J kg^-1 K^-1

FIELDS = ("vx", "vy", "vz", "T", "rho")


class PositivityError(FloatingPointError):
    """Density or temperature went non-positive after a step."""


class CflWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class AtmosGrid:
    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    vertical: str = "wall"

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) <= 0:
            raise ValueError("grid counts must be positive")
        if self.size < 8:
            raise ValueError(f"grid must have at least 8 cells, got {self.size}")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ValueError("grid spacings must be positive")
        if self.vertical not in ("wall", "periodic"):
            raise ValueError(f"unknown vertical boundary {self.vertical!r}")

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def size(self):
        return self.nx * self.ny * self.nz

    @property
    def spacing(self):
        return (self.dx, self.dy, self.dz)

    @property
    def cell_volume(self):
        return self.dx * self.dy * self.dz

    def coordinates(self):
        """Cell-centre coordinates (x, y, z), each shaped like a field."""
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        z = (np.arange(self.nz) + 0.5) * self.dz
        return np.meshgrid(x, y, z, indexing="ij")


@dataclass(frozen=True)
class AtmosState:
    vx: np.ndarray
    vy: np.ndarray
    vz: np.ndarray
    T: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(getattr(self, f)) for f in FIELDS}
        if len(shapes) != 1:
            raise ValueError(f"state fields disagree in shape: {shapes}")
        for f in FIELDS:
            if not np.all(np.isfinite(getattr(self, f))):
                raise ValueError(f"field {f} has non-finite values")
        if np.any(self.rho <= 0):
            raise PositivityError("density must be positive everywhere")
        if np.any(self.T <= 0):
            raise PositivityError("temperature must be positive everywhere")

    def pack(self):
        return np.concatenate([np.ravel(getattr(self, f)) for f in FIELDS])

    @classmethod
    def unpack(cls, x, grid: AtmosGrid):
        x = np.asarray(x, dtype=float)
        N = grid.size
        if x.size != 5 * N:
            raise ValueError(f"packed state must have {5 * N} entries, got {x.size}")
        parts = [x[i * N:(i + 1) * N].reshape(grid.shape) for i in range(5)]
        return cls(*parts)

    @classmethod
    def resting(cls, grid: AtmosGrid, T=288.0, rho=1.2):
        zeros = np.zeros(grid.shape)
        return cls(zeros, zeros.copy(), zeros.copy(), np.full(grid.shape, float(T)),
                   np.full(grid.shape, float(rho)))

    def mass(self, grid: AtmosGrid):
        return float(np.sum(self.rho) * grid.cell_volume)


HeatingSupplier = Union[None, float, np.ndarray, Callable[[float], np.ndarray]]


@dataclass(frozen=True)
class AtmosParams:
    f: float = 1e-4
    R: float = R_DRY_AIR
    nu: float = 0.0
    Q_T: HeatingSupplier = None
    hydrostatic: bool = False

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError("R must be positive")
        if self.nu < 0:
            raise ValueError("nu must be non-negative")

    def heating(self, t, shape):
        q = self.Q_T
        if q is None:
            return 0.0
        if callable(q):
            q = q(t)
        q = np.asarray(q, dtype=float)
        return q if q.ndim == 0 else q.reshape(shape)


# -- stencil operators --------------------------------------------------------

def _ddx(field, axis, h, grid):
    """Centered first derivative along ``axis``.

    Axes 0, 1 (and 2 on a fully periodic grid) wrap around; on walled grids
    the top and bottom levels fall back to one-sided differences.
    """
    if axis < 2 or grid.vertical == "periodic":
        return (np.roll(field, -1, axis=axis) - np.roll(field, 1, axis=axis)) / (2.0 * h)
    out = np.empty_like(field)
    nz = field.shape[2]
    if nz == 1:
        out[...] = 0.0
        return out
    out[:, :, 1:-1] = (field[:, :, 2:] - field[:, :, :-2]) / (2.0 * h)
    out[:, :, 0] = (field[:, :, 1] - field[:, :, 0]) / h
    out[:, :, -1] = (field[:, :, -1] - field[:, :, -2]) / h
    return out


def grad(field, grid: AtmosGrid):
    """Gradient of a scalar field as a tuple ``(d/dx, d/dy, d/dz)``."""
    field = np.asarray(field, dtype=float).reshape(grid.shape)
    return tuple(_ddx(field, a, h, grid) for a, h in enumerate(grid.spacing))


def _flux_ddz(flux, h, grid):
    # normal flux mirrored with opposite sign beyond the walls
    if grid.vertical == "periodic":
        return _ddx(flux, 2, h, grid)
    padded = np.concatenate([-flux[:, :, :1], flux, -flux[:, :, -1:]], axis=2)
    return (padded[:, :, 2:] - padded[:, :, :-2]) / (2.0 * h)


def div(vec, grid: AtmosGrid, weighted_by=None):
    """Divergence of a 3-component vector field.

    With ``weighted_by=rho`` this is the flux form div(rho v), computed as the
    divergence of the product field so that its cell sum telescopes to zero.
    """
    comps = [np.asarray(c, dtype=float).reshape(grid.shape) for c in vec]
    if weighted_by is not None:
        w = np.asarray(weighted_by, dtype=float).reshape(grid.shape)
        comps = [w * c for c in comps]
    return (
        _ddx(comps[0], 0, grid.dx, grid)
        + _ddx(comps[1], 1, grid.dy, grid)
        + _flux_ddz(comps[2], grid.dz, grid)
    )


def laplacian(field, grid: AtmosGrid):
    """Standard 7-point Laplacian; zero-gradient ghost levels at walls."""
    out = np.zeros(grid.shape)
    for axis, h in enumerate(grid.spacing):
        if axis < 2 or grid.vertical == "periodic":
            out += (np.roll(field, -1, axis) - 2.0 * field + np.roll(field, 1, axis)) / (h * h)
        else:
            padded = np.concatenate([field[:, :, :1], field, field[:, :, -1:]], axis=2)
            out += (padded[:, :, 2:] - 2.0 * field + padded[:, :, :-2]) / (h * h)
    return out


def diagnose_pressure(rho, T, R=R_DRY_AIR):
    """Ideal gas law p = rho R T (Pa)."""
    return np.asarray(rho) * R * np.asarray(T)


def _advect(v, g):
    return v[0] * g[0] + v[1] * g[1] + v[2] * g[2]


def _tendencies(state: AtmosState, params: AtmosParams, grid: AtmosGrid, t, heating=None):
    v = (state.vx, state.vy, state.vz)
    p = diagnose_pressure(state.rho, state.T, params.R)
    gp = grad(p, grid)
    inv_rho = 1.0 / state.rho

    dvx = -_advect(v, grad(state.vx, grid)) + params.f * state.vy - inv_rho * gp[0]
    dvy = -_advect(v, grad(state.vy, grid)) - params.f * state.vx - inv_rho * gp[1]
    if params.hydrostatic:
        dvz = np.zeros(grid.shape)
    else:
        dvz = -_advect(v, grad(state.vz, grid)) - inv_rho * gp[2]
    if params.nu:
        dvx = dvx + params.nu * laplacian(state.vx, grid)
        dvy = dvy + params.nu * laplacian(state.vy, grid)
        if not params.hydrostatic:
            dvz = dvz + params.nu * laplacian(state.vz, grid)

    if heating is None:
        heating = params.heating(t, grid.shape)
    dT = -_advect(v, grad(state.T, grid)) + heating
    drho = -div(v, grid, weighted_by=state.rho)

    out = (dvx, dvy, dvz, dT, drho)
    for name, arr in zip(FIELDS, out):
        if not np.all(np.isfinite(arr)):
            raise BlowUpError(f"non-finite tendency in field {name}")
    return out


def atmos_rhs(state: AtmosState, params: AtmosParams, grid: AtmosGrid, t=0.0, heating=None):
    """Packed 5N time derivative ``[dvx | dvy | dvz | dT | drho]``."""
    return np.concatenate([np.ravel(a) for a in _tendencies(state, params, grid, t, heating)])


def cfl_number(state: AtmosState, grid: AtmosGrid, dt):
    """max over cells of dt * (|vx|/dx + |vy|/dy + |vz|/dz)."""
    c = np.abs(state.vx) / grid.dx + np.abs(state.vy) / grid.dy + np.abs(state.vz) / grid.dz
    return float(dt * np.max(c))


def atmos_step_euler(state: AtmosState, params: AtmosParams, grid: AtmosGrid, dt, t=0.0):
    """One forward-Euler update of the full state.

    Warns with :class:`CflWarning` when the Courant number exceeds 1 and
    raises :class:`PositivityError` if density or temperature stop being
    positive.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfl = cfl_number(state, grid, dt)
    if cfl > 1.0:
        warnings.warn(f"CFL number {cfl:.3g} exceeds 1 at t={t:g}", CflWarning, stacklevel=2)
    x = state.pack() + dt * atmos_rhs(state, params, grid, t)
    N = grid.size
    if not np.all(np.isfinite(x)):
        raise BlowUpError(f"non-finite state after step at t={t:g}")
    if np.any(x[3 * N:] <= 0):
        which = "T" if np.any(x[3 * N:4 * N] <= 0) else "rho"
        raise PositivityError(f"{which} became non-positive after step at t={t:g}; reduce dt")
    return AtmosState.unpack(x, grid)


# -- state-space wrapper --------------------------------------------------------

SENSOR_KINDS = ("vx", "vy", "vz", "T", "rho", "p")


def as_state_space(params: AtmosParams, grid: AtmosGrid, sensors=None) -> StateSpaceModel:
    """Wrap the core as a StateSpaceModel.

    The input vector has one heating rate (K/s) per cell and replaces
    ``params.Q_T`` when non-empty. ``sensors`` is a list of
    ``(kind, (i, j, k))`` point measurements with kind in
    ``vx, vy, vz, T, rho, p``; ``None`` outputs the full state.
    """
    N = grid.size

    def rhs(x, u, w, theta, c, t):
        state = _unpack_unchecked(x, grid)
        heating = None if u is None or np.size(u) == 0 else np.reshape(u, grid.shape)
        return atmos_rhs(state, params, grid, t, heating=heating)

    output, output_dim = None, None
    if sensors is not None:
        picks = []
        for kind, (i, j, k) in sensors:
            if kind not in SENSOR_KINDS:
                raise ValueError(f"unknown sensor kind {kind!r}")
            if not (0 <= i < grid.nx and 0 <= j < grid.ny and 0 <= k < grid.nz):
                raise ValueError(f"sensor cell {(i, j, k)} outside grid")
            picks.append((kind, (i * grid.ny + j) * grid.nz + k))

        def output(x, u, w, theta, c, t):
            x = np.asarray(x)
            y = []
            for kind, flat in picks:
                if kind == "p":
                    y.append(x[4 * N + flat] * params.R * x[3 * N + flat])
                else:
                    y.append(x[FIELDS.index(kind) * N + flat])
            return np.array(y)

        output_dim = len(picks)

    return StateSpaceModel(
        state_dim=5 * N, input_dim=N, disturbance_dim=0, rhs=rhs,
        output=output, output_dim=output_dim, constants=(params, grid), name="atmos",
    )


def _unpack_unchecked(x, grid):
    # integrators screen finiteness themselves; skip AtmosState validation
    N = grid.size
    x = np.asarray(x, dtype=float)
    parts = [x[i * N:(i + 1) * N].reshape(grid.shape) for i in range(5)]
    obj = object.__new__(AtmosState)
    for name, arr in zip(FIELDS, parts):
        object.__setattr__(obj, name, arr)
    return obj


# -- snapshot I/O --------------------------------------------------------------

SNAPSHOT_COLUMNS = ("i", "j", "k", "vx", "vy", "vz", "T", "rho")


def write_snapshot(path, state: AtmosState, grid: AtmosGrid):
    """Plain CSV with one row per cell: i, j, k, vx, vy, vz, T, rho."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SNAPSHOT_COLUMNS)
        for i in range(grid.nx):
            for j in range(grid.ny):
                for k in range(grid.nz):
                    writer.writerow(
                        [i, j, k] + [repr(float(getattr(state, f)[i, j, k])) for f in FIELDS]
                    )


def read_snapshot(path, grid: AtmosGrid) -> AtmosState:
    arrays = {f: np.full(grid.shape, np.nan) for f in FIELDS}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SNAPSHOT_COLUMNS:
            raise ValueError(f"unexpected snapshot header {reader.fieldnames}")
        for row in reader:
            idx = (int(row["i"]), int(row["j"]), int(row["k"]))
            for f in FIELDS:
                arrays[f][idx] = float(row[f])
    return AtmosState(*(arrays[f] for f in FIELDS))
