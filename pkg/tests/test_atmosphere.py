import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from climctl.atmosphere import (
    FIELDS,
    AtmosGrid,
    AtmosParams,
    AtmosState,
    CflWarning,
    PositivityError,
    as_state_space,
    atmos_rhs,
    atmos_step_euler,
    cfl_number,
    diagnose_pressure,
    div,
    laplacian,
    read_snapshot,
    write_snapshot,
)
from climctl.core import BlowUpError, integrate_rk4

from conftest import smooth_random_state


def random_state(grid, seed):
    rng = np.random.default_rng(seed)
    s = grid.shape
    return AtmosState(rng.normal(0, 5, s), rng.normal(0, 5, s), rng.normal(0, 0.1, s),
                      rng.uniform(270, 300, s), rng.uniform(0.9, 1.3, s))


def brute_tendencies(state, params, grid):
    """Cell-by-cell reference implementation written with explicit loops."""
    nx, ny, nz = grid.shape
    h = grid.spacing
    wall = grid.vertical == "wall"
    p = state.rho * params.R * state.T
    out = {f: np.zeros(grid.shape) for f in FIELDS}

    def nb(idx, axis, step):
        idx = list(idx)
        n = grid.shape[axis]
        idx[axis] = (idx[axis] + step) % n
        return tuple(idx)

    def deriv(F, c, axis):
        if axis == 2 and wall:
            k = c[2]
            if nz == 1:
                return 0.0
            if k == 0:
                return (F[nb(c, 2, 1)] - F[c]) / h[2]
            if k == nz - 1:
                return (F[c] - F[nb(c, 2, -1)]) / h[2]
        return (F[nb(c, axis, 1)] - F[nb(c, axis, -1)]) / (2 * h[axis])

    def flux_deriv(F, c):
        if not wall:
            return deriv(F, c, 2)
        k = c[2]
        up = F[nb(c, 2, 1)] if k < nz - 1 else -F[c]
        dn = F[nb(c, 2, -1)] if k > 0 else -F[c]
        return (up - dn) / (2 * h[2])

    def lap(F, c):
        total = 0.0
        for axis in range(3):
            if axis == 2 and wall:
                k = c[2]
                up = F[nb(c, 2, 1)] if k < nz - 1 else F[c]
                dn = F[nb(c, 2, -1)] if k > 0 else F[c]
            else:
                up, dn = F[nb(c, axis, 1)], F[nb(c, axis, -1)]
            total += (up - 2 * F[c] + dn) / h[axis] ** 2
        return total

    v = (state.vx, state.vy, state.vz)
    mom = [state.rho * comp for comp in v]
    for c in np.ndindex(grid.shape):
        adv = lambda F: sum(v[a][c] * deriv(F, c, a) for a in range(3))  # noqa: E731
        out["vx"][c] = -adv(state.vx) + params.f * state.vy[c] - deriv(p, c, 0) / state.rho[c]
        out["vy"][c] = -adv(state.vy) - params.f * state.vx[c] - deriv(p, c, 1) / state.rho[c]
        if not params.hydrostatic:
            out["vz"][c] = -adv(state.vz) - deriv(p, c, 2) / state.rho[c]
        if params.nu:
            out["vx"][c] += params.nu * lap(state.vx, c)
            out["vy"][c] += params.nu * lap(state.vy, c)
            if not params.hydrostatic:
                out["vz"][c] += params.nu * lap(state.vz, c)
        out["T"][c] = -adv(state.T)
        out["rho"][c] = -(deriv(mom[0], c, 0) + deriv(mom[1], c, 1) + flux_deriv(mom[2], c))
    return np.concatenate([out[f].ravel() for f in FIELDS])


@pytest.mark.parametrize("shape", [(2, 2, 2), (3, 3, 4), (4, 2, 3)])
@pytest.mark.parametrize("vertical", ["wall", "periodic"])
@pytest.mark.parametrize("nu,hydro", [(0.0, False), (1e3, False), (1e3, True)])
def test_rhs_matches_cell_by_cell_reference(shape, vertical, nu, hydro):
    grid = AtmosGrid(*shape, 1e4, 2e4, 5e2, vertical=vertical)
    params = AtmosParams(f=1e-4, nu=nu, hydrostatic=hydro)
    state = random_state(grid, sum(shape))
    assert np.allclose(atmos_rhs(state, params, grid), brute_tendencies(state, params, grid),
                       rtol=1e-12, atol=1e-14)


def test_resting_isothermal_state_is_steady():
    for vertical in ("wall", "periodic"):
        grid = AtmosGrid(4, 4, 4, 1e5, 1e5, 1e3, vertical=vertical)
        rhs = atmos_rhs(AtmosState.resting(grid), AtmosParams(), grid)
        assert np.all(rhs == 0.0)


def test_uniform_heating():
    grid = AtmosGrid(2, 2, 2, 1e5, 1e5, 1e3)
    rhs = atmos_rhs(AtmosState.resting(grid), AtmosParams(Q_T=1e-5), grid)
    N = grid.size
    assert np.all(rhs[3 * N:4 * N] == 1e-5) and np.all(rhs[:3 * N] == 0.0)
    q = np.arange(N, dtype=float) * 1e-6
    rhs = atmos_rhs(AtmosState.resting(grid), AtmosParams(Q_T=lambda t: q), grid)
    assert np.array_equal(rhs[3 * N:4 * N], q)


@pytest.mark.parametrize("vertical", ["wall", "periodic"])
def test_mass_tendency_sums_to_zero(vertical):
    grid = AtmosGrid(5, 4, 6, 1e4, 1e4, 1e3, vertical=vertical)
    for seed in range(5):
        state = random_state(grid, seed)
        drho = atmos_rhs(state, AtmosParams(), grid)[4 * grid.size:]
        assert abs(drho.sum()) <= 1e-12 * np.abs(drho).sum()


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 5), st.integers(2, 5), st.integers(2, 5), st.integers(0, 2 ** 32 - 1))
def test_divergence_of_flux_telescopes(nx, ny, nz, seed):
    grid = AtmosGrid(nx, ny, nz, 1.0, 2.0, 3.0)
    rng = np.random.default_rng(seed)
    vec = [rng.normal(size=grid.shape) for _ in range(3)]
    rho = rng.uniform(0.5, 1.5, grid.shape)
    assert abs(div(vec, grid, weighted_by=rho).sum()) < 1e-10


def test_laplacian_of_constant_is_zero():
    grid = AtmosGrid(3, 3, 3, 1.0, 1.0, 1.0)
    assert np.allclose(laplacian(np.full(grid.shape, 4.0), grid), 0.0)


def test_passive_advection_modal_speed():
    # negligible R makes T a passive tracer; centered differences move the
    # mode at U sin(k dx) / (k dx) without changing its amplitude
    nx, U, dx = 16, 10.0, 1e4
    grid = AtmosGrid(nx, 2, 2, dx, dx, 1e3, vertical="periodic")
    x, _, _ = grid.coordinates()
    k = 2 * np.pi * 2 / (nx * dx)
    state = AtmosState(np.full(grid.shape, U), np.zeros(grid.shape), np.zeros(grid.shape),
                       280.0 + np.cos(k * x), np.ones(grid.shape))
    params = AtmosParams(f=0.0, R=1e-12)
    dt, n = 50.0, 400
    traj = integrate_rk4(as_state_space(params, grid), state.pack(), None, dt, n)
    T = traj.final_state[3 * grid.size:4 * grid.size].reshape(grid.shape)
    c = U * np.sin(k * dx) / (k * dx)
    expected = 280.0 + np.cos(k * (x - c * n * dt))
    assert np.max(np.abs(T - expected)) < 1e-6


def test_hydrostatic_switch_freezes_vertical_wind():
    grid = AtmosGrid(3, 3, 4, 1e4, 1e4, 1e3)
    state = random_state(grid, 11)
    N = grid.size
    free = atmos_rhs(state, AtmosParams(), grid)
    frozen = atmos_rhs(state, AtmosParams(hydrostatic=True), grid)
    assert np.all(frozen[2 * N:3 * N] == 0.0) and np.any(free[2 * N:3 * N] != 0.0)
    assert np.array_equal(frozen[:2 * N], free[:2 * N])


def test_euler_step_conserves_mass_with_walls():
    grid = AtmosGrid(8, 8, 6, 1e5, 1e5, 1e3, vertical="wall")
    state = smooth_random_state(grid, np.random.default_rng(5))
    m0 = state.mass(grid)
    for _ in range(50):
        state = atmos_step_euler(state, AtmosParams(), grid, 0.1)
    assert abs(state.mass(grid) - m0) <= 1e-12 * m0


def test_cfl_warning_and_positivity():
    grid = AtmosGrid(2, 2, 2, 1e3, 1e3, 1e3)
    state = AtmosState.resting(grid)
    state = AtmosState(np.full(grid.shape, 50.0), state.vy, state.vz, state.T, state.rho)
    assert cfl_number(state, grid, 100.0) == pytest.approx(5.0)
    with pytest.warns(CflWarning):
        atmos_step_euler(state, AtmosParams(), grid, 100.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        atmos_step_euler(state, AtmosParams(), grid, 1.0)

    # outflow on both sides of a nearly empty cell drives its density negative
    grid = AtmosGrid(4, 2, 2, 1e3, 1e3, 1e3)
    rho = np.ones(grid.shape)
    rho[0] = 1e-3
    vx = np.zeros(grid.shape)
    vx[1], vx[3] = 1000.0, -1000.0
    z = np.zeros(grid.shape)
    bad = AtmosState(vx, z, z, np.full(grid.shape, 300.0), rho)
    with pytest.raises(PositivityError, match="rho"):
        atmos_step_euler(bad, AtmosParams(), grid, 0.5)


def test_state_validation():
    grid = AtmosGrid(2, 2, 2, 1.0, 1.0, 1.0)
    z = np.zeros(grid.shape)
    with pytest.raises(PositivityError):
        AtmosState(z, z, z, z + 280.0, z)
    with pytest.raises(ValueError):
        AtmosState(z, z, z, z + 280.0, np.ones(3))
    with pytest.raises(ValueError):
        AtmosGrid(2, 2, 1, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        AtmosState.unpack(np.zeros(7), grid)


def test_blow_up_names_field():
    grid = AtmosGrid(2, 2, 2, 1.0, 1.0, 1.0)
    state = AtmosState.resting(grid)
    with pytest.raises(BlowUpError, match="vx|vy|vz|T|rho"):
        atmos_rhs(state, AtmosParams(Q_T=np.inf), grid)


def test_pack_unpack_and_layout():
    grid = AtmosGrid(2, 3, 4, 1.0, 1.0, 1.0)
    state = random_state(grid, 3)
    back = AtmosState.unpack(state.pack(), grid)
    for f in FIELDS:
        assert np.array_equal(getattr(back, f), getattr(state, f))
    flat = (1 * 3 + 2) * 4 + 3
    assert state.pack()[3 * grid.size + flat] == state.T[1, 2, 3]


def test_sensors():
    grid = AtmosGrid(2, 2, 2, 1.0, 1.0, 1.0)
    state = random_state(grid, 4)
    model = as_state_space(AtmosParams(), grid, sensors=[("T", (1, 0, 1)), ("p", (0, 1, 0))])
    y = model.h(state.pack(), model.zero_input(), model.zero_disturbance())
    p = diagnose_pressure(state.rho, state.T)
    assert y[0] == state.T[1, 0, 1] and y[1] == pytest.approx(p[0, 1, 0])
    with pytest.raises(ValueError):
        as_state_space(AtmosParams(), grid, sensors=[("q", (0, 0, 0))])
    with pytest.raises(ValueError):
        as_state_space(AtmosParams(), grid, sensors=[("T", (2, 0, 0))])


def test_snapshot_round_trip(tmp_path):
    grid = AtmosGrid(3, 2, 2, 1.0, 1.0, 1.0)
    state = random_state(grid, 9)
    path = tmp_path / "snap.csv"
    write_snapshot(path, state, grid)
    assert path.read_text().splitlines()[0] == "i,j,k,vx,vy,vz,T,rho"
    back = read_snapshot(path, grid)
    for f in FIELDS:
        assert np.array_equal(getattr(back, f), getattr(state, f))
