import numpy as np
import pytest

from climctl.atmosphere import AtmosGrid, AtmosState
from climctl.estimation import LinearGaussianSpec

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, title, passed, detail)."""

    def record(number, title, passed, detail=""):
        _ACCEPTANCE.append((number, title, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:>2}. {title}: {detail}")


def linear_testbed():
    """4-state, 2-sensor linear-Gaussian system (two damped rotations, one coupling)."""
    th = 0.3
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    A = np.zeros((4, 4))
    A[:2, :2] = 0.95 * rot
    A[2:, 2:] = 0.9 * rot.T
    A[0, 2] = 0.1
    C = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return LinearGaussianSpec(A, np.zeros((4, 1)), C, 0.1 * np.eye(4), 0.5 * np.eye(2))


def smooth_random_state(grid: AtmosGrid, rng, wind=5.0, vz=0.01):
    """Sum of low-wavenumber periodic modes around a resting 280 K / 1 kg m^-3 state."""
    x, y, z = grid.coordinates()
    L = (grid.nx * grid.dx, grid.ny * grid.dy, grid.nz * grid.dz)

    def field(amp):
        out = np.zeros(grid.shape)
        for _ in range(3):
            k = rng.integers(0, 3, size=3)
            phase = rng.uniform(0, 2 * np.pi)
            arg = 2 * np.pi * (k[0] * x / L[0] + k[1] * y / L[1] + k[2] * z / L[2]) + phase
            out += amp * rng.uniform(-1, 1) * np.cos(arg)
        return out / 3.0

    return AtmosState(field(wind), field(wind), field(vz), 280.0 + field(5.0), 1.0 + field(0.05))
