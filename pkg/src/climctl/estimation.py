"""State and parameter estimation: Kalman and ensemble Kalman filters,
empirical observability Gramians, and EBM calibration by Gauss-Newton.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .core import BlowUpError, constant_forcing, integrate, integrate_batch
from .ebm import Ebm0dParams, ebm0d_model


class FilterSingularityError(np.linalg.LinAlgError):
    pass


# -- Kalman filter ----------------------------------------------------------------

@dataclass(frozen=True)
class LinearGaussianSpec:
    """x[k+1] = A x[k] + B u[k] + q,  y[k] = C_obs x[k] + r,
    with q ~ N(0, Q) and r ~ N(0, R_obs)."""

    A: np.ndarray
    B: np.ndarray
    C_obs: np.ndarray
    Q: np.ndarray
    R_obs: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("A must be square")
        B = np.asarray(self.B, dtype=float).reshape(n, -1)
        C = np.atleast_2d(np.asarray(self.C_obs, dtype=float))
        if C.shape[1] != n:
            raise ValueError("C_obs must have one column per state")
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R_obs, dtype=float))
        if Q.shape != (n, n) or R.shape != (C.shape[0],) * 2:
            raise ValueError("covariance shapes do not match A and C_obs")
        for name, M in (("Q", Q), ("R_obs", R)):
            if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
                raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(Q)[0] < -1e-12 * max(1.0, np.abs(Q).max()):
            raise ValueError("Q must be positive semidefinite")
        for name, val in (("A", A), ("B", B), ("C_obs", C), ("Q", Q), ("R_obs", R)):
            object.__setattr__(self, name, val)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.C_obs.shape[0]


def kalman_predict(x, P, spec: LinearGaussianSpec, u=None):
    x = spec.A @ x
    if u is not None and spec.B.size:
        x = x + spec.B @ np.atleast_1d(u)
    P = spec.A @ P @ spec.A.T + spec.Q
    return x, 0.5 * (P + P.T)


def kalman_update(x, P, spec: LinearGaussianSpec, y):
    C, R = spec.C_obs, spec.R_obs
    S = C @ P @ C.T + R
    try:
        if np.linalg.cond(S) > 1e14:
            raise np.linalg.LinAlgError
        K = np.linalg.solve(S, C @ P).T
    except np.linalg.LinAlgError:
        raise FilterSingularityError("innovation covariance is not invertible") from None
    x = x + K @ (np.atleast_1d(y) - C @ x)
    IKC = np.eye(spec.n) - K @ C
    P = IKC @ P @ IKC.T + K @ R @ K.T  # Joseph form
    return x, 0.5 * (P + P.T)


def kalman_step(x, P, spec: LinearGaussianSpec, u=None, y=None):
    """Predict with (A, B, Q), then update on ``y`` (skipped when None)."""
    x, P = kalman_predict(np.asarray(x, float), np.asarray(P, float), spec, u)
    if y is None:
        return x, P
    return kalman_update(x, P, spec, y)


# -- ensemble Kalman filter -----------------------------------------------------

@dataclass(frozen=True)
class Ensemble:
    members: np.ndarray  # (N_e, n)

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.members, dtype=float))
        if m.shape[0] < 2:
            raise ValueError("an ensemble needs at least 2 members")
        object.__setattr__(self, "members", m)

    @property
    def size(self):
        return self.members.shape[0]

    @property
    def mean(self):
        return self.members.mean(axis=0)

    @property
    def covariance(self):
        return np.atleast_2d(np.cov(self.members, rowvar=False))


def enkf_step(ens, obs_op, R_obs, y, rng_seed=None) -> Ensemble:
    """Perturbed-observation EnKF analysis.

    The gain comes from ensemble anomaly covariances; each member
    assimilates ``y`` plus its own N(0, R_obs) draw. An ensemble with no
    spread has zero gain, so the analysis equals the forecast.
    """
    if not isinstance(ens, Ensemble):
        ens = Ensemble(ens)
    X = ens.members
    n_e = X.shape[0]
    HX = np.array([np.atleast_1d(obs_op(x)) for x in X])
    R = np.atleast_2d(np.asarray(R_obs, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if R.shape != (y.size, y.size) or HX.shape[1] != y.size:
        raise ValueError("observation, operator and R_obs dimensions disagree")

    Xa = X - X.mean(axis=0)
    Ya = HX - HX.mean(axis=0)
    Pxy = Xa.T @ Ya / (n_e - 1)
    Pyy = Ya.T @ Ya / (n_e - 1)
    try:
        K = np.linalg.solve(Pyy + R, Pxy.T).T
    except np.linalg.LinAlgError:
        raise FilterSingularityError("innovation covariance is not invertible") from None

    rng = np.random.default_rng(rng_seed)
    perturbed = y + rng.multivariate_normal(np.zeros(y.size), R, size=n_e, method="cholesky")
    return Ensemble(X + (perturbed - HX) @ K.T)


def enkf_forecast_linear(ens: Ensemble, spec: LinearGaussianSpec, u=None, rng_seed=None):
    """Propagate every member through the linear model with process noise."""
    rng = np.random.default_rng(rng_seed)
    X = ens.members @ spec.A.T
    if u is not None and spec.B.size:
        X = X + spec.B @ np.atleast_1d(u)
    noise = rng.multivariate_normal(np.zeros(spec.n), spec.Q, size=ens.size, method="eigh")
    return Ensemble(X + noise)


# -- empirical observability Gramian --------------------------------------------

@dataclass
class GramianReport:
    W_o: np.ndarray
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns, matching eigenvalues
    rank: int
    unobservable_basis: np.ndarray  # columns
    rank_tol: float

    def to_dict(self):
        return {
            "eigenvalues": self.eigenvalues.tolist(),
            "rank": self.rank,
            "rank_tol": self.rank_tol,
            "unobservable_basis": self.unobservable_basis.T.tolist(),
            "W_o": self.W_o.tolist(),
        }


def gramian_report(W, rank_tol=1e-8):
    W = 0.5 * (W + W.T)
    vals, vecs = np.linalg.eigh(W)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    top = vals[0] if vals.size else 0.0
    observable = vals > rank_tol * top if top > 0 else np.zeros(vals.size, bool)
    return GramianReport(W, vals, vecs, int(np.sum(observable)), vecs[:, ~observable], rank_tol)


def empirical_obs_gramian(model, x_star, horizon, dt, eps=None, forcing=None, method="euler",
                          rank_tol=1e-8) -> GramianReport:
    """W_o = sum_{k=0..horizon} D(k)^T D(k) dt, where column i of D(k) is
    (y_k(x* + eps_i e_i) - y_k(x* - eps_i e_i)) / (2 eps_i).

    Default ``eps_i = 1e-4 * (1 + |x*_i|)``. ``rank_tol`` is relative to the
    largest eigenvalue.
    """
    x_star = np.asarray(x_star, dtype=float).reshape(-1)
    n = x_star.size
    eps = 1e-4 * (1.0 + np.abs(x_star)) if eps is None else np.broadcast_to(np.asarray(eps, float), (n,))
    if forcing is None:
        forcing = constant_forcing(model.zero_input(), model.zero_disturbance())

    starts = np.empty((2 * n, n))
    for i in range(n):
        starts[2 * i] = x_star
        starts[2 * i + 1] = x_star
        starts[2 * i, i] += eps[i]
        starts[2 * i + 1, i] -= eps[i]

    if model.vectorized:
        times, X = integrate_batch(model, starts, forcing, dt, horizon, method=method)
        bad = ~np.all(np.isfinite(X), axis=(0, 2))
        if np.any(bad):
            raise BlowUpError(f"perturbed trajectory blew up along axis {int(np.argmax(bad)) // 2}")
        Y = np.stack([
            np.stack([model.h(X[k, r], *forcing(t)[:2], None, t) for r in range(2 * n)])
            for k, t in enumerate(times)
        ])  # (steps, 2n, p)
    else:
        runs = []
        for r in range(2 * n):
            try:
                runs.append(integrate(model, starts[r], forcing, dt, horizon, method=method).outputs)
            except BlowUpError as exc:
                raise BlowUpError(f"perturbed trajectory blew up along axis {r // 2}: {exc}") from exc
        Y = np.stack(runs, axis=1)

    D = (Y[:, 0::2, :] - Y[:, 1::2, :]) / (2.0 * eps[None, :, None])  # (steps, n, p)
    W = dt * np.einsum("kip,kjp->ij", D, D)
    return gramian_report(W, rank_tol)


# -- calibration ------------------------------------------------------------------

@dataclass
class CalibrationResult:
    alpha: float
    epsilon: float
    residual: float  # RMS, Kelvin
    converged: bool
    iterations: int


def _simulate_sets(p_known, thetas, T0, dt, n_steps, u, w, method):
    thetas = np.asarray(thetas, dtype=float)
    p = replace(p_known, alpha=thetas[:, :1], epsilon=thetas[:, 1:2])
    model = ebm0d_model(p)
    x0 = np.full((len(thetas), 1), float(T0))
    _, X = integrate_batch(model, x0, constant_forcing([u], [w]), dt, n_steps, method=method)
    return X[:, :, 0]  # (steps, sets)


def calibrate_ebm(observed, guess, p_known: Ebm0dParams, dt, u=0.0, w=0.0, method="euler",
                  max_iter=100, fd_step=1e-6, tol=1e-12) -> CalibrationResult:
    """Fit (alpha, epsilon) to an observed temperature record.

    ``observed`` is a Trajectory (first state column is T) or a pair
    ``(times, T)``. The model starts from the first observation and is
    sampled at the observation times, which must fall on the dt grid.
    Gauss-Newton with finite-difference sensitivities, iterates projected
    onto [0, 1]^2 and step halving (up to 20 times) until the cost drops.
    """
    if hasattr(observed, "states"):
        times, T_obs = observed.times, observed.states[:, 0]
    else:
        times, T_obs = (np.asarray(a, dtype=float) for a in observed)
    times, T_obs = np.asarray(times, float), np.asarray(T_obs, float).reshape(-1)
    if len(T_obs) < 3:
        raise ValueError("calibration needs at least 3 observations")
    theta = np.asarray(guess, dtype=float)
    if np.any(theta < 0) or np.any(theta > 1):
        raise ValueError("guess must lie in [0, 1]^2")
    offsets = (times - times[0]) / dt
    idx = np.rint(offsets).astype(int)
    if np.any(np.abs(offsets - idx) > 1e-6):
        raise ValueError("observation times must lie on the dt grid")
    n_steps = int(idx[-1])
    T0 = T_obs[0]

    def residuals(sets):
        sims = _simulate_sets(p_known, sets, T0, dt, n_steps, u, w, method)
        return sims[idx].T - T_obs  # (sets, n_obs)

    def cost(r):
        return float(r @ r)

    r = residuals(theta[None])[0]
    c = cost(r)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        probes = []
        spans = []
        for j in range(2):
            hi, lo = theta.copy(), theta.copy()
            hi[j] = min(theta[j] + fd_step, 1.0)
            lo[j] = max(theta[j] - fd_step, 0.0)
            probes += [hi, lo]
            spans.append(hi[j] - lo[j])
        R = residuals(np.array(probes))
        J = np.column_stack([(R[2 * j] - R[2 * j + 1]) / spans[j] for j in range(2)])
        delta = np.linalg.lstsq(J, -r, rcond=None)[0]
        if not np.any(delta):
            converged = True
            break
        lam = 1.0
        accepted = False
        for _ in range(21):
            cand = np.clip(theta + lam * delta, 0.0, 1.0)
            r_c = residuals(cand[None])[0]
            c_c = cost(r_c)
            if np.isfinite(c_c) and c_c < c:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            converged = True
            break
        moved = np.max(np.abs(cand - theta))
        small_gain = c - c_c <= tol * max(c, 1e-300)
        theta, r, c = cand, r_c, c_c
        if moved <= 1e-13 or small_gain:
            converged = True
            break
    rms = float(np.sqrt(c / len(r)))
    return CalibrationResult(float(theta[0]), float(theta[1]), rms, converged, it)


# -- observation records --------------------------------------------------------

OBS_COLUMNS = ("time", "sensor_id", "value")


def write_observations(path, times, values, sensor_ids=None):
    """CSV rows (time, sensor_id, value) for a (n_times, n_sensors) array."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    sensor_ids = list(sensor_ids) if sensor_ids is not None else [str(j) for j in range(values.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OBS_COLUMNS)
        for t, row in zip(times, values):
            for sid, v in zip(sensor_ids, row):
                writer.writerow([repr(float(t)), sid, repr(float(v))])


def read_observations(path):
    """Return ``(times, sensor_ids, values)`` with values shaped (n_times, n_sensors);
    missing entries are NaN."""
    rows = []
    with open(path, newline="") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        reader = csv.DictReader(lines)
        if tuple(reader.fieldnames or ()) != OBS_COLUMNS:
            raise ValueError(f"observation CSV must have columns {OBS_COLUMNS}, got {reader.fieldnames}")
        for line_no, row in enumerate(reader, start=2):
            try:
                rows.append((float(row["time"]), row["sensor_id"], float(row["value"])))
            except (TypeError, ValueError):
                raise ValueError(f"{path}: line {line_no}: malformed observation row") from None
    times = sorted({r[0] for r in rows})
    sensors = list(dict.fromkeys(r[1] for r in rows))
    t_index = {t: i for i, t in enumerate(times)}
    s_index = {s: j for j, s in enumerate(sensors)}
    values = np.full((len(times), len(sensors)), np.nan)
    for t, s, v in rows:
        values[t_index[t], s_index[s]] = v
    return np.array(times), sensors, values
