"""Command-line scenario runner.

    climctl <subcommand> --config PATH [--seed U64] [--out DIR] [--quiet]

Exit codes: 0 success, 2 configuration/validation error, 3 numerical
blow-up. Every run writes ``manifest.json`` next to its outputs; passing
that manifest back as ``--config`` replays the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .atmosphere import (
    AtmosGrid,
    AtmosParams,
    AtmosState,
    PositivityError,
    as_state_space,
    atmos_step_euler,
    write_snapshot,
)
from .config import COMMANDS, ConfigError, ScenarioConfig, _line_of, load_config
from .control import (
    BoundsBox,
    PiGains,
    SaiSurrogate,
    closed_loop_simulate,
    envelope_containment,
    plan_sai_shares,
    reachable_envelope,
)
from .core import BlowUpError, constant_forcing, integrate, integrate_batch, table_forcing
from .ebm import (
    Ebm0dParams,
    Ebm2dParams,
    GridField2d,
    ParameterDomainError,
    ebm0d_model,
    ebm2d_model,
)
from .estimation import (
    Ensemble,
    calibrate_ebm,
    empirical_obs_gramian,
    enkf_step,
    read_observations,
    write_observations,
)
from .uq import NoiseSpec, ebm0d_factory, monte_carlo, write_envelope_csv

log = logging.getLogger("climctl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# -- output helpers -----------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def write_table(path, columns, units, rows):
    """CSV with a ``#`` unit comment line, a header row and repr-formatted floats."""
    with open(path, "w", newline="") as fh:
        fh.write("# units: " + ", ".join(f"{c}={u}" for c, u in zip(columns, units)) + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- model builders --------------------------------------------------------------

def _config_error(exc, cfg, key=None):
    return ConfigError(str(exc), _line_of(cfg.source, key) if key else None, cfg.path)


def build_ebm0d(cfg: ScenarioConfig):
    sec = cfg.section("ebm0d")
    try:
        p = Ebm0dParams(
            C=float(sec["C_j_per_k_m2"]), S=float(sec["S_w_per_m2"]), alpha=float(sec["alpha"]),
            epsilon=float(sec["epsilon"]), sigma=float(sec["sigma_w_per_m2_k4"]),
            geometric_factor=float(sec["geometric_factor"]),
        )
    except ParameterDomainError as exc:
        raise _config_error(exc, cfg) from None
    return p, np.array([float(sec["T0_k"])])


def _cell_values(value, size, name, cfg):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(size, float(arr))
    arr = arr.reshape(-1)
    if arr.size != size:
        raise _config_error(f"{name} must be a scalar or have {size} entries", cfg, name)
    return arr


def build_ebm2d(cfg: ScenarioConfig):
    sec = cfg.section("ebm2d")
    m, n = int(sec["rows"]), int(sec["cols"])
    size = m * n

    def field(key):
        return GridField2d(m, n, _cell_values(sec[key], size, key, cfg))

    try:
        p = Ebm2dParams(
            m=m, n=n, C=field("C_j_per_k_m2"), S=field("S_w_per_m2"), alpha=field("alpha"),
            epsilon=field("epsilon"), kappa=float(sec["kappa_w_per_m2_k"]),
            boundary=sec["boundary"], sigma=float(sec["sigma_w_per_m2_k4"]),
        )
        model = ebm2d_model(p, sensors=sec["sensors"])
    except ValueError as exc:
        raise _config_error(exc, cfg) from None
    return p, model, _cell_values(sec["T0_k"], size, "T0_k", cfg)


def build_atmos(cfg: ScenarioConfig):
    sec = cfg.section("atmos")
    try:
        grid = AtmosGrid(int(sec["nx"]), int(sec["ny"]), int(sec["nz"]), float(sec["dx_m"]),
                         float(sec["dy_m"]), float(sec["dz_m"]), vertical=sec["vertical"])
        params = AtmosParams(f=float(sec["f_per_s"]), R=float(sec["R_j_per_kg_k"]),
                             nu=float(sec["nu_m2_per_s"]), Q_T=None,
                             hydrostatic=bool(sec["hydrostatic"]))
        x, _, _ = grid.coordinates()
        Lx = grid.nx * grid.dx
        T = float(sec["T_k"]) + float(sec["T_perturbation_k"]) * np.sin(2 * np.pi * x / Lx)
        shape = grid.shape
        state = AtmosState(
            np.full(shape, float(sec["vx_m_per_s"])), np.full(shape, float(sec["vy_m_per_s"])),
            np.zeros(shape) if params.hydrostatic else np.full(shape, float(sec["vz_m_per_s"])),
            T, np.full(shape, float(sec["rho_kg_per_m3"])),
        )
        sensors = [(s[0], (int(s[1]), int(s[2]), int(s[3]))) for s in sec["sensors"]]
        model = as_state_space(params, grid, sensors=sensors)
    except (ValueError, TypeError, IndexError) as exc:
        raise _config_error(exc, cfg) from None
    return grid, params, state, model, sensors


def build_model(cfg: ScenarioConfig):
    """Return (model, x0, state_names, state_units)."""
    kind = cfg.model
    if kind == "ebm0d":
        p, x0 = build_ebm0d(cfg)
        return ebm0d_model(p), x0, ["T_k"], ["K"]
    if kind == "ebm2d":
        p, model, x0 = build_ebm2d(cfg)
        return model, x0, [f"T{i}_k" for i in range(x0.size)], ["K"] * x0.size
    grid, params, state, model, _ = build_atmos(cfg)
    return model, state.pack(), None, None


def build_forcing(cfg: ScenarioConfig, model, u=None, w=None):
    sec = cfg.section("forcing")
    u = sec["u"] if u is None else u
    w = sec["w"] if w is None else w
    times = sec["times_s"]

    def expand(value, dim, name):
        if dim == 0:
            return None if times is not None else np.zeros(0)
        arr = np.asarray(value, dtype=float)
        if times is None:
            return _cell_values(arr, dim, name, cfg)
        arr = arr.reshape(len(times), -1)
        if arr.shape[1] == 1 and dim > 1:
            arr = np.repeat(arr, dim, axis=1)
        if arr.shape[1] != dim:
            raise _config_error(f"forcing.{name} rows must have {dim} entries", cfg, name)
        return arr

    try:
        if times is None:
            return constant_forcing(expand(u, model.input_dim, "u"), expand(w, model.disturbance_dim, "w"))
        return table_forcing(times, expand(u, model.input_dim, "u"), expand(w, model.disturbance_dim, "w"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise _config_error(exc, cfg, "times_s") from None


# -- subcommands -------------------------------------------------------------------

def cmd_simulate(cfg, out, prefix):
    t_cfg = cfg.section("time")
    files = []
    if cfg.model == "atmos":
        grid, params, state, model, sensors = build_atmos(cfg)
        q = float(cfg.section("atmos")["Q_T_k_per_s"])
        heating = constant_forcing(np.full(grid.size, q), np.zeros(0))
        if t_cfg["method"] == "euler":
            params = AtmosParams(params.f, params.R, params.nu, q, params.hydrostatic)
            times = cfg.dt_s * np.arange(cfg.n_steps + 1)
            ys = [model.h(state.pack(), None, None, None, 0.0)]
            for k in range(cfg.n_steps):
                state = atmos_step_euler(state, params, grid, cfg.dt_s, t=times[k])
                ys.append(model.h(state.pack(), None, None, None, times[k + 1]))
            ys = np.array(ys)
        else:
            traj = integrate(model, state.pack(), heating, cfg.dt_s, cfg.n_steps, method="rk4")
            N = grid.size
            if np.any(traj.states[:, 3 * N:] <= 0):
                raise PositivityError("T or rho became non-positive; reduce dt")
            times, ys = traj.times, traj.outputs
            state = AtmosState.unpack(traj.final_state, grid)
        names = [f"{kind}_{i}_{j}_{k}" for kind, (i, j, k) in sensors]
        units = {"vx": "m/s", "vy": "m/s", "vz": "m/s", "T": "K", "rho": "kg/m3", "p": "Pa"}
        path = out / f"{prefix}sensors.csv"
        write_table(path, ["time_s"] + names, ["s"] + [units[k] for k, _ in sensors],
                    np.column_stack([times, ys]))
        snap = out / f"{prefix}snapshot.csv"
        write_snapshot(snap, state, grid)
        return [path, snap]

    model, x0, names, units = build_model(cfg)
    forcing = build_forcing(cfg, model)
    traj = integrate(model, x0, forcing, cfg.dt_s, cfg.n_steps, method=t_cfg["method"])
    cols = ["time_s"] + names
    unit_row = ["s"] + units
    data = [traj.times, traj.states]
    if cfg.model == "ebm0d":
        cols += ["u", "w"]
        unit_row += ["1", "1"]
        data += [traj.inputs, traj.disturbances]
    path = out / f"{prefix}trajectory.csv"
    write_table(path, cols, unit_row, np.column_stack(data))
    files.append(path)
    return files


def cmd_envelope(cfg, out, prefix):
    if cfg.model != "ebm0d":
        raise ConfigError("envelope supports model.kind = 'ebm0d'", path=cfg.path)
    p, x0 = build_ebm0d(cfg)
    n = cfg.section("noise")
    noise = NoiseSpec(n["process_rel_std"], n["param_rel_std"], n["perturbed_params"], cfg.seed)
    scenarios = cfg.data["scenarios"] or [{"name": "envelope", "u": None, "w": None}]
    model = ebm0d_model(p)
    files = []
    for sc in scenarios:
        forcing = build_forcing(cfg, model, sc["u"], sc["w"])
        env = monte_carlo(ebm0d_factory(p), x0, forcing, cfg.dt_s, cfg.n_steps, n["n_runs"], noise,
                          method=cfg.section("time")["method"], levels=n["levels"])
        if env.n_failed:
            log.warning("scenario %s: %d of %d runs failed", sc["name"], env.n_failed, n["n_runs"])
        name = sc["name"] if cfg.data["scenarios"] else "envelope"
        path = out / f"{prefix}{name}.csv" if name == "envelope" else out / f"{prefix}envelope_{name}.csv"
        write_envelope_csv(path, env, celsius=True)
        files.append(path)
    return files


def cmd_closed_loop(cfg, out, prefix):
    if cfg.model == "atmos":
        raise ConfigError("closed-loop supports ebm0d and ebm2d models", path=cfg.path)
    model, x0, names, units = build_model(cfg)
    c = cfg.section("controller")
    gains = PiGains(c["kp"], c["ki"], c["u_min"], c["u_max"], c["integral_limit"], c["reverse_acting"])
    w = cfg.section("forcing")["w"]
    disturbance = _cell_values(w, model.disturbance_dim, "w", cfg)
    traj = closed_loop_simulate(model, gains, float(c["target"]), x0, cfg.dt_s, cfg.n_steps,
                                disturbance=disturbance, method=cfg.section("time")["method"],
                                output_index=int(c["output_index"]),
                                output_noise_std=float(c["output_noise_std"]), seed=cfg.seed)
    path = out / f"{prefix}closed_loop.csv"
    write_table(path, ["time_s"] + names + ["u"], ["s"] + units + ["1"],
                np.column_stack([traj.times, traj.states, traj.inputs[:, :1]]))
    return [path]


def load_surrogate(cfg):
    sec = cfg.section("sai")
    if sec["surrogate_path"]:
        try:
            doc = json.loads(Path(sec["surrogate_path"]).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read surrogate: {exc.strerror}", path=sec["surrogate_path"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"JSON syntax error: {exc.msg}", exc.lineno, sec["surrogate_path"]) from None
    else:
        doc = {k: v for k, v in sec.items() if k != "surrogate_path" and v is not None}
    missing = [k for k in ("G", "target", "total_cooling") if k not in doc]
    if missing:
        raise _config_error(f"SAI surrogate is missing {missing[0]!r}", cfg, "sai")
    try:
        return SaiSurrogate.from_dict(doc)
    except ValueError as exc:
        raise _config_error(exc, cfg) from None


def cmd_plan_sai(cfg, out, prefix):
    s = load_surrogate(cfg)
    plan = plan_sai_shares(s, return_info=True)
    doc = {
        "policy_names": list(s.policy_names),
        "shares": [float(v) for v in plan.shares],
        "objective": float(plan.objective),
        "fitted_diagnostics": [float(v) for v in s.G @ plan.shares],
        "iterations": plan.iterations,
        "converged": plan.converged,
    }
    path = out / f"{prefix}plan.json"
    write_json(path, doc)
    return [path]


def cmd_assimilate(cfg, out, prefix):
    """Twin experiment: perturbed truth, noisy observations, EnKF analysis."""
    a = cfg.section("assimilation")
    model, x0, _, _ = build_model(cfg)
    forcing = build_forcing(cfg, model)
    method = cfg.section("time")["method"]
    dt, every = cfg.dt_s, a["obs_interval_steps"]
    n_cycles = cfg.n_steps // every
    if n_cycles < 1:
        raise ConfigError("horizon shorter than one observation interval", path=cfg.path)
    rng = np.random.default_rng(cfg.seed)

    truth0 = x0 + a["truth_offset"]
    truth = integrate(model, truth0, forcing, dt, n_cycles * every, method=method)
    obs_idx = np.arange(1, n_cycles + 1) * every
    obs_times = truth.times[obs_idx]
    clean = truth.outputs[obs_idx]
    obs = clean + rng.normal(0.0, a["obs_noise_std"], size=clean.shape)
    p = obs.shape[1]
    R = a["obs_noise_std"] ** 2 * np.eye(p)

    members = x0 + rng.normal(0.0, a["initial_spread"], size=(a["ensemble_size"], x0.size))
    rows = []
    t = 0.0
    for cycle in range(n_cycles):
        if model.vectorized:
            _, X = integrate_batch(model, members, forcing, dt, every, t0=t, method=method)
            members = X[-1]
            if not np.all(np.isfinite(members)):
                raise BlowUpError(f"ensemble blew up in cycle {cycle}")
        else:
            members = np.array([integrate(model, m, forcing, dt, every, t0=t, method=method).final_state
                                for m in members])
        if a["process_noise_std"] > 0:
            members = members + rng.normal(0.0, a["process_noise_std"], size=members.shape)
        t = float(obs_times[cycle])
        ens = enkf_step(Ensemble(members), lambda x: model.h(x, None, None, None, t), R, obs[cycle],
                        rng_seed=[cfg.seed, cycle])
        members = ens.members
        rows.append(np.concatenate([[t], truth.states[obs_idx[cycle]], ens.mean,
                                    members.std(axis=0, ddof=1)]))
    n = x0.size
    obs_path = out / f"{prefix}observations.csv"
    write_observations(obs_path, obs_times, obs, [f"y{j}" for j in range(p)])
    path = out / f"{prefix}analysis.csv"
    cols = (["time_s"] + [f"truth_{i}" for i in range(n)] + [f"mean_{i}" for i in range(n)]
            + [f"spread_{i}" for i in range(n)])
    write_table(path, cols, ["s"] + ["state"] * (3 * n), rows)
    return [obs_path, path]


def cmd_observability(cfg, out, prefix):
    sec = cfg.section("observability")
    model, x0, _, _ = build_model(cfg)
    forcing = build_forcing(cfg, model)
    rep = empirical_obs_gramian(model, x0, int(sec["horizon_steps"]), cfg.dt_s, eps=sec["eps"],
                                forcing=forcing, method=cfg.section("time")["method"],
                                rank_tol=float(sec["rank_tol"]))
    doc = rep.to_dict()
    doc["state_dim"] = model.state_dim
    path = out / f"{prefix}observability.json"
    write_json(path, doc)
    return [path]


def cmd_reach(cfg, out, prefix):
    if cfg.model != "ebm0d":
        raise ConfigError("reach supports model.kind = 'ebm0d' (monotone bracketing)", path=cfg.path)
    p, x0 = build_ebm0d(cfg)
    r = cfg.section("reach")
    box = BoundsBox(r["u_lo"], r["u_hi"], r["w_lo"], r["w_hi"])
    try:
        box.validate_for(p)
    except ParameterDomainError as exc:
        raise _config_error(exc, cfg, "u_lo") from None
    lower, upper = reachable_envelope(p, box, float(x0[0]), cfg.dt_s, cfg.n_steps)
    path = out / f"{prefix}reach.csv"
    write_table(path, ["time_s", "lower_k", "upper_k"], ["s", "K", "K"],
                np.column_stack([lower.times, lower.states[:, 0], upper.states[:, 0]]))
    files = [path]
    if r["n_signals"] > 0:
        slack = envelope_containment(p, box, float(x0[0]), cfg.dt_s, cfg.n_steps,
                                     n_signals=int(r["n_signals"]), n_segments=int(r["n_segments"]),
                                     seed=cfg.seed)
        check = out / f"{prefix}reach_check.json"
        write_json(check, {"n_signals": int(r["n_signals"]), "min_slack_k": slack})
        files.append(check)
    return files


def cmd_calibrate(cfg, out, prefix):
    if cfg.model != "ebm0d":
        raise ConfigError("calibrate supports model.kind = 'ebm0d'", path=cfg.path)
    p, x0 = build_ebm0d(cfg)
    c = cfg.section("calibration")
    f = cfg.section("forcing")
    u, w = float(f["u"]), float(f["w"])
    method = cfg.section("time")["method"]
    files = []
    if c["observations_path"]:
        try:
            times, sensors, values = read_observations(c["observations_path"])
        except OSError as exc:
            raise ConfigError(f"cannot read observations: {exc.strerror}", path=c["observations_path"]) from None
        except ValueError as exc:
            raise ConfigError(str(exc), path=c["observations_path"]) from None
        col = 0 if c["sensor_id"] is None else sensors.index(str(c["sensor_id"]))
        T_obs = values[:, col]
    else:
        truth = Ebm0dParams(p.C, p.S, c["truth"][0], c["truth"][1], p.sigma, p.geometric_factor)
        n_steps = int(round(c["record_years"] * 365 * 86400.0 / cfg.dt_s))
        traj = integrate(ebm0d_model(truth), x0, constant_forcing([u], [w]), cfg.dt_s, n_steps, method=method)
        times = traj.times
        rng = np.random.default_rng(cfg.seed)
        T_obs = traj.states[:, 0] + rng.normal(0.0, c["obs_noise_std"], size=len(times))
        obs_path = out / f"{prefix}observations.csv"
        write_observations(obs_path, times, T_obs, ["T"])
        files.append(obs_path)
    res = calibrate_ebm((times, T_obs), tuple(c["guess"]), p, cfg.dt_s, u=u, w=w, method=method)
    path = out / f"{prefix}calibration.json"
    write_json(path, {"alpha": res.alpha, "epsilon": res.epsilon, "residual_rms_k": res.residual,
                      "converged": res.converged, "iterations": res.iterations})
    files.append(path)
    return files


HANDLERS = {
    "simulate": cmd_simulate,
    "envelope": cmd_envelope,
    "closed-loop": cmd_closed_loop,
    "plan-sai": cmd_plan_sai,
    "assimilate": cmd_assimilate,
    "observability": cmd_observability,
    "reach": cmd_reach,
    "calibrate": cmd_calibrate,
}


def run(command, config_path, seed=None, out_dir=None):
    """Execute one subcommand; returns the list of files written.

    ``command`` may be None, in which case the config's ``command`` field
    (or a manifest's recorded command) is used.
    """
    cfg = load_config(config_path, seed=seed)
    command = command or cfg.command
    if command is None:
        raise ConfigError("no subcommand given and config has no 'command' field", path=config_path)
    cfg.data["command"] = command
    out = Path(out_dir) if out_dir else Path(config_path).parent / "out"
    out.mkdir(parents=True, exist_ok=True)
    prefix = cfg.section("outputs")["prefix"]

    start = time.perf_counter()
    files = HANDLERS[command](cfg, out, prefix)
    wall = time.perf_counter() - start
    manifest = {
        "manifest_version": 1,
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "software": {
            "climctl": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "wall_time_s": wall,
        "outputs": [Path(f).name for f in files],
    }
    manifest_path = out / f"{prefix}manifest.json"
    write_json(manifest_path, manifest)
    return files + [manifest_path]


def build_parser():
    parser = argparse.ArgumentParser(prog="climctl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"climctl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run",) + COMMANDS:
        sp = sub.add_parser(name, help="run the config's own command" if name == "run" else None)
        sp.add_argument("--config", required=True, help="TOML/JSON scenario or a run manifest")
        sp.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed (overrides config)")
        sp.add_argument("--out", default=None, help="output directory (default: <config dir>/out)")
        sp.add_argument("--quiet", action="store_true", help="only report errors")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    command = None if args.command == "run" else args.command
    try:
        files = run(command, args.config, seed=args.seed, out_dir=args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BlowUpError, PositivityError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for f in files:
        log.info("wrote %s", f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
