"""Scenario configuration: TOML or JSON documents, validated and resolved.

Every physical quantity carries its SI unit in the key name (``dt_s``,
``C_j_per_k_m2``...). Validation fills defaults, so the resolved mapping
recorded in the run manifest is complete and replayable.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass
from pathlib import Path

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

SCHEMA_VERSION = 1
MODEL_KINDS = ("ebm0d", "ebm2d", "atmos")
COMMANDS = ("simulate", "envelope", "closed-loop", "plan-sai", "assimilate",
            "observability", "reach", "calibrate")
DEFAULT_SEED = 20250101


class ConfigError(ValueError):
    """Invalid scenario document. ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        super().__init__(message)

    def __str__(self):
        where = str(self.path) if self.path else "config"
        if self.line:
            where += f":{self.line}"
        return f"{where}: {self.args[0]}"


SECTION_DEFAULTS = {
    "ebm0d": {
        "C_j_per_k_m2": 8e8,
        "S_w_per_m2": 1367.6,
        "alpha": 0.3,
        "epsilon": 0.61,
        "sigma_w_per_m2_k4": 5.67e-8,
        "geometric_factor": 1.0,
        "T0_k": 288.0,
    },
    "ebm2d": {
        "rows": 1,
        "cols": 3,
        "C_j_per_k_m2": 8e8,
        "S_w_per_m2": 1367.6,
        "alpha": 0.3,
        "epsilon": 0.61,
        "sigma_w_per_m2_k4": 5.67e-8,
        "kappa_w_per_m2_k": 1.0,
        "boundary": "zero-flux",
        "T0_k": 288.0,
        "sensors": None,
    },
    "atmos": {
        "nx": 8,
        "ny": 8,
        "nz": 4,
        "dx_m": 1.0e5,
        "dy_m": 1.0e5,
        "dz_m": 1.0e3,
        "vertical": "wall",
        "f_per_s": 1e-4,
        "R_j_per_kg_k": 287.0,
        "nu_m2_per_s": 0.0,
        "Q_T_k_per_s": 0.0,
        "hydrostatic": False,
        "T_k": 288.0,
        "rho_kg_per_m3": 1.2,
        "vx_m_per_s": 10.0,
        "vy_m_per_s": 0.0,
        "vz_m_per_s": 0.0,
        "T_perturbation_k": 1.0,
        "sensors": [["T", 0, 0, 0]],
    },
    "time": {"horizon_s": 946080000.0, "dt_s": 86400.0, "method": "euler"},
    "forcing": {"u": 0.0, "w": 0.0, "times_s": None},
    "noise": {
        "process_rel_std": 0.0,
        "param_rel_std": 0.0,
        "perturbed_params": [],
        "n_runs": 100,
        "levels": [5.0, 50.0, 95.0],
    },
    "controller": {
        "kp": 0.0,
        "ki": 0.0,
        "u_min": 0.0,
        "u_max": 0.5,
        "integral_limit": 1e12,
        "reverse_acting": True,
        "target": 288.0,
        "output_index": 0,
        "output_noise_std": 0.0,
    },
    "sai": {
        "surrogate_path": None,
        "G": None,
        "target": None,
        "weights": None,
        "total_cooling": None,
        "policy_names": None,
        "diagnostic_names": None,
    },
    "assimilation": {
        "obs_interval_steps": 30,
        "obs_noise_std": 0.5,
        "ensemble_size": 50,
        "initial_spread": 5.0,
        "truth_offset": 3.0,
        "process_noise_std": 0.0,
    },
    "observability": {"horizon_steps": 365, "eps": None, "rank_tol": 1e-8},
    "reach": {"u_lo": 0.0, "u_hi": 0.2, "w_lo": -0.15, "w_hi": 0.0, "n_signals": 0, "n_segments": 10},
    "calibration": {
        "observations_path": None,
        "sensor_id": None,
        "guess": [0.25, 0.5],
        "truth": [0.3, 0.61],
        "obs_noise_std": 0.0,
        "record_years": 5.0,
    },
    "outputs": {"prefix": ""},
}

TOP_LEVEL_KEYS = {"schema_version", "command", "seed", "model", "scenarios"} | set(SECTION_DEFAULTS)


@dataclass
class ScenarioConfig:
    """Resolved scenario. ``data`` holds every section with defaults filled."""

    data: dict
    source: str = ""
    path: Path = None

    @property
    def model(self):
        return self.data["model"]["kind"]

    @property
    def command(self):
        return self.data.get("command")

    @property
    def seed(self):
        return self.data["seed"]

    @property
    def dt_s(self):
        return self.data["time"]["dt_s"]

    @property
    def horizon_s(self):
        return self.data["time"]["horizon_s"]

    @property
    def n_steps(self):
        return int(round(self.horizon_s / self.dt_s))

    def section(self, name):
        return self.data[name]

    def to_dict(self):
        return copy.deepcopy(self.data)


def _line_of(source, key):
    if not source:
        return None
    pat = re.compile(r'(^|[\s{,"])' + re.escape(key) + r'("?\s*[:=])')
    for i, line in enumerate(source.splitlines(), start=1):
        if pat.search(line):
            return i
    return None


def parse_text(text, fmt, path=None):
    """Parse raw text as ``toml`` or ``json``; syntax errors keep their line."""
    try:
        if fmt == "json":
            return json.loads(text)
        return tomllib.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON syntax error: {exc.msg}", exc.lineno, path) from None
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", int(m.group(1)) if m else None, path) from None


def load_config(path, seed=None):
    """Load and validate a TOML/JSON scenario or a previous run manifest."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path=path) from None
    fmt = "json" if path.suffix.lower() == ".json" else "toml"
    doc = parse_text(text, fmt, path)
    if isinstance(doc, dict) and "manifest_version" in doc:
        doc = dict(doc["config"])
        text = ""
    return validate(doc, source=text, path=path, seed=seed)


def validate(doc, source="", path=None, seed=None) -> ScenarioConfig:
    def fail(msg, key=None):
        raise ConfigError(msg, _line_of(source, key) if key else None, path)

    if not isinstance(doc, dict):
        fail("top level must be a table/object")
    unknown = set(doc) - TOP_LEVEL_KEYS
    if unknown:
        key = sorted(unknown)[0]
        fail(f"unknown top-level key {key!r}", key)

    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        fail(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})", "schema_version")

    model = doc.get("model", {"kind": "ebm0d"})
    if isinstance(model, str):
        model = {"kind": model}
    if not isinstance(model, dict) or model.get("kind") not in MODEL_KINDS:
        fail(f"model.kind must be one of {MODEL_KINDS}", "kind")

    command = doc.get("command")
    if command is not None and command not in COMMANDS:
        fail(f"command must be one of {COMMANDS}", "command")

    data = {"schema_version": SCHEMA_VERSION, "command": command, "model": {"kind": model["kind"]}}
    raw_seed = doc.get("seed", DEFAULT_SEED) if seed is None else seed
    if not isinstance(raw_seed, int) or isinstance(raw_seed, bool) or not 0 <= raw_seed < 2 ** 64:
        fail("seed must be an unsigned 64-bit integer", "seed")
    data["seed"] = raw_seed

    for name, defaults in SECTION_DEFAULTS.items():
        given = doc.get(name, {})
        if not isinstance(given, dict):
            fail(f"section [{name}] must be a table", name)
        extra = set(given) - set(defaults)
        if extra:
            key = sorted(extra)[0]
            fail(f"unknown key {key!r} in section [{name}]", key)
        merged = dict(defaults)
        merged.update(given)
        data[name] = merged

    t = data["time"]
    for key in ("dt_s", "horizon_s"):
        if not isinstance(t[key], (int, float)) or isinstance(t[key], bool) or not t[key] > 0:
            fail(f"time.{key} must be a positive number", key)
    if t["dt_s"] > t["horizon_s"]:
        fail(f"time.dt_s ({t['dt_s']}) must not exceed time.horizon_s ({t['horizon_s']})", "dt_s")
    if t["method"] not in ("euler", "rk4"):
        fail("time.method must be 'euler' or 'rk4'", "method")

    scenarios = doc.get("scenarios")
    if scenarios is not None:
        if not isinstance(scenarios, list) or not scenarios:
            fail("scenarios must be a non-empty list", "scenarios")
        names = set()
        for sc in scenarios:
            if not isinstance(sc, dict) or "name" not in sc:
                fail("every scenario needs a name", "scenarios")
            extra = set(sc) - {"name", "u", "w"}
            if extra:
                key = sorted(extra)[0]
                fail(f"unknown key {key!r} in scenario {sc['name']!r}", key)
            if not re.fullmatch(r"[A-Za-z0-9_\-]+", str(sc["name"])):
                fail(f"scenario name {sc['name']!r} must be alphanumeric", "name")
            if sc["name"] in names:
                fail(f"duplicate scenario name {sc['name']!r}", "name")
            names.add(sc["name"])
        data["scenarios"] = [{"name": sc["name"], "u": sc.get("u", 0.0), "w": sc.get("w", 0.0)}
                             for sc in scenarios]
    else:
        data["scenarios"] = None

    n = data["noise"]
    if n["process_rel_std"] < 0 or n["param_rel_std"] < 0:
        fail("noise standard deviations must be non-negative", "process_rel_std")
    if not isinstance(n["n_runs"], int) or n["n_runs"] < 1:
        fail("noise.n_runs must be a positive integer", "n_runs")
    allowed = {"C", "S", "alpha", "epsilon", "sigma"}
    bad = [p for p in n["perturbed_params"] if p not in allowed]
    if bad:
        fail(f"cannot perturb {bad[0]!r}; choose from {sorted(allowed)}", "perturbed_params")

    c = data["controller"]
    if not c["u_min"] < c["u_max"]:
        fail("controller.u_min must be below controller.u_max", "u_min")
    if c["integral_limit"] < 0:
        fail("controller.integral_limit must be non-negative", "integral_limit")

    r = data["reach"]
    if r["u_lo"] > r["u_hi"] or r["w_lo"] > r["w_hi"]:
        fail("reach bounds must satisfy u_lo <= u_hi and w_lo <= w_hi", "u_lo")

    a = data["assimilation"]
    if not isinstance(a["ensemble_size"], int) or a["ensemble_size"] < 2:
        fail("assimilation.ensemble_size must be an integer >= 2", "ensemble_size")
    if not isinstance(a["obs_interval_steps"], int) or a["obs_interval_steps"] < 1:
        fail("assimilation.obs_interval_steps must be a positive integer", "obs_interval_steps")
    if not a["obs_noise_std"] > 0:
        fail("assimilation.obs_noise_std must be positive", "obs_noise_std")

    cal = data["calibration"]
    if len(cal["guess"]) != 2 or any(not 0 <= g <= 1 for g in cal["guess"]):
        fail("calibration.guess must be two numbers in [0, 1]", "guess")

    if path is not None:
        base = Path(path).parent
        for section, key in (("sai", "surrogate_path"), ("calibration", "observations_path")):
            val = data[section][key]
            if val is not None and not Path(val).is_absolute():
                data[section][key] = str((base / val).resolve())

    return ScenarioConfig(data=data, source=source, path=path)
