"""Scenario configuration: strict schema, defaults, cross-field checks.

Configs are JSON.  Unknown keys are rejected anywhere in the tree --
silent typos are the classic way a simulation campaign goes wrong -- and
every run echoes its fully resolved config so results can be replayed.
"""

from __future__ import annotations

import json
from pathlib import Path

__all__ = ["ConfigError", "load_config", "resolve_config", "load_and_resolve"]


class ConfigError(ValueError):
    """Configuration rejected; message carries the offending key path."""


_SCENARIOS = ("coverage", "localize", "search")
_SYSTEMS = ("double_integrator", "quadrotor12")
_PHI_KINDS = ("uniform", "occlusion", "gaussians", "grid_file")
_SENSOR_MODELS = ("bearing2d", "bearing3d")
_MOTIONS = ("static", "waypoints", "diffusion")


def _fail(path: str, message: str):
    raise ConfigError(f"{path}: {message}")


def _check_keys(section: dict, allowed, path: str):
    if not isinstance(section, dict):
        _fail(path, f"expected an object, got {type(section).__name__}")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        _fail(path, f"unknown key(s) {unknown}; allowed: {sorted(allowed)}")


def _get(section: dict, key: str, default, path: str, kind=None, choices=None, required=False):
    if key not in section or section[key] is None:
        if required:
            _fail(f"{path}.{key}", "required")
        return default
    value = section[key]
    if kind is not None:
        kinds = kind if isinstance(kind, tuple) else (kind,)
        if bool not in kinds and isinstance(value, bool):
            _fail(f"{path}.{key}", f"expected {kinds}, got bool")
        if not isinstance(value, kinds):
            if float in kinds and isinstance(value, int):
                value = float(value)
            else:
                _fail(f"{path}.{key}", f"expected {kinds}, got {type(value).__name__}")
    if choices is not None and value not in choices:
        _fail(f"{path}.{key}", f"must be one of {choices}")
    return value


def _number_list(section, key, path, length=None, default=None, positive=False):
    raw = section.get(key, None)
    if raw is None:
        return default
    if not isinstance(raw, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
        _fail(f"{path}.{key}", "expected a list of numbers")
    values = [float(v) for v in raw]
    if length is not None and len(values) != length:
        _fail(f"{path}.{key}", f"expected {length} entries, got {len(values)}")
    if positive and any(v <= 0 for v in values):
        _fail(f"{path}.{key}", "entries must be positive")
    return values


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


def resolve_config(raw: dict) -> dict:
    """Validate and fill defaults; returns the echo-ready resolved config."""
    _check_keys(
        raw,
        ["scenario", "domain", "system", "controller", "phi", "targets", "sensor",
         "eid", "agents", "run", "output"],
        "config",
    )
    scenario = _get(raw, "scenario", None, "config", kind=str, choices=_SCENARIOS, required=True)

    out = {"scenario": scenario}
    out["domain"] = _resolve_domain(raw.get("domain"))
    out["system"] = _resolve_system(raw.get("system"))
    out["controller"] = _resolve_controller(raw.get("controller"))
    out["phi"] = _resolve_phi(raw.get("phi"), scenario)
    out["targets"] = _resolve_targets(raw.get("targets"), out["domain"], out["system"])
    out["sensor"] = _resolve_sensor(raw.get("sensor"))
    out["eid"] = _resolve_eid(raw.get("eid"))
    out["agents"] = _resolve_agents(raw.get("agents"))
    out["run"] = _resolve_run(raw.get("run"))
    out["output"] = _resolve_output(raw.get("output"))
    _cross_checks(out)
    return out


def _resolve_domain(section) -> dict:
    section = section if section is not None else {}
    _check_keys(section, ["bounds"], "domain")
    bounds = _number_list(section, "bounds", "domain", default=[1.0, 1.0], positive=True)
    if len(bounds) < 1:
        _fail("domain.bounds", "need at least one dimension")
    return {"bounds": bounds}


def _resolve_system(section) -> dict:
    section = section if section is not None else {}
    quad_keys = ["mass", "gravity", "arm", "inertia", "yaw_coeff", "thrust_limit",
                 "pd_height", "pd_kp", "pd_kd", "nominal", "attitude_kp", "attitude_kd",
                 "velocity_gain", "brake_accel_cap", "wall_accel_cap"]
    keys = ["kind", "accel_limit", "velocity_damping", "wall_gain"] + quad_keys
    _check_keys(section, keys, "system")
    kind = _get(section, "kind", "double_integrator", "system", kind=str, choices=_SYSTEMS)
    out = {"kind": kind}
    if kind == "double_integrator":
        for key in quad_keys:
            if key in section and section[key] is not None:
                _fail(f"system.{key}", "not a double_integrator parameter")
        out["accel_limit"] = _get(section, "accel_limit", 50.0, "system", kind=float)
        out["velocity_damping"] = _get(section, "velocity_damping", 0.0, "system", kind=float)
        out["wall_gain"] = _get(section, "wall_gain", 0.0, "system", kind=float)
        if out["accel_limit"] <= 0:
            _fail("system.accel_limit", "must be positive")
        if out["velocity_damping"] < 0 or out["wall_gain"] < 0:
            _fail("system.velocity_damping", "damping and wall gains must be >= 0")
    else:
        for key in ("accel_limit", "velocity_damping"):
            if section.get(key) is not None:
                _fail(f"system.{key}", "not a quadrotor12 parameter")
        out["wall_gain"] = _get(section, "wall_gain", 0.0, "system", kind=float)
        out["wall_accel_cap"] = _get(section, "wall_accel_cap", 6.0, "system", kind=float)
        out["mass"] = _get(section, "mass", 0.6, "system", kind=float)
        out["gravity"] = _get(section, "gravity", 9.81, "system", kind=float)
        out["arm"] = _get(section, "arm", 0.2, "system", kind=float)
        out["inertia"] = _number_list(section, "inertia", "system", length=3,
                                      default=[8.6e-3, 8.6e-3, 1.72e-2], positive=True)
        out["yaw_coeff"] = _get(section, "yaw_coeff", 0.016, "system", kind=float)
        out["thrust_limit"] = _get(section, "thrust_limit", 12.0, "system", kind=float)
        out["pd_height"] = _get(section, "pd_height", 1.0, "system", kind=float)
        out["pd_kp"] = _get(section, "pd_kp", 6.0, "system", kind=float)
        out["pd_kd"] = _get(section, "pd_kd", 3.0, "system", kind=float)
        out["nominal"] = _get(section, "nominal", "hover", "system", kind=str,
                              choices=("hover", "height_pd"))
        out["attitude_kp"] = _get(section, "attitude_kp", 40.0, "system", kind=float)
        out["attitude_kd"] = _get(section, "attitude_kd", 12.0, "system", kind=float)
        out["velocity_gain"] = _get(section, "velocity_gain", 1.0, "system", kind=float)
        out["brake_accel_cap"] = _get(section, "brake_accel_cap", 3.0, "system", kind=float)
        for key in ("mass", "gravity", "arm", "yaw_coeff", "thrust_limit", "pd_kp", "pd_kd"):
            if out[key] <= 0:
                _fail(f"system.{key}", "must be positive")
    return out


def _resolve_controller(section) -> dict:
    section = section if section is not None else {}
    keys = ["coeff_order", "horizon", "sample_time", "ergodic_weight", "control_weight",
            "desired_rate", "desired_rate_scale", "ergodic_memory", "duration_init",
            "duration_shrink", "duration_max_iters", "dt", "contraction_slack",
            "barrier_weight", "descent_rescue", "normalized_average"]
    _check_keys(section, keys, "controller")
    out = {
        "coeff_order": _get(section, "coeff_order", 10, "controller", kind=int),
        "horizon": _get(section, "horizon", 0.5, "controller", kind=float),
        "sample_time": _get(section, "sample_time", 0.05, "controller", kind=float),
        "ergodic_weight": _get(section, "ergodic_weight", 1.0, "controller", kind=float),
        "desired_rate": _get(section, "desired_rate", None, "controller", kind=float),
        "desired_rate_scale": _get(section, "desired_rate_scale", 1.0, "controller", kind=float),
        "ergodic_memory": _get(section, "ergodic_memory", None, "controller", kind=float),
        "duration_init": _get(section, "duration_init", None, "controller", kind=float),
        "duration_shrink": _get(section, "duration_shrink", 0.5, "controller", kind=float),
        "duration_max_iters": _get(section, "duration_max_iters", 10, "controller", kind=int),
        "dt": _get(section, "dt", None, "controller", kind=float),
        "contraction_slack": _get(section, "contraction_slack", 1e-6, "controller", kind=float),
        "barrier_weight": _get(section, "barrier_weight", 0.0, "controller", kind=float),
        "descent_rescue": _get(section, "descent_rescue", False, "controller", kind=bool),
        "normalized_average": _get(section, "normalized_average", False, "controller", kind=bool),
    }
    weight = section.get("control_weight", 1e-2)
    if isinstance(weight, list):
        out["control_weight"] = _number_list(section, "control_weight", "controller", positive=True)
    elif isinstance(weight, (int, float)) and not isinstance(weight, bool):
        if float(weight) <= 0:
            _fail("controller.control_weight", "must be positive")
        out["control_weight"] = float(weight)
    else:
        _fail("controller.control_weight", "expected a number or list of numbers")
    if out["coeff_order"] < 0:
        _fail("controller.coeff_order", "must be >= 0")
    if out["horizon"] <= out["sample_time"] or out["sample_time"] <= 0:
        _fail("controller.horizon", "require horizon > sample_time > 0")
    return out


def _resolve_phi(section, scenario) -> dict:
    if scenario in ("localize", "search"):
        if section is not None:
            _fail("phi", f"{scenario} scenarios derive the distribution from target beliefs")
        return {"kind": "eid"}
    section = section if section is not None else {}
    _check_keys(section, ["kind", "grid", "occlusions", "bumps", "path"], "phi")
    kind = _get(section, "kind", "uniform", "phi", kind=str, choices=_PHI_KINDS)
    out = {"kind": kind}
    grid = section.get("grid", [60, 60])
    out["grid"] = [int(g) for g in _number_list({"grid": grid}, "grid", "phi", positive=True)]
    if kind == "occlusion":
        occs = section.get("occlusions")
        if not isinstance(occs, list) or not occs:
            _fail("phi.occlusions", "occlusion distribution needs a list of regions")
        resolved = []
        for i, occ in enumerate(occs):
            path = f"phi.occlusions[{i}]"
            _check_keys(occ, ["kind", "center", "radius", "min", "max"], path)
            okind = _get(occ, "kind", None, path, kind=str, choices=("circle", "rect"), required=True)
            if okind == "circle":
                resolved.append({
                    "kind": "circle",
                    "center": _number_list(occ, "center", path, default=None) or _fail(f"{path}.center", "required"),
                    "radius": _get(occ, "radius", None, path, kind=float, required=True),
                })
            else:
                lo = _number_list(occ, "min", path)
                hi = _number_list(occ, "max", path)
                if lo is None or hi is None:
                    _fail(path, "rect occlusion needs min and max")
                resolved.append({"kind": "rect", "min": lo, "max": hi})
        out["occlusions"] = resolved
    elif kind == "gaussians":
        bumps = section.get("bumps")
        if not isinstance(bumps, list) or not bumps:
            _fail("phi.bumps", "gaussians distribution needs a list of bumps")
        resolved = []
        for i, bump in enumerate(bumps):
            path = f"phi.bumps[{i}]"
            _check_keys(bump, ["center", "width", "weight"], path)
            resolved.append({
                "center": _number_list(bump, "center", path) or _fail(f"{path}.center", "required"),
                "width": _get(bump, "width", 0.1, path, kind=float),
                "weight": _get(bump, "weight", 1.0, path, kind=float),
            })
        out["bumps"] = resolved
    elif kind == "grid_file":
        out["path"] = _get(section, "path", None, "phi", kind=str, required=True)
    return out


def _resolve_targets(section, domain, system) -> list:
    if section is None:
        return []
    if not isinstance(section, list):
        _fail("targets", "expected a list")
    out = []
    seen_ids = set()
    for i, entry in enumerate(section):
        path = f"targets[{i}]"
        _check_keys(entry, ["id", "start", "motion", "waypoints", "step_std", "appear_time",
                            "initial_detected", "initial_mean", "initial_cov_diag"], path)
        tid = _get(entry, "id", i, path, kind=int)
        if tid in seen_ids:
            _fail(f"{path}.id", "duplicate target id")
        seen_ids.add(tid)
        start = entry.get("start", "random")
        if start != "random":
            start = _number_list(entry, "start", path)
        motion = _get(entry, "motion", "static", path, kind=str, choices=_MOTIONS)
        resolved = {
            "id": tid,
            "start": start,
            "motion": motion,
            "step_std": _get(entry, "step_std", 0.01, path, kind=float),
            "appear_time": _get(entry, "appear_time", None, path, kind=float),
            "initial_detected": _get(entry, "initial_detected", False, path, kind=bool),
            "initial_cov_diag": _number_list(entry, "initial_cov_diag", path),
        }
        mean = entry.get("initial_mean", None)
        resolved["initial_mean"] = mean if mean in (None, "random") else _number_list(entry, "initial_mean", path)
        if motion == "waypoints":
            rows = entry.get("waypoints")
            if not isinstance(rows, list) or not rows:
                _fail(f"{path}.waypoints", "waypoint motion needs rows of [t, coords...]")
            resolved["waypoints"] = [[float(v) for v in row] for row in rows]
        out.append(resolved)
    return out


def _resolve_sensor(section) -> dict | None:
    if section is None:
        return None
    keys = ["model", "range", "noise_diag", "measure_interval", "process_noise_diag",
            "min_range", "init_std"]
    _check_keys(section, keys, "sensor")
    model = _get(section, "model", "bearing2d", "sensor", kind=str, choices=_SENSOR_MODELS)
    mu = 1 if model == "bearing2d" else 2
    m_dim = 2 if model == "bearing2d" else 3
    out = {
        "model": model,
        "range": _get(section, "range", 0.2, "sensor", kind=float),
        "noise_diag": _number_list(section, "noise_diag", "sensor", length=mu,
                                   default=[0.1] * mu, positive=True),
        "measure_interval": _get(section, "measure_interval", 0.05, "sensor", kind=float),
        "process_noise_diag": _number_list(section, "process_noise_diag", "sensor", length=m_dim,
                                           default=[1e-5] * m_dim),
        "min_range": _get(section, "min_range", 1e-3, "sensor", kind=float),
        "init_std": _get(section, "init_std", 0.1, "sensor", kind=float),
    }
    if out["range"] <= 0:
        _fail("sensor.range", "must be positive")
    if out["measure_interval"] <= 0:
        _fail("sensor.measure_interval", "must be positive")
    return out


def _resolve_eid(section) -> dict | None:
    if section is None:
        return None
    keys = ["grid", "refresh_interval", "exploration_floor", "belief_cells",
            "belief_halfwidth", "support_cutoff", "max_targets"]
    _check_keys(section, keys, "eid")
    grid = section.get("grid", [25, 25])
    out = {
        "grid": [int(g) for g in _number_list({"grid": grid}, "grid", "eid", positive=True)],
        "refresh_interval": _get(section, "refresh_interval", 1.0, "eid", kind=float),
        "exploration_floor": _get(section, "exploration_floor", 0.5, "eid", kind=float),
        "belief_cells": _get(section, "belief_cells", 15, "eid", kind=int),
        "belief_halfwidth": _get(section, "belief_halfwidth", 3.0, "eid", kind=float),
        "support_cutoff": _get(section, "support_cutoff", 0.0, "eid", kind=float),
        "max_targets": _get(section, "max_targets", None, "eid", kind=int),
    }
    if not (0.0 <= out["exploration_floor"] <= 1.0):
        _fail("eid.exploration_floor", "must be in [0, 1]")
    if out["refresh_interval"] <= 0:
        _fail("eid.refresh_interval", "must be positive")
    return out


def _resolve_agents(section) -> dict:
    section = section if section is not None else {}
    _check_keys(section, ["count", "initial_states", "spread"], "agents")
    out = {
        "count": _get(section, "count", 1, "agents", kind=int),
        "spread": _get(section, "spread", 0.05, "agents", kind=float),
    }
    if out["count"] < 1:
        _fail("agents.count", "need at least one agent")
    states = section.get("initial_states")
    if states is not None:
        if not isinstance(states, list) or len(states) != out["count"]:
            _fail("agents.initial_states", "need exactly one state per agent")
        out["initial_states"] = [[float(v) for v in row] for row in states]
    else:
        out["initial_states"] = None
    return out


def _resolve_run(section) -> dict:
    section = section if section is not None else {}
    _check_keys(section, ["t0", "tf", "seed", "t0erg"], "run")
    out = {
        "t0": _get(section, "t0", 0.0, "run", kind=float),
        "tf": _get(section, "tf", None, "run", kind=float, required=True),
        "seed": _get(section, "seed", 0, "run", kind=int),
        "t0erg": _get(section, "t0erg", None, "run", kind=float),
    }
    if out["tf"] < out["t0"]:
        _fail("run.tf", "must be >= run.t0")
    return out


def _resolve_output(section) -> dict:
    section = section if section is not None else {}
    _check_keys(section, ["quiet", "snapshot_times", "snapshot_grid"], "output")
    times = section.get("snapshot_times", [])
    return {
        "quiet": _get(section, "quiet", False, "output", kind=bool),
        "snapshot_times": _number_list({"snapshot_times": times}, "snapshot_times", "output", default=[]),
        "snapshot_grid": [int(g) for g in _number_list(
            {"grid": section.get("snapshot_grid", [50, 50])}, "grid", "output.snapshot_grid", positive=True)],
    }


def _cross_checks(cfg: dict):
    scenario = cfg["scenario"]
    nu = len(cfg["domain"]["bounds"])
    if cfg["system"]["kind"] == "quadrotor12" and nu != 2:
        _fail("domain.bounds", "quadrotor12 explores a two-dimensional domain")
    if cfg["system"]["kind"] == "double_integrator" and nu != 2:
        _fail("domain.bounds", "double_integrator explores a two-dimensional domain")
    if scenario in ("localize", "search"):
        if cfg["sensor"] is None:
            _fail("sensor", f"{scenario} scenario requires a sensor model")
        if cfg["eid"] is None:
            _fail("eid", f"{scenario} scenario requires the information-density settings")
        if scenario == "localize" and not cfg["targets"]:
            _fail("targets", "localize scenario needs at least one target")
        model = cfg["sensor"]["model"]
        if model == "bearing3d" and cfg["system"]["kind"] != "quadrotor12":
            _fail("sensor.model", "bearing3d needs a system with a height state (quadrotor12)")
        m_dim = 2 if model == "bearing2d" else 3
        for i, target in enumerate(cfg["targets"]):
            if target["start"] != "random" and len(target["start"]) != m_dim:
                _fail(f"targets[{i}].start", f"expected {m_dim} coordinates for {model}")
        ctrl = cfg["controller"]
        ratio = cfg["eid"]["refresh_interval"] / ctrl["sample_time"]
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            _fail("eid.refresh_interval", "must be a positive multiple of controller.sample_time")
        if cfg["controller"]["ergodic_memory"] is None:
            _fail("controller.ergodic_memory", f"{scenario} scenario needs a finite ergodic memory")
    else:
        if cfg["targets"]:
            _fail("targets", "coverage scenario does not take targets")
    mi = cfg["sensor"]["measure_interval"] if cfg["sensor"] else None
    if mi is not None:
        dt = cfg["controller"]["dt"] or cfg["controller"]["sample_time"] / 10.0
        ratio = mi / dt
        if abs(ratio - round(ratio)) > 1e-6:
            _fail("sensor.measure_interval", "must be a multiple of the integration step")


def load_and_resolve(path) -> dict:
    return resolve_config(load_config(path))
