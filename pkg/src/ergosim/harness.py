"""Scenario orchestration: coverage, localization, search, Monte Carlo.

Runs are fully determined by (resolved config, seed): every random draw
comes from a named substream of the run seed, trials are isolated, and
the report carries the resolved config so any run can be replayed.
Wall-clock fields (per-step microseconds, real-time factor) are
instrumentation and are excluded from the determinism contract.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError
from .controller import ControllerConfig, ErgodicController, StepResult
from .dynamics import (
    ControlAffineSystem,
    QuadrotorParams,
    make_double_integrator,
    make_hover_stabilizer,
    make_pd_height_hold,
    make_quadrotor12,
    make_velocity_damper,
)
from .fourier import (
    IndexSet,
    SearchDomain,
    SpatialGrid,
    TrajectorySegment,
    distribution_coeffs,
    lambda_weights,
    reconstruct_statistics,
    uniform_grid,
)
from .information import BeliefGrid, bearing_model_2d, bearing_model_3d, build_eid_grid
from .multi_agent import CoefficientMessage, Hub, collective_ergodicity
from .targets import (
    TargetBelief,
    TargetTruth,
    detect_and_measure,
    ekf_predict,
    localization_status,
)

__all__ = [
    "RunReport",
    "build_occlusion_grid",
    "build_gaussians_grid",
    "run_coverage",
    "run_localization",
    "run_search_and_localize",
    "run_monte_carlo",
    "write_run_report",
]

_NS_AGENT = 1
_NS_PLACE = 2
_NS_MEASURE = 3
_NS_MOTION = 4


# -- distribution builders ---------------------------------------------------


def build_occlusion_grid(domain: SearchDomain, cells, occlusions) -> SpatialGrid:
    """Uniform probability of detection with dead regions zeroed out."""
    grid = uniform_grid(domain, cells)
    pts = grid.centers()
    vals = np.ones(pts.shape[0])
    for occ in occlusions:
        if occ["kind"] == "circle":
            center = np.asarray(occ["center"], dtype=float)
            mask = np.linalg.norm(pts - center, axis=1) < occ["radius"]
        else:
            lo = np.asarray(occ["min"], dtype=float)
            hi = np.asarray(occ["max"], dtype=float)
            mask = np.all((pts > lo) & (pts < hi), axis=1)
        vals[mask] = 0.0
    return SpatialGrid(domain, cells, vals.reshape(tuple(cells))).normalized()


def build_gaussians_grid(domain: SearchDomain, cells, bumps) -> SpatialGrid:
    pts_vals = np.zeros(int(np.prod(cells)))
    grid = uniform_grid(domain, cells)
    pts = grid.centers()
    for bump in bumps:
        center = np.asarray(bump["center"], dtype=float)
        pts_vals += bump["weight"] * np.exp(
            -np.sum((pts - center) ** 2, axis=1) / (2.0 * bump["width"] ** 2)
        )
    return SpatialGrid(domain, cells, pts_vals.reshape(tuple(cells))).normalized()


def _build_phi_grid(cfg: dict, domain: SearchDomain) -> SpatialGrid:
    phi_cfg = cfg["phi"]
    cells = tuple(phi_cfg.get("grid", [60, 60]))
    if phi_cfg["kind"] == "uniform":
        return uniform_grid(domain, cells).normalized()
    if phi_cfg["kind"] == "occlusion":
        return build_occlusion_grid(domain, cells, phi_cfg["occlusions"])
    if phi_cfg["kind"] == "gaussians":
        return build_gaussians_grid(domain, cells, phi_cfg["bumps"])
    if phi_cfg["kind"] == "grid_file":
        return SpatialGrid.load(phi_cfg["path"]).normalized()
    raise ConfigError(f"phi kind {phi_cfg['kind']} has no static grid")


# -- system construction -------------------------------------------------------


@dataclass
class SystemBundle:
    sys: ControlAffineSystem
    u_nom: object
    sensor_tail: np.ndarray
    position_dims: int

    def sensor_state(self, x: np.ndarray) -> np.ndarray:
        if self.sys.name == "quadrotor12":
            return x[:3].copy()
        return x[[0, 2]].copy()

    def planar_position(self, x: np.ndarray) -> np.ndarray:
        return x[list(self.sys.ergodic_projection)].copy()


def _build_system(cfg: dict) -> SystemBundle:
    sys_cfg = cfg["system"]
    bounds = cfg["domain"]["bounds"]
    if sys_cfg["kind"] == "double_integrator":
        sys = make_double_integrator(sys_cfg["accel_limit"])
        u_nom = None
        if sys_cfg["velocity_damping"] > 0.0 or sys_cfg["wall_gain"] > 0.0:
            u_nom = make_velocity_damper(
                sys_cfg["velocity_damping"], sys_cfg["accel_limit"],
                bounds=bounds, wall_gain=sys_cfg["wall_gain"],
            )
        return SystemBundle(sys, u_nom, np.array([]), 2)
    params = QuadrotorParams(
        mass=sys_cfg["mass"],
        gravity=sys_cfg["gravity"],
        arm=sys_cfg["arm"],
        inertia=tuple(sys_cfg["inertia"]),
        yaw_coeff=sys_cfg["yaw_coeff"],
        thrust_limit=sys_cfg["thrust_limit"],
    )
    sys = make_quadrotor12(params)
    if sys_cfg["nominal"] == "hover":
        u_nom = make_hover_stabilizer(
            sys_cfg["pd_height"], params,
            height_kp=sys_cfg["pd_kp"], height_kd=sys_cfg["pd_kd"],
            attitude_kp=sys_cfg["attitude_kp"], attitude_kd=sys_cfg["attitude_kd"],
            velocity_gain=sys_cfg["velocity_gain"], brake_accel_cap=sys_cfg["brake_accel_cap"],
            bounds=bounds, wall_gain=sys_cfg["wall_gain"],
            wall_accel_cap=sys_cfg["wall_accel_cap"],
        )
    else:
        u_nom = make_pd_height_hold(sys_cfg["pd_height"], sys_cfg["pd_kp"], sys_cfg["pd_kd"], params)
    return SystemBundle(sys, u_nom, np.array([sys_cfg["pd_height"]]), 3)


def _controller_config(cfg: dict, quiet_memory=False) -> ControllerConfig:
    c = cfg["controller"]
    return ControllerConfig(
        coeff_order=c["coeff_order"],
        horizon=c["horizon"],
        sample_time=c["sample_time"],
        ergodic_weight=c["ergodic_weight"],
        control_weight=c["control_weight"],
        desired_rate=c["desired_rate"],
        desired_rate_scale=c["desired_rate_scale"],
        ergodic_memory=c["ergodic_memory"] if c["ergodic_memory"] is not None else math.inf,
        duration_init=c["duration_init"],
        duration_shrink=c["duration_shrink"],
        duration_max_iters=c["duration_max_iters"],
        dt=c["dt"],
        contraction_slack=c["contraction_slack"],
        barrier_weight=c["barrier_weight"],
        descent_rescue=c["descent_rescue"],
    )


def _initial_states(cfg: dict, bundle: SystemBundle, domain: SearchDomain, seed: int) -> list:
    agents = cfg["agents"]
    if agents["initial_states"] is not None:
        return [np.asarray(s, dtype=float) for s in agents["initial_states"]]
    center = 0.5 * np.asarray(domain.bounds)
    states = []
    for a in range(agents["count"]):
        rng = np.random.default_rng([seed, _NS_AGENT, a])
        offset = agents["spread"] * rng.uniform(-1.0, 1.0, size=domain.nu)
        planar = np.clip(center + offset, 0.05 * np.asarray(domain.bounds), 0.95 * np.asarray(domain.bounds))
        if bundle.sys.name == "quadrotor12":
            x = np.zeros(12)
            x[0], x[1] = planar
            x[2] = cfg["system"]["pd_height"]
        else:
            x = np.zeros(4)
            x[0], x[2] = planar
        states.append(x)
    return states


# -- reports -------------------------------------------------------------------


@dataclass
class RunReport:
    scenario: str
    config: dict
    seed: int
    step_rows: dict = field(default_factory=dict)
    trajectories: dict = field(default_factory=dict)
    ergodicity_rows: list = field(default_factory=list)
    belief_rows: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def replayable_config(self) -> dict:
        return json.loads(json.dumps(self.config))


def _step_row(agent: int, result: StepResult) -> dict:
    return {
        "agent": agent,
        "step": result.step_index,
        "time": result.time,
        "state": result.state,
        "control": result.applied_control,
        "tau_a": result.action.application_time if result.took_action else "",
        "lambda_a": result.action.duration,
        "j_before": result.cost_before,
        "j_after": result.cost_after,
        "bound": "" if result.contraction_bound is None else result.contraction_bound,
        "shift_bound": "" if result.horizon_shift_bound is None else result.horizon_shift_bound,
        "wall_us": result.wall_us,
        "fallback": int(result.fallback),
    }


# -- coverage ------------------------------------------------------------------


def run_coverage(resolved: dict) -> RunReport:
    """Static-distribution exploration, single- or multi-agent."""
    if resolved["scenario"] != "coverage":
        raise ConfigError("run_coverage needs a coverage scenario config")
    domain = SearchDomain(len(resolved["domain"]["bounds"]), tuple(resolved["domain"]["bounds"]))
    bundle = _build_system(resolved)
    ctrl_cfg = _controller_config(resolved)
    ctrl_cfg.validate(bundle.sys.m)
    seed = resolved["run"]["seed"]
    idx = IndexSet(ctrl_cfg.coeff_order, domain.nu)
    grid = _build_phi_grid(resolved, domain)
    phi = distribution_coeffs(grid, idx)

    t0 = resolved["run"]["t0"]
    tf = resolved["run"]["tf"]
    t0erg = resolved["run"]["t0erg"] if resolved["run"]["t0erg"] is not None else t0
    n_agents = resolved["agents"]["count"]
    states = _initial_states(resolved, bundle, domain, seed)
    report = RunReport("coverage", resolved, seed)
    started_wall = time.perf_counter()

    controllers = [
        ErgodicController(bundle.sys, domain, phi, ctrl_cfg, u_nom=bundle.u_nom, t0erg=t0erg)
        for _ in range(n_agents)
    ]
    hub = Hub(range(n_agents)) if n_agents > 1 else None
    inboxes = {a: [] for a in range(n_agents)}
    normalized = resolved["controller"]["normalized_average"]

    steps = max(int(round((tf - t0) / ctrl_cfg.sample_time)), 0)
    traj_parts = {a: ([], []) for a in range(n_agents)}
    for a in range(n_agents):
        report.step_rows[a] = []
    snapshots_due = sorted(resolved["output"]["snapshot_times"])

    for i in range(steps):
        t_i = t0 + i * ctrl_cfg.sample_time
        messages = {}
        for a, ctrl in enumerate(controllers):
            if hub is not None and inboxes[a]:
                peers = [m.coefficients for m in inboxes[a]]
                if normalized:
                    ctrl.set_peer_offset(np.sum(peers, axis=0) / n_agents, own_weight=1.0 / n_agents)
                else:
                    ctrl.set_peer_offset(np.mean(peers, axis=0))
            result, traj, states[a] = ctrl.step(t_i, states[a])
            report.step_rows[a].append(_step_row(a, result))
            traj_parts[a][0].append(traj.times[:-1])
            traj_parts[a][1].append(traj.states[:-1])
            if not result.fallback:
                messages[a] = CoefficientMessage(
                    a, i, ctrl.t0erg, t_i + ctrl_cfg.horizon, result.coefficients_after
                )
        t_next = t0 + (i + 1) * ctrl_cfg.sample_time
        row = {"time": t_next}
        for a, ctrl in enumerate(controllers):
            row[f"agent{a}"] = ctrl.history_metric(t_next)
        if n_agents > 1:
            pooled = np.sum([c.hist_integral for c in controllers], axis=0)
            pooled = pooled / (n_agents * (t_next - t0erg))
            diff = pooled - phi
            row["collective"] = float(np.sum(lambda_weights(idx) * diff * diff))
        report.ergodicity_rows.append(row)
        if hub is not None:
            inboxes = hub.exchange(messages, i)
        while snapshots_due and t_next >= snapshots_due[0] - 1e-9:
            t_snap = snapshots_due.pop(0)
            coeffs = controllers[0].hist_integral / (t_next - t0erg)
            report.snapshots[t_snap] = reconstruct_statistics(
                coeffs, domain, idx, tuple(resolved["output"]["snapshot_grid"])
            )

    for a in range(n_agents):
        if traj_parts[a][0]:
            times = np.concatenate(traj_parts[a][0] + [np.array([t0 + steps * ctrl_cfg.sample_time])])
            traj_states = np.vstack(traj_parts[a][1] + [states[a][None, :]])
        else:
            times = np.array([t0])
            traj_states = np.asarray(states[a])[None, :]
        report.trajectories[a] = (times, traj_states)

    wall = time.perf_counter() - started_wall
    report.summary = {
        "scenario": "coverage",
        "seed": seed,
        "t0": t0,
        "tf": tf,
        "steps": steps,
        "agents": n_agents,
        "final_ergodicity": {
            k: v for k, v in (report.ergodicity_rows[-1].items() if report.ergodicity_rows else [])
        },
        "fallback_steps": {
            a: int(sum(r["fallback"] for r in rows)) for a, rows in report.step_rows.items()
        },
        "wall_seconds": wall,
        "real_time_factor": (tf - t0) / wall if wall > 0 else float("inf"),
    }
    if hub is not None:
        report.summary["hub_bytes"] = {
            "sent": dict(hub.state.sent_bytes),
            "received": dict(hub.state.received_bytes),
            "per_step_received_per_agent": (n_agents - 1) * (8 * idx.size + 32),
        }
    return report


# -- localization / search -------------------------------------------------------


def _build_truths(resolved: dict, m_dim: int, tf: float, seed: int) -> list[TargetTruth]:
    truths = []
    domain_bounds = np.asarray(resolved["domain"]["bounds"], dtype=float)
    tick = resolved["sensor"]["measure_interval"]
    for entry in resolved["targets"]:
        start = entry["start"]
        if start == "random":
            rng = np.random.default_rng([seed, _NS_PLACE, entry["id"]])
            planar = 0.1 * domain_bounds + rng.uniform(size=2) * 0.8 * domain_bounds
            start = list(planar) + [0.0] * (m_dim - 2)
        bounds = list(domain_bounds) + [None] * (m_dim - 2)
        truths.append(
            TargetTruth(
                entry["id"],
                np.asarray(start, dtype=float),
                motion=entry["motion"],
                waypoints=entry.get("waypoints"),
                step_std=entry["step_std"],
                tick=tick,
                horizon=tf,
                seed=[seed, _NS_MOTION, entry["id"]],
                bounds=domain_bounds if m_dim == 2 else None,
                appear_time=entry["appear_time"],
            )
        )
    return truths


def _initial_beliefs(resolved: dict, truths, m_dim: int, seed: int) -> dict[int, TargetBelief]:
    beliefs = {}
    domain_bounds = np.asarray(resolved["domain"]["bounds"], dtype=float)
    for entry in resolved["targets"]:
        cov_diag = entry["initial_cov_diag"] or [0.01] * m_dim
        mean = entry["initial_mean"]
        if mean == "random" or (mean is None and entry["initial_detected"]):
            rng = np.random.default_rng([seed, _NS_PLACE, 1000 + entry["id"]])
            planar = 0.1 * domain_bounds + rng.uniform(size=2) * 0.8 * domain_bounds
            mean = list(planar) + [0.0] * (m_dim - 2)
        if mean is None:
            continue
        beliefs[entry["id"]] = TargetBelief(
            entry["id"], np.asarray(mean, dtype=float), np.diag(cov_diag),
            detected=entry["initial_detected"],
        )
    return beliefs


def _run_sensing(resolved: dict, search_mode: bool) -> RunReport:
    domain = SearchDomain(len(resolved["domain"]["bounds"]), tuple(resolved["domain"]["bounds"]))
    bundle = _build_system(resolved)
    ctrl_cfg = _controller_config(resolved)
    ctrl_cfg.validate(bundle.sys.m)
    seed = resolved["run"]["seed"]
    idx = IndexSet(ctrl_cfg.coeff_order, domain.nu)
    sensor_cfg = resolved["sensor"]
    eid_cfg = resolved["eid"]
    if sensor_cfg["model"] == "bearing2d":
        model = bearing_model_2d(sensor_cfg["noise_diag"][0])
    else:
        model = bearing_model_3d(tuple(sensor_cfg["noise_diag"]))
    m_dim = model.param_dim

    t0, tf = resolved["run"]["t0"], resolved["run"]["tf"]
    truths = _build_truths(resolved, m_dim, tf, seed)
    beliefs = _initial_beliefs(resolved, truths, m_dim, seed)
    rngs = {tr.id: np.random.default_rng([seed, _NS_MEASURE, tr.id]) for tr in truths}
    process_cov = np.diag(sensor_cfg["process_noise_diag"])
    radius = sensor_cfg["range"]
    t_meas = sensor_cfg["measure_interval"]
    max_targets = eid_cfg["max_targets"] if eid_cfg["max_targets"] is not None else len(truths)

    floor_state = {"floor": eid_cfg["exploration_floor"], "drop_time": None}
    detection_times: dict[int, float] = {
        tr.id: t0 for tr in truths
        if beliefs.get(tr.id) is not None and beliefs[tr.id].detected
    }
    first_localized: dict[int, float] = {}
    first_measurement: dict[int, float] = {}
    assumption_ok: dict[int, bool] = {tr.id: False for tr in truths}
    filter_health = {"skipped_updates": 0}
    current_grid = {"grid": None}

    report = RunReport("search" if search_mode else "localize", resolved, seed)
    report.step_rows[0] = []

    n_agents = resolved["agents"]["count"]
    states = _initial_states(resolved, bundle, domain, seed)
    controllers = [
        ErgodicController(bundle.sys, domain, np.zeros(idx.size), ctrl_cfg,
                          u_nom=bundle.u_nom, t0erg=t0)
        for _ in range(n_agents)
    ]
    for a in range(n_agents):
        report.step_rows[a] = []
    hub = Hub(range(n_agents)) if n_agents > 1 else None
    inboxes = {a: [] for a in range(n_agents)}
    normalized = resolved["controller"]["normalized_average"]
    started_wall = time.perf_counter()

    def rebuild_eid(t_now: float) -> np.ndarray:
        detected = [b for b in beliefs.values() if b.detected]
        belief_grids = [
            BeliefGrid.from_gaussian(b.mean, b.covariance, eid_cfg["belief_cells"],
                                     eid_cfg["belief_halfwidth"])
            for b in detected
        ]
        grid = build_eid_grid(
            model, belief_grids, bundle.sensor_tail, domain, tuple(eid_cfg["grid"]),
            floor_state["floor"], support_cutoff=eid_cfg["support_cutoff"],
        )
        current_grid["grid"] = grid
        for tr in truths:
            if tr.present(t_now) and not assumption_ok[tr.id]:
                centers = grid.centers()
                near = np.linalg.norm(centers - tr.position(t_now)[:2], axis=1) < radius
                if np.any(grid.values.reshape(-1)[near] > 0.0):
                    assumption_ok[tr.id] = True
        return distribution_coeffs(grid, idx)

    # history buffers per agent for the moving ergodic-memory window
    buffers = {a: ([], [], None) for a in range(n_agents)}

    def sense(t_tick: float):
        for tr in truths:
            if tr.id in beliefs and beliefs[tr.id].detected:
                beliefs[tr.id] = ekf_predict(beliefs[tr.id], process_cov)
        for a in range(n_agents):
            sensor_state = bundle.sensor_state(sense_states[a])
            events = detect_and_measure(
                truths, beliefs, sensor_state, model, radius, rngs, t_tick,
                min_range=sensor_cfg["min_range"], init_std=sensor_cfg["init_std"],
                gate_dims=2,
            )
            for ev in events:
                if ev.new_detection and ev.target_id not in detection_times:
                    detection_times[ev.target_id] = t_tick
                if ev.measurement.size and ev.target_id not in first_measurement:
                    first_measurement[ev.target_id] = t_tick
                if ev.skipped_update:
                    filter_health["skipped_updates"] += 1
        if search_mode and floor_state["drop_time"] is None and len(detection_times) >= max_targets:
            floor_state["floor"] = 0.0
            floor_state["drop_time"] = t_tick
        for tr in truths:
            belief = beliefs.get(tr.id)
            localized = localization_status(belief, tr.position(t_tick))
            if localized and tr.id not in first_localized:
                first_localized[tr.id] = t_tick
            if belief is not None:
                report.belief_rows.append({
                    "time": t_tick,
                    "target": tr.id,
                    "detected": int(belief.detected),
                    "mean": belief.mean,
                    "cov_diag": np.diag(belief.covariance),
                    "localized": int(localized),
                })

    steps_total = max(int(round((tf - t0) / ctrl_cfg.sample_time)), 0)
    steps_per_leg = int(round(eid_cfg["refresh_interval"] / ctrl_cfg.sample_time))
    memory = ctrl_cfg.ergodic_memory
    traj_parts = {a: ([], []) for a in range(n_agents)}
    sense_states = [s.copy() for s in states]
    done = 0
    t_curr = t0
    next_meas = t0 + t_meas
    while done < steps_total:
        phi = rebuild_eid(t_curr)
        t0erg = max(t0, t_curr - memory)
        for a, ctrl in enumerate(controllers):
            past_t, past_x, last = buffers[a]
            history = None
            if past_t and last is not None:
                times = np.concatenate(past_t + [np.array([last[0]])])
                statesp = np.vstack(past_x + [last[1][None, :]])
                keep = times >= t0erg - 1e-9
                if np.count_nonzero(keep) >= 2:
                    history = TrajectorySegment(times[keep], statesp[keep])
                trimmed = keep[:-1]
                buffers[a] = (
                    [times[:-1][trimmed]] if np.any(trimmed) else [],
                    [statesp[:-1][trimmed]] if np.any(trimmed) else [],
                    last,
                )
            ctrl.set_distribution(phi)
            ctrl.reset_history(t0erg, history)
        leg_steps = min(steps_per_leg, steps_total - done)
        for _ in range(leg_steps):
            messages = {}
            for a, ctrl in enumerate(controllers):
                if hub is not None and inboxes[a]:
                    peers = [m.coefficients for m in inboxes[a]]
                    if normalized:
                        ctrl.set_peer_offset(np.sum(peers, axis=0) / n_agents, own_weight=1.0 / n_agents)
                    else:
                        ctrl.set_peer_offset(np.mean(peers, axis=0))
                result, traj, states[a] = ctrl.step(t_curr, states[a])
                report.step_rows[a].append(_step_row(a, result))
                traj_parts[a][0].append(traj.times[:-1])
                traj_parts[a][1].append(traj.states[:-1])
                proj = traj.states[:-1][:, list(bundle.sys.ergodic_projection)]
                buffers[a][0].append(traj.times[:-1])
                buffers[a][1].append(proj)
                buffers[a] = (
                    buffers[a][0], buffers[a][1],
                    (float(traj.times[-1]), traj.states[-1][list(bundle.sys.ergodic_projection)].copy()),
                )
                if not result.fallback:
                    messages[a] = CoefficientMessage(
                        a, done, ctrl.t0erg, t_curr + ctrl_cfg.horizon, result.coefficients_after
                    )
            # measurement ticks inside (t_curr, t_curr + t_s]
            t_step_end = t_curr + ctrl_cfg.sample_time
            while next_meas <= t_step_end + 1e-9:
                for a in range(n_agents):
                    tt = traj_parts[a][0][-1]
                    j = min(int(round((next_meas - t_curr) / ctrl_cfg.resolved_dt())), tt.size)
                    full = np.vstack([traj_parts[a][1][-1], states[a][None, :]])
                    sense_states[a] = full[j]
                sense(next_meas)
                next_meas += t_meas
            t_curr = t_step_end
            row = {"time": t_curr}
            for a, ctrl in enumerate(controllers):
                row[f"agent{a}"] = ctrl.history_metric(t_curr)
            report.ergodicity_rows.append(row)
            if hub is not None:
                inboxes = hub.exchange(messages, done)
            done += 1

    for a in range(n_agents):
        if traj_parts[a][0]:
            times = np.concatenate(traj_parts[a][0] + [np.array([t_curr])])
            traj_states = np.vstack(traj_parts[a][1] + [states[a][None, :]])
        else:
            times = np.array([t0])
            traj_states = np.asarray(states[a])[None, :]
        report.trajectories[a] = (times, traj_states)

    wall = time.perf_counter() - started_wall
    present_ids = [tr.id for tr in truths]
    report.summary = {
        "scenario": report.scenario,
        "seed": seed,
        "t0": t0,
        "tf": tf,
        "agents": n_agents,
        "targets": present_ids,
        "detection_times": {str(k): v for k, v in sorted(detection_times.items())},
        "first_measurement_times": {str(k): v for k, v in sorted(first_measurement.items())},
        "localization_times": {str(k): v for k, v in sorted(first_localized.items())},
        "all_localized": len(first_localized) == len(truths),
        "floor_drop_time": floor_state["drop_time"],
        "filter_health_events": filter_health["skipped_updates"],
        "assumption4_violated": sorted(tid for tid, ok in assumption_ok.items() if not ok),
        "wall_seconds": wall,
        "real_time_factor": (tf - t0) / wall if wall > 0 else float("inf"),
    }
    return report


def run_localization(resolved: dict) -> RunReport:
    if resolved["scenario"] != "localize":
        raise ConfigError("run_localization needs a localize scenario config")
    return _run_sensing(resolved, search_mode=False)


def run_search_and_localize(resolved: dict) -> RunReport:
    if resolved["scenario"] != "search":
        raise ConfigError("run_search_and_localize needs a search scenario config")
    return _run_sensing(resolved, search_mode=True)


# -- monte carlo ---------------------------------------------------------------


def _trial_seed(seed_base: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed_base, trial]).generate_state(1)[0])


def _mc_trial(payload):
    resolved, trial, seed_base = payload
    trial_cfg = json.loads(json.dumps(resolved))
    trial_cfg["run"]["seed"] = _trial_seed(seed_base, trial)
    if trial_cfg["scenario"] == "localize":
        report = run_localization(trial_cfg)
    elif trial_cfg["scenario"] == "search":
        report = run_search_and_localize(trial_cfg)
    else:
        report = run_coverage(trial_cfg)
    times = report.summary.get("localization_times", {})
    values = sorted(float(v) for v in times.values())
    return {
        "trial": trial,
        "seed": trial_cfg["run"]["seed"],
        "first_localization": values[0] if values else None,
        "last_localization": values[-1] if len(values) == len(report.summary.get("targets", [])) and values else None,
        "localization_times": {k: float(v) for k, v in times.items()},
        "all_localized": report.summary.get("all_localized", False),
        "detection_times": report.summary.get("detection_times", {}),
        "filter_health_events": report.summary.get("filter_health_events", 0),
    }


def run_monte_carlo(resolved: dict, trials: int, seed_base: int, workers: int = 1) -> dict:
    """Independent seeded trials of one scenario, aggregated."""
    if trials < 1:
        raise ConfigError("need at least one trial")
    payloads = [(resolved, trial, seed_base) for trial in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_mc_trial, payloads))
    else:
        rows = [_mc_trial(p) for p in payloads]
    rows.sort(key=lambda r: r["trial"])
    firsts = [r["first_localization"] for r in rows if r["first_localization"] is not None]
    lasts = [r["last_localization"] for r in rows if r["last_localization"] is not None]
    aggregate = {
        "scenario": resolved["scenario"],
        "trials": trials,
        "seed_base": seed_base,
        "per_trial": rows,
        "success_all_targets": sum(1 for r in rows if r["all_localized"]) / trials,
        "first_localization_times": firsts,
        "last_localization_times": lasts,
    }
    return aggregate


# -- emission ------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_run_report(report: RunReport, out_dir) -> None:
    """Write the run directory: config echo, CSV traces, summary, grids."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(report.config, fh, indent=2, sort_keys=True)

    for agent, rows in report.step_rows.items():
        path = out / f"steps_agent{agent}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            if not rows:
                writer.writerow(["step", "time"])
                continue
            n = rows[0]["state"].size
            m = rows[0]["control"].size
            header = (
                ["step", "time"]
                + [f"x{i}" for i in range(n)]
                + [f"u{i}" for i in range(m)]
                + ["tau_a", "lambda_a", "j_before", "j_after", "bound", "shift_bound",
                   "wall_us", "fallback"]
            )
            writer.writerow(header)
            for row in rows:
                writer.writerow(
                    [row["step"], _fmt(row["time"])]
                    + [_fmt(v) for v in row["state"]]
                    + [_fmt(v) for v in row["control"]]
                    + [_fmt(row["tau_a"]), _fmt(row["lambda_a"]), _fmt(row["j_before"]),
                       _fmt(row["j_after"]), _fmt(row["bound"]), _fmt(row["shift_bound"]),
                       _fmt(row["wall_us"]), row["fallback"]]
                )

    if report.ergodicity_rows:
        keys = list(report.ergodicity_rows[0].keys())
        with open(out / "ergodicity.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(keys)
            for row in report.ergodicity_rows:
                writer.writerow([_fmt(row[k]) for k in keys])

    if report.belief_rows:
        m = report.belief_rows[0]["mean"].size
        with open(out / "beliefs.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["time", "target", "detected"]
                + [f"mean{i}" for i in range(m)]
                + [f"cov{i}" for i in range(m)]
                + ["localized"]
            )
            for row in report.belief_rows:
                writer.writerow(
                    [_fmt(row["time"]), row["target"], row["detected"]]
                    + [_fmt(v) for v in row["mean"]]
                    + [_fmt(v) for v in row["cov_diag"]]
                    + [row["localized"]]
                )

    for t_snap, grid in report.snapshots.items():
        grid.save(out / f"statistics_t{t_snap:g}.grid")

    with open(out / "summary.json", "w") as fh:
        json.dump(report.summary, fh, indent=2, sort_keys=True, default=str)
