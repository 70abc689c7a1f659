"""Receding-horizon ergodic control.

Every sampling period the controller solves one open-loop problem: roll
out the default control, integrate the ergodic costate backward, compute
the closed-form schedule of candidate actions, pick the application time
with the most negative insertion gradient, then line-search a finite
duration that passes the contraction test.  Only one action is
synthesized per step; past actions persist inside the default control
until their window has elapsed, so the stored controller state stays
constant-size as the run grows.

The contraction test compares the candidate open-loop cost against the
previous accepted cost minus the integral of the running-statistics cost
rate over the last sampling interval.  That integral telescopes exactly
to the difference of the running cost potential, which is how it is
evaluated here; the horizon-shifted variant of the same integral is
computed per step and logged alongside for comparison, but does not gate
acceptance.

The cosine statistics cannot distinguish a trajectory from its reflected
periodic images, so leaving the search domain is free as far as the
ergodic metric is concerned.  Containment is therefore this layer's job:
an optional quadratic boundary barrier (zero everywhere inside the box,
so the in-domain math is untouched) is added to the horizon cost and its
gradient to the costate forcing.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    Action,
    ControlAffineSystem,
    ControlSignal,
    IntegrationDivergedError,
    StateTrajectory,
    integrate,
    linearize,
    saturate,
)
from .fourier import (
    IndexSet,
    SearchDomain,
    TrajectorySegment,
    _clip_to_window,
    basis_grad_matrix,
    basis_matrix,
    lambda_weights,
)

__all__ = [
    "ControllerConfig",
    "CostateTrajectory",
    "StepResult",
    "RunLog",
    "ErgodicController",
    "running_grad",
    "integrate_costate",
    "mode_insertion_gradient",
    "action_schedule",
    "ActionSchedule",
    "application_time",
    "contraction_bound",
    "duration_line_search",
    "rhee_run",
    "reactive_run",
]

NO_CONSTRAINT = None


@dataclass
class ControllerConfig:
    """Tuning knobs for one controller instance.

    ``control_weight`` may be a scalar, a diagonal, or a full positive
    definite matrix.  ``desired_rate`` of ``None`` selects the adaptive
    policy ``-scale * ergodic_weight * J / horizon``.
    """

    coeff_order: int = 10
    horizon: float = 0.5
    sample_time: float = 0.05
    ergodic_weight: float = 1.0
    control_weight: object = 1e-2
    desired_rate: float | None = None
    desired_rate_scale: float = 1.0
    ergodic_memory: float = math.inf
    duration_init: float | None = None
    duration_shrink: float = 0.5
    duration_max_iters: int = 10
    dt: float | None = None
    contraction_slack: float = 1e-6
    barrier_weight: float = 0.0
    descent_rescue: bool = False
    debug_capture: bool = False

    def resolved_dt(self) -> float:
        return self.dt if self.dt is not None else self.sample_time / 10.0

    def resolved_duration_init(self) -> float:
        return self.duration_init if self.duration_init is not None else self.sample_time

    def control_weight_matrix(self, m: int) -> np.ndarray:
        r = np.asarray(self.control_weight, dtype=float)
        if r.ndim == 0:
            r = np.diag(np.full(m, float(r)))
        elif r.ndim == 1:
            r = np.diag(r)
        if r.shape != (m, m):
            raise ValueError("control weight must resolve to an m x m matrix")
        return r

    def validate(self, m: int = 1) -> None:
        if self.horizon <= self.sample_time or self.sample_time <= 0.0:
            raise ValueError("require horizon > sample_time > 0")
        if self.ergodic_weight <= 0.0:
            raise ValueError("ergodic weight must be positive")
        if self.desired_rate is not None and self.desired_rate >= 0.0:
            raise ValueError("desired rate must be negative")
        if self.resolved_duration_init() > self.horizon:
            raise ValueError("initial search duration cannot exceed the horizon")
        if not (0.0 < self.duration_shrink < 1.0):
            raise ValueError("duration shrink factor must be in (0, 1)")
        if self.duration_max_iters < 1:
            raise ValueError("duration search needs at least one iteration")
        if self.ergodic_memory < 0.0:
            raise ValueError("ergodic memory must be >= 0")
        if self.barrier_weight < 0.0:
            raise ValueError("barrier weight must be >= 0")
        r = self.control_weight_matrix(m)
        if not np.allclose(r, r.T) or np.any(np.linalg.eigvalsh(r) <= 0.0):
            raise ValueError("control weight must be symmetric positive definite")
        dt = self.resolved_dt()
        if dt <= 0.0 or int(round(self.sample_time / dt)) < 1:
            raise ValueError("dt must be positive and divide the sample time")


@dataclass
class CostateTrajectory:
    """Adjoint solution stored on the forward grid (terminal value zero)."""

    times: np.ndarray
    values: np.ndarray

    def at_index(self, j: int) -> np.ndarray:
        return self.values[j]


@dataclass
class StepResult:
    """Everything the outer loops and the logs need about one step."""

    step_index: int
    time: float
    state: np.ndarray
    applied_control: np.ndarray
    action: Action
    cost_before: float
    cost_after: float
    contraction_bound: float | None
    horizon_shift_bound: float | None
    wall_us: float
    desired_rate: float
    coefficients_after: np.ndarray
    fallback: bool = False
    contraction_ok: bool | None = None

    @property
    def took_action(self) -> bool:
        return self.action.duration > 0.0


def running_grad(
    c_now: np.ndarray,
    phi: np.ndarray,
    domain: SearchDomain,
    idx: IndexSet,
    window: tuple[float, float],
    x: np.ndarray,
    projection: tuple[int, ...],
    n_states: int,
    ergodic_weight: float = 1.0,
) -> np.ndarray:
    """Cost-rate gradient of the windowed ergodic cost at one state.

    Returns the full-state vector: nonzero only in the ergodically
    explored coordinates selected by ``projection``.
    """
    t_lo, t_hi = window
    if t_hi <= t_lo:
        raise ValueError("window must have positive length")
    point = np.asarray(x, dtype=float)[list(projection)]
    grads = basis_grad_matrix(domain, idx, point[None, :])[0]
    weights = lambda_weights(idx) * (np.asarray(c_now) - np.asarray(phi))
    ell_nu = (2.0 * ergodic_weight / (t_hi - t_lo)) * (weights @ grads)
    out = np.zeros(n_states)
    out[list(projection)] = ell_nu
    return out


def _forcing_profile(
    x_def: StateTrajectory,
    c_def: np.ndarray,
    phi: np.ndarray,
    domain: SearchDomain,
    idx: IndexSet,
    window: tuple[float, float],
    projection: tuple[int, ...],
    ergodic_weight: float,
) -> np.ndarray:
    """Vectorized cost-rate gradient along a rollout, shape (S+1, n)."""
    pts = x_def.states[:, list(projection)]
    grads = basis_grad_matrix(domain, idx, pts)
    weights = lambda_weights(idx) * (c_def - phi)
    ell_nu = (2.0 * ergodic_weight / (window[1] - window[0])) * np.einsum(
        "scv,c->sv", grads, weights
    )
    out = np.zeros((x_def.states.shape[0], x_def.states.shape[1]))
    out[:, list(projection)] = ell_nu
    return out


def integrate_costate(
    sys: ControlAffineSystem,
    x_def: StateTrajectory,
    c_def: np.ndarray,
    phi: np.ndarray,
    domain: SearchDomain,
    idx: IndexSet,
    cfg: ControllerConfig,
    window: tuple[float, float],
    forcing=None,
    forcing_scale: float = 1.0,
    forcing_extra=None,
) -> CostateTrajectory:
    """Backward RK4 solve of the adjoint from a zero terminal condition.

    ``forcing`` overrides the computed cost-rate gradient (diagnostics
    and tests); it must map ``(t, x) -> n-vector``.  ``forcing_scale``
    multiplies the computed gradient (the chain-rule factor when the own
    statistics enter the residual with a weight).  ``forcing_extra``
    post-processes the whole forcing profile in place (boundary terms).
    """
    times = x_def.times
    n_samples = times.size
    if forcing is None:
        ell = _forcing_profile(
            x_def, c_def, phi, domain, idx, window, sys.ergodic_projection,
            cfg.ergodic_weight * forcing_scale,
        )
    else:
        ell = np.array([forcing(times[j], x_def.states[j]) for j in range(n_samples)])
    if forcing_extra is not None:
        ell = forcing_extra(ell)
    a_mats = np.empty((n_samples, sys.n, sys.n))
    for j in range(n_samples):
        a_mats[j] = linearize(sys, times[j], x_def.states[j], x_def.controls[j])

    values = np.zeros((n_samples, sys.n))
    rho = np.zeros(sys.n)
    for j in range(n_samples - 1, 0, -1):
        dt = times[j] - times[j - 1]
        a_hi, a_lo = a_mats[j], a_mats[j - 1]
        a_mid = 0.5 * (a_hi + a_lo)
        l_hi, l_lo = ell[j], ell[j - 1]
        l_mid = 0.5 * (l_hi + l_lo)
        k1 = -l_hi - a_hi.T @ rho
        r2 = rho - 0.5 * dt * k1
        k2 = -l_mid - a_mid.T @ r2
        r3 = rho - 0.5 * dt * k2
        k3 = -l_mid - a_mid.T @ r3
        r4 = rho - dt * k3
        k4 = -l_lo - a_lo.T @ r4
        rho = rho - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(rho)):
            raise IntegrationDivergedError(times[j - 1])
        values[j - 1] = rho
    return CostateTrajectory(times.copy(), values)


def mode_insertion_gradient(
    rho: np.ndarray,
    sys: ControlAffineSystem,
    t: float,
    x: np.ndarray,
    u_candidate: np.ndarray,
    u_default: np.ndarray,
) -> float:
    """First-order cost sensitivity to an infinitesimal control switch."""
    delta = sys.f(t, x, u_candidate) - sys.f(t, x, u_default)
    return float(np.dot(rho, delta))


@dataclass
class ActionSchedule:
    """Candidate action values over the horizon plus search byproducts."""

    times: np.ndarray
    values: np.ndarray
    raw_values: np.ndarray
    insertion_gradients: np.ndarray


def action_schedule(
    rho_traj: CostateTrajectory,
    x_def: StateTrajectory,
    sys: ControlAffineSystem,
    cfg: ControllerConfig,
    desired_rate: float,
) -> ActionSchedule:
    """Closed-form minimizer of the schedule objective at every sample.

    At each time the unconstrained minimizer solves ``(b b^T + R^T) u =
    b b^T u_def + b * rate`` with ``b = h^T rho``; the result is then
    saturated into the input box.
    """
    times = rho_traj.times
    n_samples = times.size
    r_mat = cfg.control_weight_matrix(sys.m)
    b = np.empty((n_samples, sys.m))
    for j in range(n_samples):
        b[j] = sys.input_map(times[j], x_def.states[j]).T @ rho_traj.values[j]
    lam = b[:, :, None] * b[:, None, :]
    systems = lam + r_mat.T
    rhs = np.einsum("smk,sk->sm", lam, x_def.controls) + b * desired_rate
    raw = np.linalg.solve(systems, rhs[:, :, None])[:, :, 0]
    sat = np.clip(raw, sys.u_min, sys.u_max)
    grads = np.einsum("sm,sm->s", b, sat - x_def.controls)
    return ActionSchedule(times, sat, raw, grads)


def application_time(schedule: ActionSchedule, window: tuple[float, float] | None = None):
    """Pick the sample with the most negative insertion gradient.

    Returns ``(index, time, value)``; ``index`` is ``None`` when no
    candidate improves the cost (gradient nonnegative everywhere).
    Ties break toward the earliest time.
    """
    mask = np.ones(schedule.times.size, dtype=bool)
    if window is not None:
        mask = (schedule.times >= window[0] - 1e-12) & (schedule.times <= window[1] + 1e-12)
    grads = np.where(mask, schedule.insertion_gradients, np.inf)
    j = int(np.argmin(grads))
    if not np.isfinite(grads[j]) or grads[j] >= 0.0:
        return None, None, None
    return j, float(schedule.times[j]), schedule.values[j].copy()


def _running_cost_rate(
    times: np.ndarray,
    basis_vals: np.ndarray,
    cum_integral: np.ndarray,
    phi: np.ndarray,
    lambdas: np.ndarray,
    ergodic_weight: float,
    t0erg: float,
    velocity_basis_rate: np.ndarray | None = None,
) -> np.ndarray:
    """Pointwise rate of change of the running ergodic cost.

    ``cum_integral[j]`` is the unnormalized basis integral from the start
    of exploration to ``times[j]``.  At the very start of exploration the
    rate is evaluated by its one-sided limit, which needs the basis time
    derivative (``velocity_basis_rate``).
    """
    out = np.empty(times.size)
    for j in range(times.size):
        elapsed = times[j] - t0erg
        if elapsed > 1e-12:
            c_run = cum_integral[j] / elapsed
            out[j] = (2.0 * ergodic_weight / elapsed) * float(
                np.sum(lambdas * (c_run - phi) * (basis_vals[j] - c_run))
            )
        elif velocity_basis_rate is not None:
            out[j] = ergodic_weight * float(
                np.sum(lambdas * (basis_vals[j] - phi) * velocity_basis_rate[j])
            )
        else:
            out[j] = 0.0
    return out


def contraction_bound(
    traj: TrajectorySegment,
    phi: np.ndarray,
    domain: SearchDomain,
    idx: IndexSet,
    cfg: ControllerConfig,
    interval: tuple[float, float],
    t0erg: float,
    u_def=None,
):
    """Trapezoid integral of the running cost rate over ``interval``.

    ``traj`` must cover ``[t0erg, interval[1]]`` so the running
    statistics are available.  Returns the no-constraint sentinel when
    the interval is empty or precedes available history.  ``u_def`` is
    accepted for interface completeness; the realized cost rate is
    control-independent.
    """
    lo, hi = interval
    if hi <= lo + 1e-12:
        return 0.0 if hi >= lo else NO_CONSTRAINT
    if traj.times[0] > t0erg + 1e-9 or traj.times[-1] < hi - 1e-9:
        return NO_CONSTRAINT
    lambdas = lambda_weights(idx)
    basis = basis_matrix(domain, idx, traj.states)
    seg_w = np.diff(traj.times)
    increments = 0.5 * seg_w[:, None] * (basis[1:] + basis[:-1])
    cum = np.vstack([np.zeros(idx.size), np.cumsum(increments, axis=0)])
    sel = (traj.times >= lo - 1e-12) & (traj.times <= hi + 1e-12)
    if np.count_nonzero(sel) < 2:
        return NO_CONSTRAINT
    vel_rate = None
    if traj.times[sel][0] - t0erg <= 1e-12:
        grads = basis_grad_matrix(domain, idx, traj.states)
        xdot = np.gradient(traj.states, traj.times, axis=0)
        vel_rate = np.einsum("scv,sv->sc", grads, xdot)
        vel_rate = vel_rate[sel]
    rate = _running_cost_rate(
        traj.times[sel], basis[sel], cum[sel], phi, lambdas, cfg.ergodic_weight, t0erg, vel_rate
    )
    return float(np.trapezoid(rate, traj.times[sel]))


def duration_line_search(candidate, evaluate, cfg: ControllerConfig, dt: float, horizon_end: float):
    """Shrink the action duration until the contraction test accepts.

    ``candidate`` is ``(tau, value)`` from the application-time search
    (``tau = None`` encodes "no action"); ``evaluate`` maps a duration to
    ``(accepted, payload)``.  Durations are snapped to the integration
    grid and clipped at the horizon end.  Returns ``(Action, payload)``
    for the first accepted duration, or ``None`` on exhaustion -- the
    caller encodes that as a zero-duration action.
    """
    tau, value = candidate
    if tau is None:
        return None
    lam = cfg.resolved_duration_init()
    tried = set()
    for _ in range(cfg.duration_max_iters):
        snapped = round(lam / dt) * dt
        snapped = min(snapped, horizon_end - tau)
        if snapped >= dt * 0.5 and snapped not in tried:
            tried.add(snapped)
            accepted, cost = evaluate(snapped)
            if accepted:
                return Action(value, tau, snapped), cost
        lam *= cfg.duration_shrink
    return None


class ErgodicController:
    """Single-agent receding-horizon ergodic controller.

    Owns the trajectory statistics, the persisted control signal, and the
    contraction bookkeeping.  Instances are single-owner mutable state:
    never share one across concurrent executors.
    """

    def __init__(
        self,
        sys: ControlAffineSystem,
        domain: SearchDomain,
        phi: np.ndarray,
        cfg: ControllerConfig,
        u_nom=None,
        t0erg: float = 0.0,
    ):
        cfg.validate(sys.m)
        if domain.nu != sys.nu:
            raise ValueError("domain dimension must match the ergodic projection")
        self.sys = sys
        self.domain = domain
        self.cfg = cfg
        self.idx = IndexSet(cfg.coeff_order, domain.nu)
        self.lambdas = lambda_weights(self.idx)
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.idx.size,):
            raise ValueError("distribution coefficient length mismatch")
        self.phi = phi
        self.peer_offset = np.zeros(self.idx.size)
        self.own_stat_weight = 1.0
        default = u_nom if u_nom is not None else np.zeros(sys.m)
        self._nominal = default
        self.signal = ControlSignal(default, sys.u_min, sys.u_max)
        self.dt = cfg.resolved_dt()
        self.t0erg = t0erg
        self.hist_integral = np.zeros(self.idx.size)
        self.hist_end: float | None = None
        self.step_index = 0
        self.prev_cost_star: float | None = None
        self.prev_bound: float | None = None
        self._potential_prev: float | None = None
        self.last_solve: dict | None = None

    # -- state management ------------------------------------------------

    def set_peer_offset(self, offset: np.ndarray | None, own_weight: float = 1.0) -> None:
        """Install the peers' statistics term for the next open-loop solve.

        The cost residual becomes ``own_weight * c_own + offset - phi``:
        the additive sharing rule uses ``own_weight = 1`` with the peer
        average as the offset, the normalized variant ``1/N`` with the
        peer sum over N.
        """
        if offset is None:
            self.peer_offset = np.zeros(self.idx.size)
            self.own_stat_weight = 1.0
        else:
            offset = np.asarray(offset, dtype=float)
            if offset.shape != (self.idx.size,):
                raise ValueError("peer offset length mismatch")
            self.peer_offset = offset
            self.own_stat_weight = float(own_weight)

    def set_distribution(self, phi: np.ndarray) -> None:
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.idx.size,):
            raise ValueError("distribution coefficient length mismatch")
        self.phi = phi

    def reset_history(self, t0erg: float, history: TrajectorySegment | None = None) -> None:
        """Restart exploration statistics at a new window origin.

        ``history`` supplies past ergodic-coordinate samples that fall
        inside the new window; anything before ``t0erg`` is ignored.
        """
        self.t0erg = t0erg
        self.hist_integral = np.zeros(self.idx.size)
        self.hist_end = None
        self.step_index = 0
        self.prev_cost_star = None
        self.prev_bound = None
        self._potential_prev = None
        self.signal = ControlSignal(self._nominal, self.sys.u_min, self.sys.u_max)
        if history is not None and history.times[-1] > t0erg + 1e-12:
            lo = max(t0erg, history.times[0])
            t, xs = _clip_to_window(history.times, history.states, lo, history.times[-1])
            basis = basis_matrix(self.domain, self.idx, xs)
            self.hist_integral = np.trapezoid(basis, t, axis=0)
            self.hist_end = float(history.times[-1])

    def state_size(self) -> int:
        """Float count of persisted statistics plus retained action values."""
        return self.hist_integral.size + sum(a.value.size + 2 for a in self.signal.actions)

    # -- internals ---------------------------------------------------------

    def _project(self, states: np.ndarray) -> np.ndarray:
        return states[:, list(self.sys.ergodic_projection)]

    def _barrier_values(self, pts: np.ndarray) -> np.ndarray:
        """Squared distance outside the box, per sample (zero inside)."""
        bounds = np.asarray(self.domain.bounds)
        excess = np.maximum(pts - bounds, 0.0) + np.minimum(pts, 0.0)
        return np.sum(excess * excess, axis=1)

    def _barrier_grads(self, pts: np.ndarray) -> np.ndarray:
        bounds = np.asarray(self.domain.bounds)
        excess = np.maximum(pts - bounds, 0.0) + np.minimum(pts, 0.0)
        return 2.0 * excess

    def _window(self, t_i: float) -> tuple[float, float]:
        return (self.t0erg, t_i + self.cfg.horizon)

    def _cost_from_residual(self, c_own: np.ndarray) -> float:
        diff = self.own_stat_weight * c_own + self.peer_offset - self.phi
        return self.cfg.ergodic_weight * float(np.sum(self.lambdas * diff * diff))

    def _running_potential(self, t: float, x_now: np.ndarray | None = None) -> float:
        """Running ergodic cost of the realized history at time ``t``."""
        elapsed = t - self.t0erg
        if elapsed <= 1e-12:
            if x_now is None:
                return 0.0
            point = self._project(x_now[None, :])
            c_run = basis_matrix(self.domain, self.idx, point)[0]
        else:
            c_run = self.hist_integral / elapsed
        return self._cost_from_residual(c_run)

    # -- the open-loop problem ----------------------------------------------

    def solve_open_loop(self, t_i: float, x_i: np.ndarray):
        """Synthesize this step's control; returns ``(signal, StepResult)``."""
        started = time.perf_counter()
        cfg = self.cfg
        horizon_end = t_i + cfg.horizon
        window = self._window(t_i)
        w_len = window[1] - window[0]
        signal = self.signal.pruned(t_i)

        try:
            x_def = integrate(self.sys, x_i, t_i, horizon_end, signal, self.dt)
        except IntegrationDivergedError:
            return self._fallback(t_i, x_i, signal, started)

        pts = self._project(x_def.states)
        basis = basis_matrix(self.domain, self.idx, pts)
        seg_w = np.diff(x_def.times)
        increments = 0.5 * seg_w[:, None] * (basis[1:] + basis[:-1])
        cum = np.vstack([np.zeros(self.idx.size), np.cumsum(increments, axis=0)])

        bar_scale = cfg.barrier_weight / cfg.horizon
        if bar_scale > 0.0:
            bar_vals = self._barrier_values(pts)
            bar_cum = np.concatenate(
                [[0.0], np.cumsum(0.5 * seg_w * (bar_vals[1:] + bar_vals[:-1]))]
            )
        else:
            bar_cum = None

        c_def = (self.hist_integral + cum[-1]) / w_len
        cost_before = self._cost_from_residual(c_def)
        if bar_cum is not None:
            cost_before += bar_scale * bar_cum[-1]
        rate = (
            cfg.desired_rate
            if cfg.desired_rate is not None
            else -cfg.desired_rate_scale * cfg.ergodic_weight * max(cost_before, 1e-12) / cfg.horizon
        )

        barrier_forcing = None
        if bar_scale > 0.0:
            def barrier_forcing(profile):
                grads = bar_scale * self._barrier_grads(pts)
                profile[:, list(self.sys.ergodic_projection)] += grads
                return profile

        try:
            rho = integrate_costate(
                self.sys, x_def, self.own_stat_weight * c_def + self.peer_offset, self.phi,
                self.domain, self.idx, cfg, window, forcing_scale=self.own_stat_weight,
                forcing_extra=barrier_forcing,
            )
        except IntegrationDivergedError:
            return self._fallback(t_i, x_i, signal, started)

        schedule = action_schedule(rho, x_def, self.sys, cfg, rate)
        j_tau, tau, u_a = application_time(schedule)

        shift_bound = self._horizon_shift_bound(t_i, x_def.times, basis, cum, w_len)

        jt_best = schedule.insertion_gradients[j_tau] if j_tau is not None else 0.0

        def evaluate(duration: float):
            j_start = int(round((tau - t_i) / self.dt))
            cand_signal = signal.with_action(Action(u_a, tau, duration))
            try:
                tail = integrate(
                    self.sys, x_def.states[j_start], tau, horizon_end, cand_signal, self.dt
                )
            except IntegrationDivergedError:
                return False, None
            tail_pts = self._project(tail.states)
            tail_basis = basis_matrix(self.domain, self.idx, tail_pts)
            tail_integral = np.trapezoid(tail_basis, tail.times, axis=0)
            c_cand = (self.hist_integral + cum[j_start] + tail_integral) / w_len
            cost = self._cost_from_residual(c_cand)
            if bar_cum is not None:
                tail_bar = np.trapezoid(self._barrier_values(tail_pts), tail.times)
                cost += bar_scale * (bar_cum[j_start] + tail_bar)
            # primary acceptance: the per-step contraction staircase; when
            # that is infeasible (cost rising under the default dynamics, a
            # regime the staircase cannot express) an optional rescue accepts
            # sufficient descent against the default rollout instead, so
            # control stays active in contained scenarios
            eq20_ok = None
            if self.step_index > 0 and self.prev_cost_star is not None and self.prev_bound is not None:
                limit = (
                    self.prev_cost_star
                    - self.prev_bound
                    + cfg.contraction_slack * abs(self.prev_cost_star)
                )
                eq20_ok = cost <= limit
                accepted = bool(eq20_ok)
            else:
                accepted = cost < cost_before
            if not accepted and cfg.descent_rescue:
                accepted = cost - cost_before <= 0.5 * duration * jt_best
            return accepted, (cost, c_cand, eq20_ok)

        found = duration_line_search((tau, u_a), evaluate, cfg, self.dt, horizon_end)

        if found is not None:
            action, (cost_after, c_after, eq20_flag) = found
            new_signal = signal.with_action(action)
        else:
            action = Action(np.zeros(self.sys.m), t_i, 0.0)
            new_signal = signal
            cost_after, c_after, eq20_flag = cost_before, c_def, None

        wall_us = (time.perf_counter() - started) * 1e6
        result = StepResult(
            step_index=self.step_index,
            time=t_i,
            state=np.asarray(x_i, dtype=float).copy(),
            applied_control=new_signal.value_at(t_i, x_i),
            action=action,
            cost_before=cost_before,
            cost_after=cost_after,
            contraction_bound=self.prev_bound if self.step_index > 0 else NO_CONSTRAINT,
            horizon_shift_bound=shift_bound,
            wall_us=wall_us,
            desired_rate=rate,
            coefficients_after=c_after,
            contraction_ok=eq20_flag,
        )
        if cfg.debug_capture:
            self.last_solve = {
                "x_def": x_def,
                "rho": rho,
                "schedule": schedule,
                "c_def": c_def,
                "cost_before": cost_before,
                "desired_rate": rate,
                "window": window,
            }
        return new_signal, result

    def _horizon_shift_bound(self, t_i, times, basis, cum, w_len):
        """Cost-rate integral over the trailing horizon shift (logged only)."""
        if self.step_index == 0:
            return NO_CONSTRAINT
        lo = t_i + self.cfg.horizon - self.cfg.sample_time
        hi = t_i + self.cfg.horizon
        c_hi = (self.hist_integral + cum[-1]) / w_len
        j_lo = int(np.searchsorted(times, lo - 1e-12))
        c_lo = (self.hist_integral + cum[j_lo]) / (times[j_lo] - self.t0erg)
        return self._cost_from_residual(c_hi) - self._cost_from_residual(c_lo)

    def _fallback(self, t_i, x_i, signal, started):
        wall_us = (time.perf_counter() - started) * 1e6
        action = Action(np.zeros(self.sys.m), t_i, 0.0)
        result = StepResult(
            step_index=self.step_index,
            time=t_i,
            state=np.asarray(x_i, dtype=float).copy(),
            applied_control=signal.value_at(t_i, x_i),
            action=action,
            cost_before=float("nan"),
            cost_after=float("nan"),
            contraction_bound=NO_CONSTRAINT,
            horizon_shift_bound=NO_CONSTRAINT,
            wall_us=wall_us,
            desired_rate=0.0,
            coefficients_after=np.full(self.idx.size, np.nan),
            fallback=True,
        )
        return signal, result

    # -- closed-loop advancement ---------------------------------------------

    def apply_step(self, t_i: float, x_i: np.ndarray, signal: ControlSignal):
        """Apply the step's control for one sampling period.

        Returns ``(segment, next_state)`` and folds the realized segment
        into the stored statistics and contraction bookkeeping.
        """
        t_next = t_i + self.cfg.sample_time
        traj = integrate(self.sys, x_i, t_i, t_next, signal, self.dt)
        pts = self._project(traj.states)
        potential_before = self._running_potential(t_i, traj.states[0])
        basis = basis_matrix(self.domain, self.idx, pts)
        self.hist_integral = self.hist_integral + np.trapezoid(basis, traj.times, axis=0)
        self.hist_end = t_next
        potential_after = self._running_potential(t_next)
        self.prev_bound = potential_after - potential_before
        self.signal = signal.pruned(t_next)
        self.step_index += 1
        return traj, traj.states[-1].copy()

    def step(self, t_i: float, x_i: np.ndarray):
        """One full controller cycle: solve, store, apply."""
        signal, result = self.solve_open_loop(t_i, x_i)
        self.prev_cost_star = result.cost_after if not result.fallback else self.prev_cost_star
        traj, x_next = self.apply_step(t_i, x_i, signal)
        return result, traj, x_next

    def history_metric(self, t: float) -> float:
        """Ergodicity of the realized trajectory alone (no horizon term)."""
        elapsed = t - self.t0erg
        if elapsed <= 1e-12:
            return float("nan")
        diff = self.hist_integral / elapsed - self.phi
        return float(np.sum(self.lambdas * diff * diff))


@dataclass
class RunLog:
    """Closed-loop record of one controller run."""

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    steps: list[StepResult]
    metric_times: np.ndarray
    metric_values: np.ndarray

    def trajectory_segment(self, projection) -> TrajectorySegment:
        return TrajectorySegment(self.times, self.states[:, list(projection)])


def _run_loop(ctrl: ErgodicController, t0: float, x0: np.ndarray, tf: float, on_step=None) -> RunLog:
    steps = max(int(round((tf - t0) / ctrl.cfg.sample_time)), 0)
    all_t, all_x, all_u = [], [], []
    results = []
    metric_t, metric_v = [], []
    x = np.asarray(x0, dtype=float).copy()
    t = t0
    for i in range(steps):
        result, traj, x = ctrl.step(t, x)
        results.append(result)
        keep = slice(0, traj.times.size - 1)
        all_t.append(traj.times[keep])
        all_x.append(traj.states[keep])
        all_u.append(traj.controls[keep])
        t = t0 + (i + 1) * ctrl.cfg.sample_time
        metric_t.append(t)
        metric_v.append(ctrl.history_metric(t))
        if on_step is not None:
            on_step(result, traj)
    if steps:
        all_t.append(np.array([t]))
        all_x.append(x[None, :])
        all_u.append(np.zeros((1, ctrl.sys.m)))
        times = np.concatenate(all_t)
        states = np.vstack(all_x)
        controls = np.vstack(all_u)
    else:
        times = np.array([t0])
        states = np.asarray(x0, dtype=float)[None, :]
        controls = np.zeros((1, ctrl.sys.m))
    return RunLog(times, states, controls, results, np.asarray(metric_t), np.asarray(metric_v))


def rhee_run(
    t0: float,
    x0: np.ndarray,
    phi: np.ndarray,
    t0erg: float,
    tf: float,
    sys: ControlAffineSystem,
    domain: SearchDomain,
    cfg: ControllerConfig,
    u_nom=None,
    history: TrajectorySegment | None = None,
    on_step=None,
) -> RunLog:
    """Receding-horizon ergodic exploration between ``t0`` and ``tf``."""
    if tf < t0:
        raise ValueError("final time must not precede start time")
    ctrl = ErgodicController(sys, domain, phi, cfg, u_nom=u_nom, t0erg=t0erg)
    if history is not None:
        ctrl.reset_history(t0erg, history)
    return _run_loop(ctrl, t0, x0, tf, on_step=on_step)


def reactive_run(
    phi_fn,
    refresh_interval: float,
    t0: float,
    x0: np.ndarray,
    tf: float,
    sys: ControlAffineSystem,
    domain: SearchDomain,
    cfg: ControllerConfig,
    u_nom=None,
    on_step=None,
    on_refresh=None,
) -> RunLog:
    """Receding-horizon exploration that re-reads the distribution.

    Every ``refresh_interval`` seconds the distribution coefficients are
    recomputed via ``phi_fn(t) -> coefficient vector`` and the window
    origin moves to ``max(t0, t - ergodic_memory)``; trajectory history
    inside the window is re-folded into the statistics, so recent
    coverage is remembered while older coverage ages out.
    """
    if refresh_interval < cfg.sample_time - 1e-12:
        raise ValueError("refresh interval must be at least the sample time")
    steps_per_leg = int(round(refresh_interval / cfg.sample_time))
    if abs(steps_per_leg * cfg.sample_time - refresh_interval) > 1e-9:
        raise ValueError("refresh interval must be a multiple of the sample time")
    ctrl = ErgodicController(sys, domain, phi_fn(t0), cfg, u_nom=u_nom, t0erg=t0)
    proj = list(sys.ergodic_projection)
    buffer_t: list[np.ndarray] = []
    buffer_x: list[np.ndarray] = []
    last_sample: tuple[float, np.ndarray] | None = None

    all_t, all_x, all_u = [], [], []
    results: list[StepResult] = []
    metric_t, metric_v = [], []
    x = np.asarray(x0, dtype=float).copy()
    t_curr = t0
    total_steps = max(int(round((tf - t0) / cfg.sample_time)), 0)
    done = 0
    while done < total_steps:
        t0erg = max(t0, t_curr - cfg.ergodic_memory)
        history = None
        if buffer_t and last_sample is not None:
            times = np.concatenate(buffer_t + [np.array([last_sample[0]])])
            statesp = np.vstack(buffer_x + [last_sample[1][None, :]])
            keep = times >= t0erg - 1e-9
            if np.count_nonzero(keep) >= 2:
                history = TrajectorySegment(times[keep], statesp[keep])
            trimmed = keep[:-1]
            if np.any(trimmed):
                buffer_t, buffer_x = [times[:-1][trimmed]], [statesp[:-1][trimmed]]
            else:
                buffer_t, buffer_x = [], []
        ctrl.set_distribution(phi_fn(t_curr))
        ctrl.reset_history(t0erg, history)
        if on_refresh is not None:
            on_refresh(t_curr, ctrl)
        leg_steps = min(steps_per_leg, total_steps - done)
        for _ in range(leg_steps):
            result, traj, x = ctrl.step(t_curr, x)
            results.append(result)
            keep = slice(0, traj.times.size - 1)
            all_t.append(traj.times[keep])
            all_x.append(traj.states[keep])
            all_u.append(traj.controls[keep])
            buffer_t.append(traj.times[keep])
            buffer_x.append(traj.states[keep][:, proj])
            last_sample = (float(traj.times[-1]), traj.states[-1][proj].copy())
            t_curr = t_curr + cfg.sample_time
            metric_t.append(t_curr)
            metric_v.append(ctrl.history_metric(t_curr))
            if on_step is not None:
                on_step(result, traj)
        done += leg_steps
    if total_steps:
        all_t.append(np.array([t_curr]))
        all_x.append(x[None, :])
        all_u.append(np.zeros((1, sys.m)))
        times = np.concatenate(all_t)
        states = np.vstack(all_x)
        controls = np.vstack(all_u)
    else:
        times = np.array([t0])
        states = np.asarray(x0, dtype=float)[None, :]
        controls = np.zeros((1, sys.m))
    return RunLog(times, states, controls, results, np.asarray(metric_t), np.asarray(metric_v))
