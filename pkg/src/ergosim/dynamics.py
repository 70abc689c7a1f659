"""Control-affine system descriptors, fixed-step integration, saturation.

Systems are immutable after construction and safe to share.  Integration
is a plain fixed-step RK4 with sample-and-hold control: the control
signal is evaluated once at the start of every step and held constant,
so switch times that are snapped to the step grid are integrated
exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Action",
    "ControlAffineSystem",
    "ControlSignal",
    "IntegrationDivergedError",
    "StateTrajectory",
    "integrate",
    "linearize",
    "saturate",
    "make_double_integrator",
    "make_quadrotor12",
    "make_pd_height_hold",
    "make_velocity_damper",
    "make_hover_stabilizer",
]


class IntegrationDivergedError(RuntimeError):
    """Raised when a rollout produces a non-finite state."""

    def __init__(self, time: float):
        super().__init__(f"integration diverged at t={time:.6f}")
        self.time = time


@dataclass(frozen=True)
class ControlAffineSystem:
    """Dynamics ``xdot = drift(t, x) + input_map(t, x) @ u`` with box input bounds."""

    n: int
    m: int
    drift: callable
    input_map: callable
    u_min: np.ndarray
    u_max: np.ndarray
    ergodic_projection: tuple[int, ...]
    jacobian_x: callable | None = None
    name: str = "generic"

    def __post_init__(self):
        u_min = np.asarray(self.u_min, dtype=float)
        u_max = np.asarray(self.u_max, dtype=float)
        if u_min.shape != (self.m,) or u_max.shape != (self.m,):
            raise ValueError("input bounds must have length m")
        if np.any(u_min >= u_max) or np.any(u_min > 0.0) or np.any(u_max < 0.0):
            raise ValueError("input bounds must satisfy u_min <= 0 <= u_max, u_min < u_max")
        proj = tuple(int(i) for i in self.ergodic_projection)
        if len(set(proj)) != len(proj) or any(i < 0 or i >= self.n for i in proj):
            raise ValueError("ergodic projection must be distinct valid state indices")
        object.__setattr__(self, "u_min", u_min)
        object.__setattr__(self, "u_max", u_max)
        object.__setattr__(self, "ergodic_projection", proj)

    def f(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.drift(t, x) + self.input_map(t, x) @ u

    @property
    def nu(self) -> int:
        return len(self.ergodic_projection)


def saturate(u: np.ndarray, u_min: np.ndarray, u_max: np.ndarray) -> np.ndarray:
    """Componentwise clamp into the input box."""
    return np.clip(u, u_min, u_max)


@dataclass(frozen=True)
class Action:
    """One control modification: value, application time, duration.

    ``duration == 0`` encodes "no action taken".
    """

    value: np.ndarray
    application_time: float
    duration: float

    def __post_init__(self):
        object.__setattr__(self, "value", np.asarray(self.value, dtype=float))
        if self.duration < 0.0:
            raise ValueError("action duration must be >= 0")

    @property
    def end_time(self) -> float:
        return self.application_time + self.duration


_TOL = 1e-12


class ControlSignal:
    """Nominal policy overlaid with timed action overrides.

    The default is a callable ``(t, x) -> u`` (state feedback allowed) or
    a constant vector.  Actions are checked most-recent-first on the
    half-open interval ``[tau, tau + duration)``; the result is always
    clamped into the input box.
    """

    def __init__(self, default, u_min, u_max, actions=()):
        self.u_min = np.asarray(u_min, dtype=float)
        self.u_max = np.asarray(u_max, dtype=float)
        if callable(default):
            self._default = default
        else:
            const = np.asarray(default, dtype=float)
            self._default = lambda t, x: const
        self.actions = list(actions)

    def value_at(self, t: float, x: np.ndarray) -> np.ndarray:
        for action in reversed(self.actions):
            if action.duration > 0.0 and action.application_time - _TOL <= t < action.end_time - _TOL:
                return saturate(action.value, self.u_min, self.u_max)
        return saturate(np.asarray(self._default(t, x), dtype=float), self.u_min, self.u_max)

    def with_action(self, action: Action) -> "ControlSignal":
        return ControlSignal(self._default, self.u_min, self.u_max, self.actions + [action])

    def pruned(self, before: float) -> "ControlSignal":
        """Drop actions that can no longer influence times >= ``before``."""
        live = [a for a in self.actions if a.end_time > before + _TOL and a.duration > 0.0]
        return ControlSignal(self._default, self.u_min, self.u_max, live)


@dataclass
class StateTrajectory:
    """Fixed-grid rollout with the held control values per sample."""

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray

    def state_at_index(self, j: int) -> np.ndarray:
        return self.states[j]


def _rk4_step(sys: ControlAffineSystem, t: float, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    k1 = sys.f(t, x, u)
    k2 = sys.f(t + 0.5 * dt, x + 0.5 * dt * k1, u)
    k3 = sys.f(t + 0.5 * dt, x + 0.5 * dt * k2, u)
    k4 = sys.f(t + dt, x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(
    sys: ControlAffineSystem,
    x0: np.ndarray,
    t0: float,
    t1: float,
    u,
    dt: float,
) -> StateTrajectory:
    """RK4 rollout on the fixed grid ``t0, t0+dt, ..., t1``.

    ``u`` is a :class:`ControlSignal` or a callable ``(t, x) -> u``;
    the value is sampled at each step start and held.
    """
    if dt <= 0.0 or t1 <= t0:
        raise ValueError("require dt > 0 and t1 > t0")
    steps = int(round((t1 - t0) / dt))
    if steps < 1 or abs(t0 + steps * dt - t1) > 1e-7 * max(1.0, abs(t1)):
        raise ValueError("dt must divide the integration window")
    value_at = u.value_at if isinstance(u, ControlSignal) else u
    times = t0 + dt * np.arange(steps + 1)
    times[-1] = t1
    states = np.empty((steps + 1, sys.n))
    controls = np.empty((steps + 1, sys.m))
    x = np.asarray(x0, dtype=float).copy()
    states[0] = x
    for j in range(steps):
        uj = np.asarray(value_at(times[j], x), dtype=float)
        controls[j] = uj
        x = _rk4_step(sys, times[j], x, uj, dt)
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(times[j + 1])
        states[j + 1] = x
    controls[steps] = np.asarray(value_at(times[-1], x), dtype=float)
    return StateTrajectory(times, states, controls)


def linearize(sys: ControlAffineSystem, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """State Jacobian of ``f``; analytic when the system provides one."""
    if sys.jacobian_x is not None:
        return sys.jacobian_x(t, x, u)
    x = np.asarray(x, dtype=float)
    step = 1e-6
    jac = np.empty((sys.n, sys.n))
    for d in range(sys.n):
        xp, xm = x.copy(), x.copy()
        xp[d] += step
        xm[d] -= step
        jac[:, d] = (sys.f(t, xp, u) - sys.f(t, xm, u)) / (2.0 * step)
    return jac


def make_double_integrator(accel_limit: float = 50.0) -> ControlAffineSystem:
    """Planar double integrator: state [p1, v1, p2, v2], inputs accelerate."""
    h = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    jac = np.zeros((4, 4))
    jac[0, 1] = 1.0
    jac[2, 3] = 1.0

    def drift(t, x):
        return np.array([x[1], 0.0, x[3], 0.0])

    return ControlAffineSystem(
        n=4,
        m=2,
        drift=drift,
        input_map=lambda t, x: h,
        u_min=np.array([-accel_limit, -accel_limit]),
        u_max=np.array([accel_limit, accel_limit]),
        ergodic_projection=(0, 2),
        jacobian_x=lambda t, x, u: jac,
        name="double_integrator",
    )


@dataclass(frozen=True)
class QuadrotorParams:
    """Physical constants for the 12-state quadrotor (unit-scale defaults)."""

    mass: float = 0.6
    gravity: float = 9.81
    arm: float = 0.2
    inertia: tuple[float, float, float] = (8.6e-3, 8.6e-3, 1.72e-2)
    yaw_coeff: float = 0.016
    thrust_limit: float = 12.0

    @property
    def hover_thrust_per_rotor(self) -> float:
        return self.mass * self.gravity / 4.0


def make_quadrotor12(params: QuadrotorParams | None = None) -> ControlAffineSystem:
    """12-state quadrotor with per-rotor thrust inputs in [0, thrust_limit].

    State: [px, py, pz, vx, vy, vz, roll, pitch, yaw, p, q, r].
    Rotor layout: 1 +x, 2 +y, 3 -x, 4 -y (plus configuration), so
    rolling torque is arm*(u2 - u4), pitching torque arm*(u3 - u1), and
    yaw torque yaw_coeff*(u1 - u2 + u3 - u4).
    """
    par = params or QuadrotorParams()
    ix, iy, iz = par.inertia
    a1 = (iy - iz) / ix
    a2 = (iz - ix) / iy
    a3 = (ix - iy) / iz
    inv_m = 1.0 / par.mass
    g = par.gravity
    arm_ix = par.arm / ix
    arm_iy = par.arm / iy
    c_iz = par.yaw_coeff / iz

    def drift(t, x):
        return np.array(
            [
                x[3], x[4], x[5],
                0.0, 0.0, -g,
                x[9], x[10], x[11],
                a1 * x[10] * x[11],
                a2 * x[9] * x[11],
                a3 * x[9] * x[10],
            ]
        )

    def body_z(x):
        cph, sph = math.cos(x[6]), math.sin(x[6])
        cth, sth = math.cos(x[7]), math.sin(x[7])
        cps, sps = math.cos(x[8]), math.sin(x[8])
        return (
            cph * sth * cps + sph * sps,
            cph * sth * sps - sph * cps,
            cph * cth,
        )

    def input_map(t, x):
        e1, e2, e3 = body_z(x)
        h = np.zeros((12, 4))
        h[3, :] = e1 * inv_m
        h[4, :] = e2 * inv_m
        h[5, :] = e3 * inv_m
        h[9, 1] = arm_ix
        h[9, 3] = -arm_ix
        h[10, 0] = -arm_iy
        h[10, 2] = arm_iy
        h[11, :] = (c_iz, -c_iz, c_iz, -c_iz)
        return h

    def jacobian_x(t, x, u):
        cph, sph = math.cos(x[6]), math.sin(x[6])
        cth, sth = math.cos(x[7]), math.sin(x[7])
        cps, sps = math.cos(x[8]), math.sin(x[8])
        thrust = float(np.sum(u)) * inv_m
        jac = np.zeros((12, 12))
        jac[0, 3] = jac[1, 4] = jac[2, 5] = 1.0
        jac[6, 9] = jac[7, 10] = jac[8, 11] = 1.0
        # acceleration sensitivity to attitude
        jac[3, 6] = thrust * (-sph * sth * cps + cph * sps)
        jac[3, 7] = thrust * (cph * cth * cps)
        jac[3, 8] = thrust * (-cph * sth * sps + sph * cps)
        jac[4, 6] = thrust * (-sph * sth * sps - cph * cps)
        jac[4, 7] = thrust * (cph * cth * sps)
        jac[4, 8] = thrust * (cph * sth * cps + sph * sps)
        jac[5, 6] = thrust * (-sph * cth)
        jac[5, 7] = thrust * (-cph * sth)
        # gyroscopic coupling
        jac[9, 10] = a1 * x[11]
        jac[9, 11] = a1 * x[10]
        jac[10, 9] = a2 * x[11]
        jac[10, 11] = a2 * x[9]
        jac[11, 9] = a3 * x[10]
        jac[11, 10] = a3 * x[9]
        return jac

    return ControlAffineSystem(
        n=12,
        m=4,
        drift=drift,
        input_map=input_map,
        u_min=np.zeros(4),
        u_max=np.full(4, par.thrust_limit),
        ergodic_projection=(0, 1),
        jacobian_x=jacobian_x,
        name="quadrotor12",
    )


def make_pd_height_hold(
    target_height: float,
    kp: float = 6.0,
    kd: float = 3.0,
    params: QuadrotorParams | None = None,
):
    """Height-regulating nominal controller, thrust shared across rotors."""
    if kp <= 0.0 or kd <= 0.0:
        raise ValueError("PD gains must be positive")
    par = params or QuadrotorParams()
    lo, hi = 0.0, par.thrust_limit

    def u_nom(t, x):
        total = par.mass * par.gravity + kp * (target_height - x[2]) - kd * x[5]
        per_rotor = min(max(total / 4.0, lo), hi)
        return np.full(4, per_rotor)

    return u_nom


def _wall_push(planar: np.ndarray, bounds: np.ndarray, gain: float) -> np.ndarray:
    """Inward acceleration proportional to the distance outside the box."""
    excess = np.maximum(planar - bounds, 0.0) + np.minimum(planar, 0.0)
    return -gain * excess


def make_velocity_damper(gain: float, accel_limit: float = 50.0, bounds=None, wall_gain: float = 0.0):
    """Speed-and-boundary-regulating nominal for the double integrator.

    The ergodic statistics cannot distinguish a trajectory from its
    reflected periodic images, so nothing in the coverage objective keeps
    the agent inside the box once momentum carries it out; this nominal
    supplies that secondary objective (mild speed damping plus a stiff
    inward push outside the bounds).
    """
    if gain < 0.0 or wall_gain < 0.0:
        raise ValueError("gains must be >= 0")
    wall_bounds = None if bounds is None else np.asarray(bounds, dtype=float)

    def u_nom(t, x):
        u = -gain * np.array([x[1], x[3]])
        if wall_bounds is not None and wall_gain > 0.0:
            u = u + _wall_push(np.array([x[0], x[2]]), wall_bounds, wall_gain)
        return np.clip(u, -accel_limit, accel_limit)

    return u_nom


def make_hover_stabilizer(
    target_height: float,
    params: QuadrotorParams | None = None,
    height_kp: float = 6.0,
    height_kd: float = 3.0,
    attitude_kp: float = 40.0,
    attitude_kd: float = 12.0,
    velocity_gain: float = 1.0,
    brake_accel_cap: float = 3.0,
    bounds=None,
    wall_gain: float = 0.0,
    wall_accel_cap: float = 6.0,
):
    """Hover-stabilizing nominal for the quadrotor.

    Regulates height, levels the attitude toward a small commanded tilt
    (velocity braking plus an inward push when outside the planar
    bounds), and damps yaw rate; the ergodic layer perturbs around this.
    Attitude gains are loop gains in 1/s^2 and 1/s on the Euler errors.
    """
    par = params or QuadrotorParams()
    ix, iy, iz = par.inertia
    wall_bounds = None if bounds is None else np.asarray(bounds, dtype=float)

    def u_nom(t, x):
        total = par.mass * par.gravity + height_kp * (target_height - x[2]) - height_kd * x[5]
        total = max(total, 0.0)
        # braking tilt: desired planar accel opposes velocity
        ax = -velocity_gain * x[3]
        ay = -velocity_gain * x[4]
        mag = math.hypot(ax, ay)
        if mag > brake_accel_cap:
            ax, ay = ax * brake_accel_cap / mag, ay * brake_accel_cap / mag
        if wall_bounds is not None and wall_gain > 0.0:
            wx, wy = _wall_push(np.array([x[0], x[1]]), wall_bounds, wall_gain)
            wmag = math.hypot(wx, wy)
            if wmag > wall_accel_cap:
                wx, wy = wx * wall_accel_cap / wmag, wy * wall_accel_cap / wmag
            ax, ay = ax + wx, ay + wy
        cps, sps = math.cos(x[8]), math.sin(x[8])
        pitch_des = (ax * cps + ay * sps) / par.gravity
        roll_des = (ax * sps - ay * cps) / par.gravity
        tq_roll = ix * (attitude_kp * (roll_des - x[6]) - attitude_kd * x[9])
        tq_pitch = iy * (attitude_kp * (pitch_des - x[7]) - attitude_kd * x[10])
        tq_yaw = iz * (-attitude_kd * x[11])
        base = total / 4.0
        da = tq_roll / (2.0 * par.arm)
        db = tq_pitch / (2.0 * par.arm)
        dc = tq_yaw / (4.0 * par.yaw_coeff)
        # attitude-priority mixing: clipping differentials asymmetrically
        # would produce parasitic torque, so move the collective toward
        # mid-range first and only then scale the differentials down
        spread = abs(da) + abs(db) + abs(dc)
        half = 0.5 * par.thrust_limit
        if spread > half:
            scale = half / spread
            da, db, dc = da * scale, db * scale, dc * scale
            spread = half
        base = min(max(base, spread), par.thrust_limit - spread)
        u = np.array([base - db + dc, base + da - dc, base + db + dc, base - da - dc])
        return np.clip(u, 0.0, par.thrust_limit)

    return u_nom
