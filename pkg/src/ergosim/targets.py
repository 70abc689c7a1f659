"""EKF belief maintenance for multiple targets with range-limited sensing.

Targets move by scripted waypoints or a diffusion realization; beliefs
are Gaussian and updated by a centralized extended Kalman filter with an
identity transition model.  Bearings-only updates are known to be
fragile, so near-singular innovation systems and near-coincident
geometries skip the update and flag a filter-health event instead of
silently resetting.  Angle innovations are wrapped to (-pi, pi].
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .information import MeasurementModel, ModelSingularError

__all__ = [
    "TargetBelief",
    "TargetTruth",
    "UpdateOutcome",
    "SensingEvent",
    "ekf_predict",
    "ekf_update",
    "range_gate",
    "detect_and_measure",
    "localization_status",
    "wrap_angles",
]

LOCALIZED_THRESHOLD = 0.05


@dataclass(frozen=True)
class TargetBelief:
    """Gaussian belief over one target's coordinates."""

    id: int
    mean: np.ndarray
    covariance: np.ndarray
    detected: bool = False

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape must match mean dimension")
        if np.abs(cov - cov.T).max() > 1e-12:
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0.0:
            raise ValueError("covariance must be positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)


class TargetTruth:
    """Ground-truth motion of one target.

    ``motion`` is one of ``static``, ``waypoints`` (piecewise-linear
    through (time, position) rows), or ``diffusion`` (reflected random
    walk generated up front from ``seed`` so paths are reproducible).
    """

    def __init__(
        self,
        target_id: int,
        start,
        motion: str = "static",
        waypoints=None,
        step_std: float = 0.0,
        tick: float = 0.05,
        horizon: float = 0.0,
        seed=0,
        bounds=None,
        appear_time: float | None = None,
    ):
        self.id = int(target_id)
        self.start = np.asarray(start, dtype=float).reshape(-1)
        self.motion = motion
        self.appear_time = appear_time
        if motion == "waypoints":
            rows = np.asarray(waypoints, dtype=float)
            if rows.ndim != 2 or rows.shape[1] != self.start.size + 1:
                raise ValueError("waypoints must be rows of (time, coordinates)")
            self._wp_t = rows[:, 0]
            self._wp_x = rows[:, 1:]
        elif motion == "diffusion":
            rng = np.random.default_rng(seed)
            steps = max(int(np.ceil(horizon / tick)), 1)
            walk = rng.normal(scale=step_std, size=(steps, self.start.size))
            path = self.start + np.vstack([np.zeros(self.start.size), np.cumsum(walk, axis=0)])
            if bounds is not None:
                bounds = np.asarray(bounds, dtype=float)
                for d in range(min(self.start.size, bounds.size)):
                    path[:, d] = _reflect(path[:, d], 0.0, bounds[d])
            self._wp_t = tick * np.arange(steps + 1)
            self._wp_x = path
        elif motion != "static":
            raise ValueError(f"unknown motion kind: {motion}")

    def position(self, t: float) -> np.ndarray:
        if self.motion == "static":
            return self.start.copy()
        t_clip = min(max(t, self._wp_t[0]), self._wp_t[-1])
        out = np.empty(self.start.size)
        for d in range(self.start.size):
            out[d] = np.interp(t_clip, self._wp_t, self._wp_x[:, d])
        return out

    def present(self, t: float) -> bool:
        return self.appear_time is None or t >= self.appear_time


def _reflect(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    folded = np.mod(values - lo, 2 * span)
    return lo + np.where(folded <= span, folded, 2 * span - folded)


def wrap_angles(residual: np.ndarray, angular) -> np.ndarray:
    out = np.asarray(residual, dtype=float).copy()
    for i, is_angle in enumerate(angular):
        if is_angle:
            out[i] = np.arctan2(np.sin(out[i]), np.cos(out[i]))
    return out


def ekf_predict(belief: TargetBelief, process_cov: np.ndarray) -> TargetBelief:
    """Diffusion prediction: identity transition, covariance grows by C."""
    process = np.atleast_2d(np.asarray(process_cov, dtype=float))
    if np.linalg.eigvalsh(process).min() < -1e-12:
        raise ValueError("process covariance must be positive semidefinite")
    cov = belief.covariance + process
    return replace(belief, covariance=0.5 * (cov + cov.T))


@dataclass(frozen=True)
class UpdateOutcome:
    belief: TargetBelief
    skipped: bool = False
    reason: str = ""


def ekf_update(
    belief: TargetBelief,
    model: MeasurementModel,
    sensor_state: np.ndarray,
    z: np.ndarray,
    min_range: float | None = None,
) -> UpdateOutcome:
    """Joseph-form EKF update with angle wrapping and health guards."""
    if min_range is not None and model.planar_range is not None:
        if model.planar_range(belief.mean, sensor_state) < min_range:
            return UpdateOutcome(belief, skipped=True, reason="inside sensor minimum range")
    try:
        predicted = model.predict(belief.mean, sensor_state)
        jac = model.jacobian_alpha(belief.mean, sensor_state)
    except ModelSingularError as err:
        return UpdateOutcome(belief, skipped=True, reason=str(err))
    innovation = wrap_angles(np.asarray(z, dtype=float) - predicted, model.angular)
    p = belief.covariance
    s_mat = jac @ p @ jac.T + model.noise_cov
    cond = np.linalg.cond(s_mat)
    if not np.isfinite(cond) or cond > 1e12:
        return UpdateOutcome(belief, skipped=True, reason="near-singular innovation covariance")
    gain = p @ jac.T @ np.linalg.inv(s_mat)
    mean = belief.mean + gain @ innovation
    joseph = np.eye(belief.mean.size) - gain @ jac
    cov = joseph @ p @ joseph.T + gain @ model.noise_cov @ gain.T
    cov = 0.5 * (cov + cov.T)
    return UpdateOutcome(replace(belief, mean=mean, covariance=cov))


def range_gate(sensor_pos, target_pos, radius: float, dims: int | None = None) -> bool:
    """Strict-inequality disk test over the leading explored coordinates.

    ``dims`` restricts the norm to the first coordinates (the planar disk
    for an aerial sensor over ground targets); by default all shared
    coordinates count.
    """
    sensor_pos = np.asarray(sensor_pos, dtype=float).reshape(-1)
    target_pos = np.asarray(target_pos, dtype=float).reshape(-1)
    dim = min(sensor_pos.size, target_pos.size) if dims is None else dims
    return float(np.linalg.norm(sensor_pos[:dim] - target_pos[:dim])) < radius


def initialize_belief(
    target_id: int,
    model: MeasurementModel,
    sensor_state: np.ndarray,
    z: np.ndarray,
    radius: float,
    init_std: float = 0.1,
) -> TargetBelief:
    """First-detection belief: a bearing-consistent mean, broad covariance.

    Bearings carry no range, so the mean is placed half a sensor radius
    along the measured direction from the sensor.
    """
    sensor = np.asarray(sensor_state, dtype=float).reshape(-1)[: model.param_dim]
    if model.param_dim == 2:
        azimuth = float(z[0])
        direction = np.array([np.sin(azimuth), np.cos(azimuth)])
    else:
        azimuth, elevation = float(z[0]), float(z[1])
        direction = np.array(
            [
                np.sin(azimuth) * np.cos(elevation),
                np.cos(azimuth) * np.cos(elevation),
                np.sin(elevation),
            ]
        )
    mean = sensor + 0.5 * radius * direction
    cov = np.eye(model.param_dim) * init_std**2
    return TargetBelief(target_id, mean, cov, detected=True)


@dataclass(frozen=True)
class SensingEvent:
    time: float
    target_id: int
    measurement: np.ndarray
    new_detection: bool
    skipped_update: bool
    reason: str = ""


def detect_and_measure(
    truths: list[TargetTruth],
    beliefs: dict[int, TargetBelief],
    sensor_state: np.ndarray,
    model: MeasurementModel,
    radius: float,
    rngs: dict[int, np.random.Generator],
    t: float,
    min_range: float | None = None,
    init_std: float = 0.1,
    gate_dims: int | None = None,
) -> list[SensingEvent]:
    """One sensing tick: gate, detect, measure, and update in target order.

    At most one measurement per target per tick.  New in-range targets
    are marked detected and their beliefs initialized from the first
    measurement; already-detected in-range targets get a standard EKF
    update.  ``beliefs`` is updated in place.  ``gate_dims`` selects the
    coordinates the range disk lives in (2 for a planar disk under an
    aerial sensor).
    """
    events = []
    for truth in sorted(truths, key=lambda tr: tr.id):
        if not truth.present(t):
            continue
        alpha_true = truth.position(t)
        if not range_gate(sensor_state, alpha_true, radius, dims=gate_dims):
            continue
        try:
            z = model.predict(alpha_true, sensor_state) + model.draw_noise(rngs[truth.id])
        except ModelSingularError as err:
            events.append(SensingEvent(t, truth.id, np.array([]), False, True, str(err)))
            continue
        z = wrap_angles(z, model.angular)
        prior = beliefs.get(truth.id)
        if prior is None or not prior.detected:
            beliefs[truth.id] = initialize_belief(truth.id, model, sensor_state, z, radius, init_std)
            events.append(SensingEvent(t, truth.id, z, True, False))
        else:
            outcome = ekf_update(prior, model, sensor_state, z, min_range=min_range)
            beliefs[truth.id] = outcome.belief
            events.append(SensingEvent(t, truth.id, z, False, outcome.skipped, outcome.reason))
    return events


def localization_status(
    belief: TargetBelief | None,
    truth_pos: np.ndarray,
    threshold: float = LOCALIZED_THRESHOLD,
) -> bool:
    """Strict Euclidean test on the belief mean; undetected is never localized."""
    if belief is None or not belief.detected:
        return False
    truth_pos = np.asarray(truth_pos, dtype=float).reshape(-1)
    dim = min(belief.mean.size, truth_pos.size)
    return float(np.linalg.norm(belief.mean[:dim] - truth_pos[:dim])) < threshold
