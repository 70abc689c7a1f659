"""Expected-information-density maps from target beliefs.

The pipeline: a measurement model yields a Fisher information matrix per
(sensor position, target hypothesis); averaging over a discretized
belief gives the expected information matrix; its determinant compresses
that to a scalar; evaluating the scalar over a grid of candidate sensor
positions and normalizing yields the density a coverage controller can
track.  An exploration floor keeps the density positive away from the
current estimates so undiscovered targets stay findable.

Angle conventions (shared with the estimation module so a global
rotation of the workspace cancels): azimuth is the bearing to the target
measured from the +y axis toward +x, ``atan2(ax - sx, ay - sy)``;
elevation is ``atan2(az - sz, planar range)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fourier import SearchDomain, SpatialGrid

__all__ = [
    "ModelSingularError",
    "MeasurementModel",
    "BeliefGrid",
    "fim",
    "expected_info_matrix",
    "eid_value",
    "build_eid_grid",
    "bearing_model_3d",
    "bearing_model_2d",
]


class ModelSingularError(ValueError):
    """Measurement undefined at this sensor/target geometry."""


@dataclass(frozen=True)
class MeasurementModel:
    """Deterministic sensor map plus Gaussian noise covariance.

    ``predict(alpha, x)`` maps target parameters and sensor position to
    the noiseless measurement; ``jacobian_alpha`` is its derivative in
    the target parameters.  ``jacobian_pairwise(alphas, sensors)``
    (optional) evaluates the jacobian on a full sensor-by-hypothesis
    product for grid building; pairs closer than ``min_range`` in the
    observable geometry are masked to zero information there.
    ``angular`` flags which measurement rows are angles (wrapped by the
    estimator).
    """

    param_dim: int
    meas_dim: int
    predict: callable
    jacobian_alpha: callable
    noise_cov: np.ndarray
    angular: tuple[bool, ...]
    jacobian_pairwise: callable | None = None
    planar_range: callable | None = None

    def __post_init__(self):
        cov = np.asarray(self.noise_cov, dtype=float)
        if cov.shape != (self.meas_dim, self.meas_dim):
            raise ValueError("noise covariance must be mu x mu")
        if not np.allclose(cov, cov.T):
            raise ValueError("noise covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as err:
            raise ValueError("noise covariance must be positive definite") from err
        object.__setattr__(self, "noise_cov", cov)
        object.__setattr__(self, "_noise_inv", np.linalg.inv(cov))
        object.__setattr__(self, "_noise_chol", np.linalg.cholesky(cov))

    @property
    def noise_inv(self) -> np.ndarray:
        return self._noise_inv

    def draw_noise(self, rng: np.random.Generator) -> np.ndarray:
        return self._noise_chol @ rng.standard_normal(self.meas_dim)


def fim(model: MeasurementModel, x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Fisher information of one measurement about the target parameters."""
    jac = np.asarray(model.jacobian_alpha(alpha, x), dtype=float)
    return jac.T @ model.noise_inv @ jac


@dataclass(frozen=True)
class BeliefGrid:
    """Discretized target-parameter distribution: support points + weights."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        support = np.atleast_2d(np.asarray(self.support, dtype=float))
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if support.shape[0] != weights.size:
            raise ValueError("support and weights lengths must match")
        if np.any(weights < 0.0):
            raise ValueError("belief weights must be nonnegative")
        total = weights.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError("belief weights must sum to one")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_gaussian(cls, mean, cov, cells_per_dim: int = 15, halfwidth_sigmas: float = 3.0):
        """Tensor grid over mean +- a few standard deviations per axis."""
        mean = np.asarray(mean, dtype=float)
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        dim = mean.size
        sigmas = np.sqrt(np.diag(cov))
        axes = [
            mean[d] + np.linspace(-halfwidth_sigmas, halfwidth_sigmas, cells_per_dim) * max(sigmas[d], 1e-12)
            for d in range(dim)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        support = np.stack(mesh, axis=-1).reshape(-1, dim)
        diff = support - mean
        solve = np.linalg.solve(cov, diff.T).T
        logw = -0.5 * np.sum(diff * solve, axis=1)
        w = np.exp(logw - logw.max())
        return cls(support, w / w.sum())

    @classmethod
    def point_mass(cls, alpha):
        return cls(np.atleast_2d(np.asarray(alpha, dtype=float)), np.array([1.0]))


def expected_info_matrix(model: MeasurementModel, x: np.ndarray, belief: BeliefGrid) -> np.ndarray:
    """Belief-weighted average of the Fisher information at one sensor pose."""
    if model.jacobian_pairwise is not None:
        jac = model.jacobian_pairwise(belief.support, np.atleast_2d(np.asarray(x, dtype=float)))[0]
        return np.einsum("bim,ij,bjn,b->mn", jac, model.noise_inv, jac, belief.weights)
    out = np.zeros((model.param_dim, model.param_dim))
    for alpha, w in zip(belief.support, belief.weights):
        out += w * fim(model, x, alpha)
    return out


def eid_value(expected_info: np.ndarray) -> float:
    """Determinant criterion, clipped at zero against round-off."""
    return max(float(np.linalg.det(np.asarray(expected_info, dtype=float))), 0.0)


def build_eid_grid(
    model: MeasurementModel,
    beliefs: list[BeliefGrid],
    sensor_tail: np.ndarray,
    domain: SearchDomain,
    grid_shape,
    exploration_floor: float,
    support_cutoff: float = 0.0,
) -> SpatialGrid:
    """Expected information density over candidate planar sensor positions.

    Each grid cell center, completed with the fixed non-planar
    coordinates in ``sensor_tail``, is scored by the determinant of the
    belief-averaged information matrix, summed over targets.  The field
    is max-normalized, optionally truncated below ``support_cutoff``
    (fraction of the maximum), floored at ``exploration_floor``, and
    renormalized to a unit-mass density.  With no information and a zero
    floor the result falls back to uniform.
    """
    if not 0.0 <= exploration_floor <= 1.0:
        raise ValueError("exploration floor must be in [0, 1]")
    base = SpatialGrid(domain, grid_shape, np.zeros(tuple(grid_shape)))
    centers = base.centers()
    tail = np.asarray(sensor_tail, dtype=float).reshape(-1)
    sensors = np.hstack([centers, np.tile(tail, (centers.shape[0], 1))]) if tail.size else centers

    field = np.zeros(centers.shape[0])
    for belief in beliefs:
        field += _det_field(model, sensors, belief)
    peak = field.max()
    if peak <= 0.0:
        if exploration_floor > 0.0:
            field = np.full_like(field, exploration_floor)
        else:
            return SpatialGrid(domain, grid_shape, np.zeros(tuple(grid_shape))).normalized()
    else:
        field = field / peak
        if support_cutoff > 0.0:
            field[field < support_cutoff] = 0.0
        field = np.maximum(field, exploration_floor)
    grid = SpatialGrid(domain, grid_shape, field.reshape(tuple(grid_shape)))
    return grid.normalized()


def _det_field(model: MeasurementModel, sensors: np.ndarray, belief: BeliefGrid) -> np.ndarray:
    if model.jacobian_pairwise is not None:
        jac = model.jacobian_pairwise(belief.support, sensors)
        info = np.einsum("sbim,ij,sbjn,b->smn", jac, model.noise_inv, jac, belief.weights)
        return np.maximum(np.linalg.det(info), 0.0)
    out = np.empty(sensors.shape[0])
    for s in range(sensors.shape[0]):
        out[s] = eid_value(expected_info_matrix(model, sensors[s], belief))
    return out


def bearing_model_3d(noise_diag=(0.1, 0.1), min_range: float = 1e-9) -> MeasurementModel:
    """Azimuth/elevation bearings to a 3-coordinate target.

    The sensor state is the 3D sensor position.  Fully coincident
    geometry raises :class:`ModelSingularError`; pairs inside
    ``min_range`` planar distance are masked (zero rows) in the grid
    path, where the azimuth direction is unobservable anyway.
    """

    def offsets(alpha, x):
        d = np.asarray(alpha, dtype=float) - np.asarray(x, dtype=float)[:3]
        rho_sq = d[0] ** 2 + d[1] ** 2
        return d, rho_sq

    def predict(alpha, x):
        d, rho_sq = offsets(alpha, x)
        if rho_sq + d[2] ** 2 < min_range**2:
            raise ModelSingularError("sensor coincides with the target")
        rho = np.sqrt(rho_sq)
        return np.array([np.arctan2(d[0], d[1]), np.arctan2(d[2], rho)])

    def jacobian_alpha(alpha, x):
        d, rho_sq = offsets(alpha, x)
        if rho_sq < min_range**2:
            raise ModelSingularError("azimuth unobservable at zero planar offset")
        rho = np.sqrt(rho_sq)
        r_sq = rho_sq + d[2] ** 2
        return np.array(
            [
                [d[1] / rho_sq, -d[0] / rho_sq, 0.0],
                [-d[0] * d[2] / (rho * r_sq), -d[1] * d[2] / (rho * r_sq), rho / r_sq],
            ]
        )

    def jacobian_pairwise(alphas, sensors):
        alphas = np.atleast_2d(alphas)
        sensors = np.atleast_2d(sensors)
        d = alphas[None, :, :] - sensors[:, None, :3]
        rho_sq = d[..., 0] ** 2 + d[..., 1] ** 2
        ok = rho_sq >= min_range**2
        rho_sq = np.where(ok, rho_sq, 1.0)
        rho = np.sqrt(rho_sq)
        r_sq = rho_sq + d[..., 2] ** 2
        jac = np.empty(d.shape[:2] + (2, 3))
        jac[..., 0, 0] = d[..., 1] / rho_sq
        jac[..., 0, 1] = -d[..., 0] / rho_sq
        jac[..., 0, 2] = 0.0
        jac[..., 1, 0] = -d[..., 0] * d[..., 2] / (rho * r_sq)
        jac[..., 1, 1] = -d[..., 1] * d[..., 2] / (rho * r_sq)
        jac[..., 1, 2] = rho / r_sq
        jac[~ok] = 0.0
        return jac

    def planar_range(alpha, x):
        d, rho_sq = offsets(alpha, x)
        return float(np.sqrt(rho_sq))

    return MeasurementModel(
        param_dim=3,
        meas_dim=2,
        predict=predict,
        jacobian_alpha=jacobian_alpha,
        noise_cov=np.diag(np.asarray(noise_diag, dtype=float)),
        angular=(True, True),
        jacobian_pairwise=jacobian_pairwise,
        planar_range=planar_range,
    )


def bearing_model_2d(noise: float = 0.1, min_range: float = 1e-9) -> MeasurementModel:
    """Planar azimuth-only bearing to a 2-coordinate target."""

    def offsets(alpha, x):
        d = np.asarray(alpha, dtype=float) - np.asarray(x, dtype=float)[:2]
        return d, d[0] ** 2 + d[1] ** 2

    def predict(alpha, x):
        d, rho_sq = offsets(alpha, x)
        if rho_sq < min_range**2:
            raise ModelSingularError("sensor coincides with the target")
        return np.array([np.arctan2(d[0], d[1])])

    def jacobian_alpha(alpha, x):
        d, rho_sq = offsets(alpha, x)
        if rho_sq < min_range**2:
            raise ModelSingularError("sensor coincides with the target")
        return np.array([[d[1] / rho_sq, -d[0] / rho_sq]])

    def jacobian_pairwise(alphas, sensors):
        alphas = np.atleast_2d(alphas)
        sensors = np.atleast_2d(sensors)
        d = alphas[None, :, :] - sensors[:, None, :2]
        rho_sq = d[..., 0] ** 2 + d[..., 1] ** 2
        ok = rho_sq >= min_range**2
        rho_sq = np.where(ok, rho_sq, 1.0)
        jac = np.empty(d.shape[:2] + (1, 2))
        jac[..., 0, 0] = d[..., 1] / rho_sq
        jac[..., 0, 1] = -d[..., 0] / rho_sq
        jac[~ok] = 0.0
        return jac

    def planar_range(alpha, x):
        d, rho_sq = offsets(alpha, x)
        return float(np.sqrt(rho_sq))

    return MeasurementModel(
        param_dim=2,
        meas_dim=1,
        predict=predict,
        jacobian_alpha=jacobian_alpha,
        noise_cov=np.array([[float(noise)]]),
        angular=(True,),
        jacobian_pairwise=jacobian_pairwise,
        planar_range=planar_range,
    )
