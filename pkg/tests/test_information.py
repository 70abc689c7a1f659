import numpy as np
import pytest

from ergosim.fourier import SearchDomain
from ergosim.information import (
    BeliefGrid,
    MeasurementModel,
    ModelSingularError,
    bearing_model_2d,
    bearing_model_3d,
    build_eid_grid,
    eid_value,
    expected_info_matrix,
    fim,
)

UNIT2 = SearchDomain(2, (1.0, 1.0))


def det_by_cofactors(mat):
    """Independent determinant via first-row cofactor expansion."""
    mat = np.asarray(mat, dtype=float)
    n = mat.shape[0]
    if n == 1:
        return mat[0, 0]
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(mat, 0, axis=0), j, axis=1)
        total += ((-1.0) ** j) * mat[0, j] * det_by_cofactors(minor)
    return total


class TestFim:
    def test_insensitive_model_gives_zero(self):
        model = MeasurementModel(
            param_dim=2, meas_dim=1,
            predict=lambda a, x: np.array([1.0]),
            jacobian_alpha=lambda a, x: np.zeros((1, 2)),
            noise_cov=np.array([[0.3]]),
            angular=(False,),
        )
        assert np.allclose(fim(model, np.zeros(2), np.zeros(2)), 0.0)

    def test_scalar_identity_model(self):
        sigma_sq = 0.04
        model = MeasurementModel(
            param_dim=1, meas_dim=1,
            predict=lambda a, x: np.array([a[0]]),
            jacobian_alpha=lambda a, x: np.array([[1.0]]),
            noise_cov=np.array([[sigma_sq]]),
            angular=(False,),
        )
        assert fim(model, np.zeros(1), np.array([0.7]))[0, 0] == pytest.approx(1.0 / sigma_sq)

    def test_bearing3d_matches_fd_jacobian_oracle(self):
        model = bearing_model_3d()
        rng = np.random.default_rng(0)
        for _ in range(10):
            alpha = rng.uniform(0.1, 0.9, size=3)
            x = rng.uniform(-0.5, 1.5, size=3)
            if model.planar_range(alpha, x) < 0.05:
                continue
            step = 1e-7
            jac_fd = np.empty((2, 3))
            for d in range(3):
                ap, am = alpha.copy(), alpha.copy()
                ap[d] += step
                am[d] -= step
                jac_fd[:, d] = (model.predict(ap, x) - model.predict(am, x)) / (2 * step)
            oracle = jac_fd.T @ model.noise_inv @ jac_fd
            got = fim(model, x, alpha)
            assert np.abs(got - oracle).max() / max(np.abs(oracle).max(), 1e-12) < 1e-4

    def test_singular_noise_rejected_at_construction(self):
        with pytest.raises(ValueError):
            MeasurementModel(
                param_dim=1, meas_dim=2,
                predict=lambda a, x: np.zeros(2),
                jacobian_alpha=lambda a, x: np.zeros((2, 1)),
                noise_cov=np.array([[1.0, 1.0], [1.0, 1.0]]),
                angular=(False, False),
            )

    def test_output_symmetric_psd(self):
        model = bearing_model_3d()
        rng = np.random.default_rng(1)
        for _ in range(25):
            alpha = rng.uniform(0, 1, size=3)
            x = rng.uniform(-1, 2, size=3)
            if model.planar_range(alpha, x) < 0.05:
                continue
            info = fim(model, x, alpha)
            assert np.allclose(info, info.T, atol=1e-12)
            assert np.linalg.eigvalsh(info).min() >= -1e-10


class TestExpectedInfo:
    def test_point_mass_equals_fim(self):
        model = bearing_model_3d()
        alpha = np.array([0.4, 0.6, 0.0])
        x = np.array([0.2, 0.1, 1.0])
        belief = BeliefGrid.point_mass(alpha)
        assert np.allclose(expected_info_matrix(model, x, belief), fim(model, x, alpha), atol=1e-12)

    def test_two_point_masses_average(self):
        model = bearing_model_3d()
        a1 = np.array([0.3, 0.4, 0.0])
        a2 = np.array([0.7, 0.6, 0.1])
        x = np.array([0.1, 0.9, 1.2])
        belief = BeliefGrid(np.vstack([a1, a2]), np.array([0.5, 0.5]))
        expect = 0.5 * (fim(model, x, a1) + fim(model, x, a2))
        assert np.allclose(expected_info_matrix(model, x, belief), expect, atol=1e-12)

    def test_linear_in_belief_weights(self):
        model = bearing_model_2d()
        rng = np.random.default_rng(2)
        support = rng.uniform(0.1, 0.9, size=(6, 2))
        w1 = rng.uniform(0.1, 1.0, size=6)
        w1 /= w1.sum()
        w2 = rng.uniform(0.1, 1.0, size=6)
        w2 /= w2.sum()
        x = np.array([-0.2, -0.3])
        mix = 0.3
        blended = BeliefGrid(support, mix * w1 + (1 - mix) * w2)
        parts = mix * expected_info_matrix(model, x, BeliefGrid(support, w1)) + (
            1 - mix
        ) * expected_info_matrix(model, x, BeliefGrid(support, w2))
        assert np.allclose(expected_info_matrix(model, x, blended), parts, atol=1e-12)

    def test_gaussian_grid_refinement_converges(self):
        # sensor kept clear of the belief support: the azimuth row is
        # near-singular at small planar range and would dominate refinement
        model = bearing_model_3d()
        mean = np.array([0.6, 0.4, 0.0])
        cov = np.diag([0.005, 0.005, 0.002])
        x = np.array([0.05, 0.95, 1.0])
        coarse = expected_info_matrix(model, x, BeliefGrid.from_gaussian(mean, cov, 30))
        fine = expected_info_matrix(model, x, BeliefGrid.from_gaussian(mean, cov, 60))
        rel = np.linalg.norm(coarse - fine) / np.linalg.norm(fine)
        assert rel < 0.02


class TestEidValue:
    def test_zero_matrix(self):
        assert eid_value(np.zeros((3, 3))) == 0.0

    def test_identity(self):
        assert eid_value(np.eye(3)) == pytest.approx(1.0)

    def test_matches_cofactor_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            root = rng.normal(size=(3, 3))
            mat = root @ root.T
            assert eid_value(mat) == pytest.approx(det_by_cofactors(mat), rel=1e-10)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(4)
        root = rng.normal(size=(3, 3))
        mat = root @ root.T
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        assert eid_value(q.T @ mat @ q) == pytest.approx(eid_value(mat), abs=1e-9)

    def test_negative_roundoff_clipped(self):
        tiny = np.array([[1e-9, 1.0], [1.0, 1e-9]])
        assert eid_value(tiny) == 0.0


class TestBearingModels:
    def test_target_north_at_equal_height(self):
        model = bearing_model_3d()
        z = model.predict(np.array([0.5, 0.9, 1.0]), np.array([0.5, 0.4, 1.0]))
        assert z[0] == pytest.approx(0.0)
        assert z[1] == pytest.approx(0.0)

    def test_target_directly_below(self):
        model = bearing_model_3d()
        z = model.predict(np.array([0.5, 0.5, 0.0]), np.array([0.5, 0.5, 1.0]))
        assert z[1] == pytest.approx(-np.pi / 2)

    def test_coincident_raises(self):
        model = bearing_model_3d()
        with pytest.raises(ModelSingularError):
            model.predict(np.array([0.5, 0.5, 1.0]), np.array([0.5, 0.5, 1.0]))
        model2 = bearing_model_2d()
        with pytest.raises(ModelSingularError):
            model2.predict(np.array([0.5, 0.5]), np.array([0.5, 0.5]))

    @pytest.mark.parametrize("make_model,dim", [(bearing_model_3d, 3), (bearing_model_2d, 2)])
    def test_jacobians_match_finite_difference(self, make_model, dim):
        model = make_model()
        rng = np.random.default_rng(5)
        checked = 0
        while checked < 100:
            alpha = rng.uniform(-1, 2, size=dim)
            x = rng.uniform(-1, 2, size=dim)
            if model.planar_range(alpha, x) < 0.1:
                continue
            step = 1e-7
            jac_fd = np.empty((model.meas_dim, dim))
            for d in range(dim):
                ap, am = alpha.copy(), alpha.copy()
                ap[d] += step
                am[d] -= step
                diff = model.predict(ap, x) - model.predict(am, x)
                diff = np.arctan2(np.sin(diff), np.cos(diff))
                jac_fd[:, d] = diff / (2 * step)
            got = model.jacobian_alpha(alpha, x)
            scale = max(np.abs(jac_fd).max(), 1e-9)
            assert np.abs(got - jac_fd).max() / scale < 1e-5
            checked += 1

    def test_pairwise_jacobian_matches_single(self):
        model = bearing_model_3d()
        rng = np.random.default_rng(6)
        alphas = rng.uniform(0.1, 0.9, size=(7, 3))
        sensors = np.hstack([rng.uniform(0, 1, size=(5, 2)), np.full((5, 1), 1.0)])
        batch = model.jacobian_pairwise(alphas, sensors)
        for s in range(5):
            for b in range(7):
                assert np.allclose(batch[s, b], model.jacobian_alpha(alphas[b], sensors[s]), atol=1e-12)


class TestBuildEid:
    def test_no_targets_with_floor_gives_uniform(self):
        model = bearing_model_3d()
        grid = build_eid_grid(model, [], np.array([1.0]), UNIT2, (20, 20), 0.5)
        assert grid.is_normalized()
        assert np.ptp(grid.values) < 1e-12

    def test_no_targets_zero_floor_falls_back_to_uniform(self):
        model = bearing_model_3d()
        grid = build_eid_grid(model, [], np.array([1.0]), UNIT2, (20, 20), 0.0)
        assert grid.is_normalized()
        assert np.ptp(grid.values) < 1e-12

    def test_tight_belief_gives_ring_near_target(self):
        model = bearing_model_3d()
        mean = np.array([0.6, 0.45, 0.0])
        belief = BeliefGrid.from_gaussian(mean, np.diag([0.01, 0.01, 0.004]), 11)
        grid = build_eid_grid(model, [belief], np.array([1.0]), UNIT2, (41, 41), 0.0)
        assert grid.is_normalized()
        centers = grid.centers()
        peak = centers[int(np.argmax(grid.values.reshape(-1)))]
        planar_sigma = 3 * np.sqrt(0.01)
        assert np.linalg.norm(peak - mean[:2]) <= planar_sigma
        # annulus: the exact estimated position scores below the peak
        at_mean = grid.values.reshape(-1)[
            int(np.argmin(np.linalg.norm(centers - mean[:2], axis=1)))
        ]
        assert at_mean < grid.values.max()

    def test_zero_floor_density_is_pure_normalized_determinant(self):
        model = bearing_model_2d()
        belief = BeliefGrid.from_gaussian(np.array([0.3, 0.7]), np.diag([0.02, 0.02]), 15)
        grid = build_eid_grid(model, [belief], np.array([]), UNIT2, (25, 25), 0.0)
        raw = np.empty(25 * 25)
        base = build_eid_grid(model, [], np.array([]), UNIT2, (25, 25), 0.0)
        for i, center in enumerate(base.centers()):
            raw[i] = eid_value(expected_info_matrix(model, center, belief))
        raw /= raw.sum() * grid.cell_volume
        assert np.allclose(grid.values.reshape(-1), raw, rtol=1e-8, atol=1e-10)

    def test_multi_target_sums_before_normalization(self):
        model = bearing_model_2d()
        b1 = BeliefGrid.from_gaussian(np.array([0.25, 0.25]), np.diag([0.01, 0.01]), 9)
        b2 = BeliefGrid.from_gaussian(np.array([0.75, 0.75]), np.diag([0.01, 0.01]), 9)
        grid = build_eid_grid(model, [b1, b2], np.array([]), UNIT2, (31, 31), 0.0)
        vals = grid.values
        # both neighborhoods carry information mass
        assert vals[:15, :15].sum() > 0.1 * vals.sum()
        assert vals[16:, 16:].sum() > 0.1 * vals.sum()

    def test_support_cutoff_creates_disjoint_support(self):
        model = bearing_model_2d()
        belief = BeliefGrid.from_gaussian(np.array([0.2, 0.2]), np.diag([0.005, 0.005]), 11)
        grid = build_eid_grid(model, [belief], np.array([]), UNIT2, (31, 31), 0.0, support_cutoff=1e-3)
        centers = grid.centers()
        far = np.linalg.norm(centers - np.array([0.85, 0.85]), axis=1) < 0.15
        assert np.all(grid.values.reshape(-1)[far] == 0.0)

    def test_floor_applies_to_max_normalized_field(self):
        model = bearing_model_2d()
        belief = BeliefGrid.from_gaussian(np.array([0.5, 0.5]), np.diag([0.01, 0.01]), 11)
        floored = build_eid_grid(model, [belief], np.array([]), UNIT2, (31, 31), 0.5)
        assert floored.is_normalized()
        prenorm = floored.values * floored.values.max()
        ratio = floored.values.min() / floored.values.max()
        assert ratio >= 0.5 / (1.0 / 0.5)  # min/max of the floored field is >= floor
