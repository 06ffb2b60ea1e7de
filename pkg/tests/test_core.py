import numpy as np
import pytest

from splatalign import (
    Camera,
    GaussianComponent,
    GaussianMixture,
    Quaternion,
    Sim3Params,
    covariance_from_splat_params,
    normalize_weights,
    quat_to_rotation,
    sim3_apply_component,
    sim3_apply_mixture,
    sim3_compose,
    sim3_invert,
)
from splatalign.errors import AllOpacitiesZeroError, NotSymmetricError

from helpers import random_mixture, random_quaternion, random_sim3


def mix_with_opacities(opacities):
    n = len(opacities)
    return GaussianMixture(
        np.zeros((n, 3)),
        np.tile(np.eye(3), (n, 1, 1)),
        np.full(n, 1.0 / n),
        np.array(opacities, dtype=float),
        np.zeros((n, 3)),
    )


class TestNormalizeWeights:
    def test_symmetric(self):
        out = normalize_weights(mix_with_opacities([0.5, 0.5]))
        np.testing.assert_allclose(out.weights, [0.5, 0.5])

    def test_arithmetic(self):
        out = normalize_weights(mix_with_opacities([1.0, 3.0]))
        np.testing.assert_allclose(out.weights, [0.25, 0.75])

    def test_all_zero_raises(self):
        with pytest.raises(AllOpacitiesZeroError):
            normalize_weights(mix_with_opacities([0.0, 0.0]))

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            mix = normalize_weights(mix_with_opacities(rng.uniform(0.01, 1.0, size=7)))
            assert abs(mix.weights.sum() - 1.0) <= 1e-9

    def test_other_fields_unchanged(self):
        mix = random_mixture(np.random.default_rng(1), 5)
        out = normalize_weights(mix)
        np.testing.assert_array_equal(out.means, mix.means)
        np.testing.assert_array_equal(out.covariances, mix.covariances)
        np.testing.assert_array_equal(out.opacities, mix.opacities)


class TestQuatToRotation:
    def test_identity(self):
        np.testing.assert_array_equal(quat_to_rotation(Quaternion.identity()), np.eye(3))

    def test_90deg_about_z(self):
        q = Quaternion(np.sqrt(2) / 2, 0.0, 0.0, np.sqrt(2) / 2)
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(quat_to_rotation(q), expected, atol=1e-15)

    def test_random_orthonormal(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            R = quat_to_rotation(random_quaternion(rng))
            assert np.abs(R.T @ R - np.eye(3)).max() <= 1e-12
            assert abs(np.linalg.det(R) - 1.0) <= 1e-12

    def test_homomorphism(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            q1, q2 = random_quaternion(rng), random_quaternion(rng)
            left = quat_to_rotation((q1 * q2).normalized())
            right = quat_to_rotation(q1) @ quat_to_rotation(q2)
            assert np.abs(left - right).max() <= 1e-10

    def test_from_rotation_round_trip(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            q = random_quaternion(rng)
            R = quat_to_rotation(q)
            q2 = Quaternion.from_rotation_matrix(R)
            assert np.abs(quat_to_rotation(q2) - R).max() <= 1e-12


class TestSim3Apply:
    def test_identity(self):
        g = GaussianComponent(np.array([1.0, 2.0, 3.0]), np.diag([1.0, 2.0, 3.0]), 0.5, 0.5, np.ones(3))
        out = sim3_apply_component(Sim3Params.identity(), g)
        np.testing.assert_array_equal(out.mean, g.mean)
        np.testing.assert_array_equal(out.covariance, g.covariance)
        assert out.weight == g.weight and out.opacity == g.opacity

    def test_hand_substitution(self):
        theta = Sim3Params(
            Quaternion(np.sqrt(2) / 2, 0.0, 0.0, np.sqrt(2) / 2),
            np.array([1.0, 0.0, 0.0]),
            np.log(2.0),
        )
        g = GaussianComponent(np.array([1.0, 0.0, 0.0]), np.diag([1.0, 4.0, 9.0]))
        out = sim3_apply_component(theta, g)
        np.testing.assert_allclose(out.mean, [1.0, 2.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(out.covariance, np.diag([16.0, 4.0, 36.0]), atol=1e-12)

    def test_total_weight_preserved_exactly(self):
        rng = np.random.default_rng(11)
        mix = random_mixture(rng, 30)
        out = sim3_apply_mixture(random_sim3(rng), mix)
        assert out.weights.sum() == mix.weights.sum()

    def test_positive_definiteness_preserved(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            mix = random_mixture(rng, 5)
            theta = random_sim3(rng)
            out = sim3_apply_mixture(theta, mix)
            s2 = theta.s**2
            for i in range(mix.count):
                lo_in = np.linalg.eigvalsh(mix.covariances[i]).min()
                lo_out = np.linalg.eigvalsh(out.covariances[i]).min()
                assert lo_out >= s2 * lo_in * (1 - 1e-9)


class TestComposeInvert:
    def test_compose_identity(self):
        rng = np.random.default_rng(13)
        theta = random_sim3(rng)
        out = sim3_compose(Sim3Params.identity(), theta)
        np.testing.assert_allclose(out.as_vector(), theta.as_vector(), atol=1e-12)

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(14)
        theta = random_sim3(rng)
        out = sim3_compose(theta, sim3_invert(theta))
        pts = rng.normal(size=(20, 3))
        np.testing.assert_allclose(out.apply_points(pts), pts, atol=1e-9)

    def test_compose_matches_sequential_apply(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            a, b = random_sim3(rng), random_sim3(rng)
            pts = rng.normal(size=(100, 3))
            lhs = sim3_compose(a, b).apply_points(pts)
            rhs = a.apply_points(b.apply_points(pts))
            np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_invert_identity(self):
        out = sim3_invert(Sim3Params.identity())
        np.testing.assert_allclose(out.as_vector(), Sim3Params.identity().as_vector(), atol=0)

    def test_invert_translation_only(self):
        theta = Sim3Params(Quaternion.identity(), np.array([1.0, 0.0, 0.0]), 0.0)
        np.testing.assert_allclose(sim3_invert(theta).t, [-1.0, 0.0, 0.0], atol=1e-15)

    def test_double_invert_round_trip(self):
        rng = np.random.default_rng(16)
        for _ in range(20):
            theta = random_sim3(rng)
            back = sim3_invert(sim3_invert(theta))
            pts = rng.normal(size=(10, 3))
            np.testing.assert_allclose(back.apply_points(pts), theta.apply_points(pts), atol=1e-9)


class TestCovarianceFromSplatParams:
    def test_identity(self):
        out = covariance_from_splat_params(np.zeros(3), Quaternion.identity())
        np.testing.assert_allclose(out, np.eye(3), atol=1e-15)

    def test_log2_first_axis(self):
        out = covariance_from_splat_params(np.array([np.log(2.0), 0.0, 0.0]), Quaternion.identity())
        np.testing.assert_allclose(out, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_random_eigenvalues_match(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            log_scale = rng.uniform(-2.0, 1.0, size=3)
            q = random_quaternion(rng)
            cov = covariance_from_splat_params(log_scale, q)
            assert np.abs(cov - cov.T).max() <= 1e-12 * np.abs(cov).max()
            eig = np.sort(np.linalg.eigvalsh(cov))
            np.testing.assert_allclose(eig, np.sort(np.exp(2 * log_scale)), rtol=1e-9)


class TestValidation:
    def test_asymmetric_covariance_rejected(self):
        cov = np.eye(3)
        cov = cov + 0.0
        cov[0, 1] = 1e-3
        with pytest.raises(NotSymmetricError):
            GaussianComponent(np.zeros(3), cov)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            GaussianComponent(np.zeros(3), np.eye(3), weight=-0.1)

    def test_camera_wants_orthonormal_rotation(self):
        with pytest.raises(ValueError):
            Camera(100, 100, 32, 32, 64, 64, np.eye(3) * 1.001, np.zeros(3))
        with pytest.raises(ValueError):
            Camera(-1, 100, 32, 32, 64, 64, np.eye(3), np.zeros(3))

    def test_mixture_arrays_read_only(self):
        mix = random_mixture(np.random.default_rng(18), 4)
        with pytest.raises(ValueError):
            mix.means[0, 0] = 7.0
