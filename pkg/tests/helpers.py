"""Shared construction helpers for the test suite."""
from __future__ import annotations

import numpy as np

from splatalign import GaussianMixture, Quaternion, Sim3Params, normalize_weights


def random_quaternion(rng) -> Quaternion:
    v = rng.normal(size=4)
    return Quaternion.from_array(v / np.linalg.norm(v))


def random_rotation(rng) -> np.ndarray:
    from splatalign import quat_to_rotation

    return quat_to_rotation(random_quaternion(rng))


def random_spd(rng, scale=1.0) -> np.ndarray:
    a = rng.normal(size=(3, 3)) * scale
    return a @ a.T + 0.01 * scale * scale * np.eye(3)


def random_mixture(rng, n, spread=1.0, cov_scale=0.3) -> GaussianMixture:
    means = rng.normal(size=(n, 3)) * spread
    mats = rng.normal(size=(n, 3, 3)) * cov_scale
    covs = mats @ mats.transpose(0, 2, 1) + (0.05 * cov_scale**2 + 1e-6) * np.eye(3)
    opac = rng.uniform(0.3, 0.99, size=n)
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    mix = GaussianMixture(means, covs, np.full(n, 1.0 / n), opac, colors)
    return normalize_weights(mix)


def random_sim3(rng, max_angle_deg=30.0, max_t=0.5, log_s_range=(-0.5, 0.5)) -> Sim3Params:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(0.0, max_angle_deg))
    q = Quaternion(
        float(np.cos(angle / 2)),
        *(np.sin(angle / 2) * axis),
    )
    t = rng.uniform(-max_t, max_t, size=3)
    log_s = rng.uniform(*log_s_range)
    return Sim3Params(q, t, float(log_s))


def rotation_angle_deg(R1: np.ndarray, R2: np.ndarray) -> float:
    """Geodesic angle between two rotations, in degrees."""
    cosang = (np.trace(R1 @ R2.T) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
