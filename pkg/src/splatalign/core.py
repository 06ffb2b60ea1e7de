"""Core domain types: Gaussian mixtures, quaternions, Sim(3) transforms, cameras.

Conventions used throughout the package:
  - quaternions are (w, x, y, z), rotations act on column vectors,
  - a Sim(3) transform maps x -> s * R @ x + t with s = exp(log_s),
  - camera poses are world-to-camera (x_cam = R @ x_world + t).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AllOpacitiesZeroError, DimensionMismatchError

_QUAT_NORM_TOL = 1e-12


def _as_readonly(a, shape, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(a, dtype=dtype)
    if arr.shape != shape:
        raise DimensionMismatchError(f"expected shape {shape}, got {arr.shape}")
    # copy unless we already own a frozen contiguous buffer, so freezing
    # never mutates caller-visible state
    if arr.flags.writeable or not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
        arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Quaternion:
    """Unit-length rotation quaternion (after ``normalized``)."""

    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q) -> "Quaternion":
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (4,):
            raise DimensionMismatchError(f"quaternion needs 4 entries, got {q.shape}")
        return cls(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    @property
    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def normalized(self) -> "Quaternion":
        n = self.norm
        if n == 0.0:
            return Quaternion.identity()
        return Quaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        """Hamilton product, so rotation(a*b) = rotation(a) @ rotation(b)."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    @classmethod
    def from_rotation_matrix(cls, R) -> "Quaternion":
        """Recover the unit quaternion of a rotation matrix (Shepperd's method)."""
        R = np.asarray(R, dtype=np.float64)
        tr = R[0, 0] + R[1, 1] + R[2, 2]
        if tr > 0:
            s = math.sqrt(tr + 1.0) * 2.0
            q = (0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
        elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
            s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            q = ((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s)
        elif R[1, 1] >= R[2, 2]:
            s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
            q = ((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s)
        else:
            s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
            q = ((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s)
        quat = cls(*q).normalized()
        return quat if quat.w >= 0 else Quaternion(-quat.w, -quat.x, -quat.y, -quat.z)


def quat_to_rotation(q: Quaternion) -> np.ndarray:
    """Rotation matrix of a unit quaternion (caller guarantees normalization)."""
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
            [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
            [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
        ]
    )


@dataclass(frozen=True)
class Sim3Params:
    """Similarity transform parameters [q; t; log_s] (8 numbers, unit q)."""

    q: Quaternion
    t: np.ndarray
    log_s: float

    def __post_init__(self):
        object.__setattr__(self, "t", _as_readonly(self.t, (3,)))
        object.__setattr__(self, "log_s", float(self.log_s))

    @classmethod
    def identity(cls) -> "Sim3Params":
        return cls(Quaternion.identity(), np.zeros(3), 0.0)

    @classmethod
    def from_vector(cls, v) -> "Sim3Params":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (8,):
            raise DimensionMismatchError(f"Sim3 vector needs 8 entries, got {v.shape}")
        return cls(Quaternion.from_array(v[:4]).normalized(), v[4:7], float(v[7]))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q.as_array(), self.t, [self.log_s]])

    @property
    def s(self) -> float:
        return math.exp(self.log_s)

    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.q.normalized())

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array of points."""
        pts = np.asarray(pts, dtype=np.float64)
        return self.s * pts @ self.rotation().T + self.t


def sim3_compose(a: Sim3Params, b: Sim3Params) -> Sim3Params:
    """Transform equal to applying ``b`` first, then ``a``."""
    q = (a.q.normalized() * b.q.normalized()).normalized()
    t = a.s * a.rotation() @ b.t + a.t
    return Sim3Params(q, t, a.log_s + b.log_s)


def sim3_invert(theta: Sim3Params) -> Sim3Params:
    q_inv = theta.q.normalized().conjugate()
    s_inv = math.exp(-theta.log_s)
    t_inv = -s_inv * (quat_to_rotation(q_inv) @ theta.t)
    return Sim3Params(q_inv, t_inv, -theta.log_s)


@dataclass(frozen=True)
class GaussianComponent:
    """One anisotropic 3D Gaussian with opacity-derived weight and flat color."""

    mean: np.ndarray
    covariance: np.ndarray
    weight: float = 1.0
    opacity: float = 1.0
    color: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        object.__setattr__(self, "mean", _as_readonly(self.mean, (3,)))
        object.__setattr__(self, "covariance", _as_readonly(self.covariance, (3, 3)))
        object.__setattr__(self, "color", _as_readonly(self.color, (3,)))
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "opacity", float(self.opacity))
        if self.weight < 0:
            raise ValueError(f"weight must be >= 0, got {self.weight}")
        cov = self.covariance
        scale = max(float(np.abs(cov).max()), 1e-30)
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            from .errors import NotSymmetricError

            raise NotSymmetricError(f"covariance asymmetry {np.abs(cov - cov.T).max():.3e}")


class GaussianMixture:
    """Weighted set of 3D Gaussians, stored as packed arrays.

    Arrays are read-only; every operation returns a new mixture. ``means`` is
    (M, 3), ``covariances`` (M, 3, 3), ``weights``/``opacities`` (M,) and
    ``colors`` (M, 3).
    """

    __slots__ = ("means", "covariances", "weights", "opacities", "colors")

    def __init__(self, means, covariances, weights, opacities, colors):
        means = np.asarray(means, dtype=np.float64)
        if means.ndim != 2 or means.shape[1] != 3 or means.shape[0] < 1:
            raise DimensionMismatchError(f"means must be (M, 3) with M >= 1, got {means.shape}")
        m = means.shape[0]
        self.means = _as_readonly(means, (m, 3))
        self.covariances = _as_readonly(covariances, (m, 3, 3))
        self.weights = _as_readonly(weights, (m,))
        self.opacities = _as_readonly(opacities, (m,))
        self.colors = _as_readonly(colors, (m, 3))

    @property
    def count(self) -> int:
        return self.means.shape[0]

    def __len__(self) -> int:
        return self.count

    @classmethod
    def from_components(cls, components) -> "GaussianMixture":
        comps = list(components)
        if not comps:
            raise DimensionMismatchError("mixture needs at least one component")
        return cls(
            np.stack([c.mean for c in comps]),
            np.stack([c.covariance for c in comps]),
            np.array([c.weight for c in comps]),
            np.array([c.opacity for c in comps]),
            np.stack([c.color for c in comps]),
        )

    def component(self, i: int) -> GaussianComponent:
        return GaussianComponent(
            self.means[i], self.covariances[i], float(self.weights[i]), float(self.opacities[i]), self.colors[i]
        )

    @property
    def components(self) -> list[GaussianComponent]:
        return [self.component(i) for i in range(self.count)]

    def replace(self, **arrays) -> "GaussianMixture":
        data = {
            "means": self.means,
            "covariances": self.covariances,
            "weights": self.weights,
            "opacities": self.opacities,
            "colors": self.colors,
        }
        data.update(arrays)
        return GaussianMixture(**data)

    def subset(self, idx) -> "GaussianMixture":
        return GaussianMixture(
            self.means[idx], self.covariances[idx], self.weights[idx], self.opacities[idx], self.colors[idx]
        )

    def regularized(self, eps: float = 1e-6) -> "GaussianMixture":
        """Add eps * I to every covariance (positive-definiteness floor)."""
        return self.replace(covariances=self.covariances + eps * np.eye(3))

    def extent(self) -> float:
        """Diameter of the bounding box of component means."""
        span = self.means.max(axis=0) - self.means.min(axis=0)
        return float(np.linalg.norm(span))


def normalize_weights(mixture: GaussianMixture) -> GaussianMixture:
    """Reset weights to opacities normalized to sum 1."""
    total = float(mixture.opacities.sum())
    if total <= 0.0:
        raise AllOpacitiesZeroError("cannot normalize weights: sum of opacities is zero")
    return mixture.replace(weights=mixture.opacities / total)


def sim3_apply_mixture(theta: Sim3Params, mixture: GaussianMixture) -> GaussianMixture:
    """Transform every component: mean -> s R mean + t, cov -> s^2 R cov R^T."""
    s = theta.s
    R = theta.rotation()
    means = s * mixture.means @ R.T + theta.t
    covs = (s * s) * np.einsum("ab,kbc,dc->kad", R, mixture.covariances, R)
    return mixture.replace(means=means, covariances=covs)


def sim3_apply_component(theta: Sim3Params, g: GaussianComponent) -> GaussianComponent:
    s = theta.s
    R = theta.rotation()
    return GaussianComponent(
        s * R @ g.mean + theta.t,
        (s * s) * R @ g.covariance @ R.T,
        g.weight,
        g.opacity,
        g.color,
    )


def covariance_from_splat_params(log_scale, rot: Quaternion) -> np.ndarray:
    """Covariance R diag(exp(2 log_scale)) R^T of the standard splat storage."""
    log_scale = np.asarray(log_scale, dtype=np.float64)
    if log_scale.shape != (3,):
        raise DimensionMismatchError(f"log_scale needs 3 entries, got {log_scale.shape}")
    R = quat_to_rotation(rot.normalized())
    return (R * np.exp(2.0 * log_scale)) @ R.T


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_readonly(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _as_readonly(self.translation, (3,)))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9:
            raise ValueError("camera rotation is not orthonormal within 1e-9")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fx=100.0, fy=100.0, width=64, height=64) -> "Camera":
        """Camera at ``eye`` with +z toward ``target`` (right-handed, y down)."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        upv = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, upv)
        if np.linalg.norm(right) < 1e-9:
            upv = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
            right = np.cross(fwd, upv)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, width, height, R, -R @ eye)
