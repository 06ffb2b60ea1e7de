"""Minimal CPU splat rasterizer: RGB, depth and coverage images.

Components are projected to screen-space 2D Gaussians (EWA-style local
linearization), depth-sorted and alpha-composited front to back. Per pixel,
depth is the alpha-weighted mean splat depth, and the valid mask marks pixels
whose accumulated opacity clears ``mask_threshold``. The loop is plain numpy
over per-splat bounding boxes: deterministic, no BLAS in the compositing
path, fast enough for the small frames the registration losses use.
"""
from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from .core import Camera, GaussianComponent, GaussianMixture
from .errors import BehindCameraError, DimensionMismatchError, EmptyIntersectionWarning

NEAR_PLANE = 1e-3
FOOTPRINT_SIGMA = 3.0
ALPHA_CLAMP = 0.999


@dataclass(frozen=True)
class RenderOutput:
    """Rasterized images: rgb (H, W, 3), depth/alpha (H, W), valid_mask bool."""

    rgb: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    valid_mask: np.ndarray


def project_gaussian(g: GaussianComponent, cam: Camera):
    """Screen-space center (px), 2x2 covariance (px^2) and camera depth.

    The screen covariance is J W Sigma W^T J^T with W the camera rotation and
    J the pinhole Jacobian at the mean; eigenvalues are clamped to keep it
    positive definite.
    """
    mean_cam = cam.rotation @ g.mean + cam.translation
    z = float(mean_cam[2])
    if z <= NEAR_PLANE:
        raise BehindCameraError(f"component depth {z:.4g} behind near plane")
    x, y = float(mean_cam[0]), float(mean_cam[1])
    center = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    J = np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
            [0.0, cam.fy / z, -cam.fy * y / (z * z)],
        ]
    )
    JW = J @ cam.rotation
    cov2d = JW @ g.covariance @ JW.T
    cov2d = _clamp_spd_2x2(cov2d)
    return center, cov2d, z


def _clamp_spd_2x2(S: np.ndarray, floor: float = 1e-10) -> np.ndarray:
    S = 0.5 * (S + S.T)
    tr = S[0, 0] + S[1, 1]
    det = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
    gap = np.sqrt(max((tr / 2.0) ** 2 - det, 0.0))
    lo = tr / 2.0 - gap
    if lo < floor:
        bump = floor - lo
        S = S + bump * np.eye(2)
    return S


def render(
    mixture: GaussianMixture | None,
    cam: Camera,
    bg=(0.0, 0.0, 0.0),
    mask_threshold: float = 0.5,
) -> RenderOutput:
    """Rasterize a mixture; ``mixture`` may be None for a background-only frame."""
    H, W = cam.height, cam.width
    bg = np.asarray(bg, dtype=np.float64)
    rgb_acc = np.zeros((H, W, 3))
    depth_acc = np.zeros((H, W))
    transmit = np.ones((H, W))

    if mixture is not None and mixture.count > 0:
        splats = []
        for i in range(mixture.count):
            mean_cam = cam.rotation @ mixture.means[i] + cam.translation
            z = float(mean_cam[2])
            if z <= NEAR_PLANE:
                continue
            x, y = float(mean_cam[0]), float(mean_cam[1])
            center = (cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy)
            J = np.array(
                [
                    [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
                    [0.0, cam.fy / z, -cam.fy * y / (z * z)],
                ]
            )
            JW = J @ cam.rotation
            cov2d = _clamp_spd_2x2(JW @ mixture.covariances[i] @ JW.T)
            splats.append((z, i, center, cov2d))
        # front-to-back; index tie-break keeps the order reproducible
        splats.sort(key=lambda s: (s[0], s[1]))

        for z, i, (cx, cy), cov2d in splats:
            a, b_, c = cov2d[0, 0], cov2d[0, 1], cov2d[1, 1]
            det = a * c - b_ * b_
            if det <= 0:
                continue
            radius = FOOTPRINT_SIGMA * np.sqrt(max(a, c))
            x0 = max(int(np.floor(cx - radius)), 0)
            x1 = min(int(np.ceil(cx + radius)) + 1, W)
            y0 = max(int(np.floor(cy - radius)), 0)
            y1 = min(int(np.ceil(cy + radius)) + 1, H)
            if x0 >= x1 or y0 >= y1:
                continue
            xs = np.arange(x0, x1) - cx
            ys = np.arange(y0, y1) - cy
            dx = xs[None, :]
            dy = ys[:, None]
            # quadratic form d^T cov2d^{-1} d via the explicit 2x2 inverse
            qf = (c * dx * dx - 2.0 * b_ * dx * dy + a * dy * dy) / det
            weight = np.where(qf <= FOOTPRINT_SIGMA**2, np.exp(-0.5 * qf), 0.0)
            alpha = np.minimum(float(mixture.opacities[i]) * weight, ALPHA_CLAMP)
            t_patch = transmit[y0:y1, x0:x1]
            contrib = t_patch * alpha
            rgb_acc[y0:y1, x0:x1] += contrib[:, :, None] * mixture.colors[i]
            depth_acc[y0:y1, x0:x1] += contrib * z
            transmit[y0:y1, x0:x1] = t_patch * (1.0 - alpha)

    alpha_img = 1.0 - transmit
    rgb = rgb_acc + transmit[:, :, None] * bg
    depth = np.where(alpha_img > 0, depth_acc / np.maximum(alpha_img, 1e-30), 0.0)
    valid = alpha_img > mask_threshold
    return RenderOutput(rgb=rgb, depth=depth, alpha=alpha_img, valid_mask=valid)


def photometric_loss(a: RenderOutput, b: RenderOutput) -> float:
    """Mean absolute rgb difference over every pixel and channel."""
    if a.rgb.shape != b.rgb.shape:
        raise DimensionMismatchError(f"rgb shapes differ: {a.rgb.shape} vs {b.rgb.shape}")
    return float(np.abs(a.rgb - b.rgb).mean())


def depth_loss(a: RenderOutput, b: RenderOutput) -> float:
    """Mean absolute depth difference where both valid masks hold."""
    if a.depth.shape != b.depth.shape:
        raise DimensionMismatchError(f"depth shapes differ: {a.depth.shape} vs {b.depth.shape}")
    both = a.valid_mask & b.valid_mask
    if not both.any():
        warnings.warn("depth masks do not intersect; depth loss is 0", EmptyIntersectionWarning, stacklevel=2)
        return 0.0
    return float(np.abs(a.depth[both] - b.depth[both]).mean())


def write_png(path, rgb: np.ndarray) -> None:
    """Write an 8-bit RGB PNG (stdlib only; debugging aid)."""
    img = np.clip(np.asarray(rgb), 0.0, 1.0)
    data = (img * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape[:2]
    raw = b"".join(b"\x00" + data[r].tobytes() for r in range(h))

    def chunk(tag: bytes, body: bytes) -> bytes:
        return (
            struct.pack(">I", len(body))
            + tag
            + body
            + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF)
        )

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    payload = (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", zlib.compress(raw, 9))
        + chunk(b"IEND", b"")
    )
    with open(path, "wb") as fh:
        fh.write(payload)


def write_pfm(path, depth: np.ndarray) -> None:
    """Write a single-channel PFM depth map (little-endian, bottom-up rows)."""
    arr = np.asarray(depth, dtype=np.float32)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(arr[::-1].tobytes())
