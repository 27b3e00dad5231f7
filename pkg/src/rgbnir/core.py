"""Core spectral and geometric types shared across the package.

All radiometric quantities are linear (no gamma, no tone mapping). Images are
stored row-major as (height, width, channels) float64 arrays; pixel centers
sit at integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

# Unit-vector / rotation validation tolerance.
UNIT_TOL = 1e-6


class Channel(IntEnum):
    R = 0
    G = 1
    B = 2
    NIR = 3


RGB_CHANNELS = (Channel.R, Channel.G, Channel.B)


@dataclass
class SpectralImage:
    """Linear radiance image with 1 (NIR or mask), 3 (RGB) or 4 (RGB+NIR) channels.

    Values must be finite and non-negative unless the image is a
    gradient/difference buffer, in which case ``allow_negative`` is set.
    """

    data: np.ndarray
    allow_negative: bool = False

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"image data must be (H, W, C), got shape {self.data.shape}")
        if self.data.shape[2] not in (1, 3, 4):
            raise ValueError(f"channel count must be 1, 3 or 4, got {self.data.shape[2]}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite values")
        if not self.allow_negative and np.any(self.data < 0.0):
            raise ValueError("negative values in a non-difference image")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def add(self, other: "SpectralImage") -> "SpectralImage":
        self._check_compatible(other)
        return SpectralImage(self.data + other.data,
                             allow_negative=self.allow_negative or other.allow_negative)

    def subtract(self, other: "SpectralImage") -> "SpectralImage":
        """Pixelwise difference; the result is flagged as a signed buffer."""
        self._check_compatible(other)
        return SpectralImage(self.data - other.data, allow_negative=True)

    def scale(self, factor: float) -> "SpectralImage":
        return SpectralImage(self.data * float(factor),
                             allow_negative=self.allow_negative or factor < 0)

    def _check_compatible(self, other: "SpectralImage") -> None:
        if self.data.shape != other.data.shape:
            raise ValueError(f"image shape mismatch: {self.data.shape} vs {other.data.shape}")


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > UNIT_TOL:
            raise ValueError(f"ray direction must be unit length, |d| = {n}")


@dataclass
class PointLight:
    """Isotropic point emitter; intensity is radiant intensity per channel or scalar."""

    position: np.ndarray
    intensity: float

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if not self.intensity > 0.0:
            raise ValueError("point light intensity must be positive")


@dataclass
class FlashModel:
    """Camera-mounted NIR flash: a point light rigidly offset from the camera.

    ``offset`` is expressed in the camera frame and transforms with the pose.
    """

    offset: np.ndarray
    intensity: float

    def __post_init__(self) -> None:
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(3)
        if not self.intensity > 0.0:
            raise ValueError("flash intensity must be positive")

    def position_world(self, camera: "Camera") -> np.ndarray:
        return camera.center + camera.rotation.T @ self.offset


@dataclass
class Camera:
    """Pinhole camera. ``rotation``/``translation`` map world to camera space:
    x_cam = R @ x_world + t. Camera looks down +z; pixel (x, y) has x along width.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > UNIT_TOL or abs(np.linalg.det(self.rotation) - 1.0) > UNIT_TOL:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def project(camera: Camera, point: np.ndarray) -> tuple[np.ndarray, float] | None:
    """Project a world point; returns (pixel, depth) or None if behind the camera."""
    p = camera.to_camera(np.asarray(point, dtype=np.float64).reshape(3))
    z = p[2]
    if z <= 0.0:
        return None
    pixel = np.array([camera.fx * p[0] / z + camera.cx,
                      camera.fy * p[1] / z + camera.cy])
    return pixel, float(z)


def project_points(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched projection: returns (pixels (N,2), depths (N,), valid (N,) bool)."""
    p = camera.to_camera(points)
    z = p[:, 2]
    valid = z > 0.0
    zs = np.where(valid, z, 1.0)
    px = camera.fx * p[:, 0] / zs + camera.cx
    py = camera.fy * p[:, 1] / zs + camera.cy
    return np.stack([px, py], axis=1), z, valid


def ray_through(camera: Camera, pixel) -> Ray:
    """World-space ray through a pixel center (integer pixel coordinates)."""
    px, py = float(pixel[0]), float(pixel[1])
    d_cam = np.array([(px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, 1.0])
    d_world = camera.rotation.T @ d_cam
    return Ray(camera.center, d_world / np.linalg.norm(d_world))


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Rays through every pixel center: (origin (3,), directions (H*W, 3) unit).

    Directions are ordered row-major to match flattened image indexing.
    """
    xs = np.arange(camera.width, dtype=np.float64)
    ys = np.arange(camera.height, dtype=np.float64)
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([(gx.ravel() - camera.cx) / camera.fx,
                      (gy.ravel() - camera.cy) / camera.fy,
                      np.ones(camera.width * camera.height)], axis=1)
    d_world = d_cam @ camera.rotation
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    return camera.center, d_world


def look_at_camera(position, target, up, fx: float, fy: float, cx: float, cy: float,
                   width: int, height: int) -> Camera:
    """Build a camera at ``position`` looking at ``target`` (+z forward, +y down image).

    ``up`` fixes the roll; it must not be parallel to the view direction.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - position
    fn = np.linalg.norm(forward)
    if fn < 1e-12:
        raise ValueError("camera position coincides with target")
    forward = forward / fn
    right = np.cross(forward, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise ValueError("up vector parallel to view direction")
    right = right / rn
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=0)
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, rotation=rot,
                  translation=-rot @ position, width=width, height=height)


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Relative luminance of linear RGB (Rec. 709 weights)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * 0.2126 + rgb[..., 1] * 0.7152 + rgb[..., 2] * 0.0722


def normalize(v: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(n, eps)


def gamma_encode(image: np.ndarray) -> np.ndarray:
    """Linear [0, inf) -> display [0, 1] with gamma 2.2, for 8-bit previews only."""
    return np.clip(image, 0.0, 1.0) ** (1.0 / 2.2)
