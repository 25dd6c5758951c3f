"""Pinhole projection with a yaw-only object pose.

Conventions: camera frame has x right, y down, z forward; the object frame
is centered at the object and rotated about the vertical (y) axis by the
yaw angle r_y. All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import PointBehindCamera

TWO_PI = 2.0 * math.pi


def wrap_yaw(r_y: float) -> float:
    """Wrap an angle to the canonical interval [-pi, pi)."""
    return (float(r_y) + math.pi) % TWO_PI - math.pi


class Pixel(NamedTuple):
    u: float
    v: float


class NormalizedPixel(NamedTuple):
    """Pixel shifted by the principal point and divided by the focal length."""

    u: float
    v: float


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics (pixels)."""

    f_x: float
    f_y: float
    c_x: float
    c_y: float

    def __post_init__(self):
        vals = (self.f_x, self.f_y, self.c_x, self.c_y)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("camera intrinsics must be finite")
        if self.f_x <= 0.0 or self.f_y <= 0.0:
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.f_x, 0.0, self.c_x], [0.0, self.f_y, self.c_y], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class Pose:
    """Yaw rotation plus camera-frame translation (x_c, y_c, z_c) in meters.

    Yaw is wrapped to [-pi, pi) on construction. z_c > 0 is required for the
    object to be projectable but is not enforced here, so that degenerate
    poses can be handed to `project` and rejected with PointBehindCamera.
    """

    r_y: float
    t: tuple[float, float, float]

    def __post_init__(self):
        t = tuple(float(v) for v in self.t)
        if len(t) != 3:
            raise ValueError("translation must have three components")
        if not math.isfinite(self.r_y) or not all(math.isfinite(v) for v in t):
            raise ValueError("pose must be finite")
        object.__setattr__(self, "r_y", wrap_yaw(self.r_y))
        object.__setattr__(self, "t", t)

    @property
    def x_c(self) -> float:
        return self.t[0]

    @property
    def y_c(self) -> float:
        return self.t[1]

    @property
    def z_c(self) -> float:
        return self.t[2]

    @property
    def R(self) -> np.ndarray:
        c, s = math.cos(self.r_y), math.sin(self.r_y)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]], dtype=np.float64)


@dataclass(frozen=True)
class Keypoint3D:
    """Object-frame keypoint with a semantic index."""

    x_o: float
    y_o: float
    z_o: float
    index: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([self.x_o, self.y_o, self.z_o], dtype=np.float64)


def _point_array(p) -> np.ndarray:
    if isinstance(p, Keypoint3D):
        return p.as_array()
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (3,):
        raise ValueError("expected a 3-vector")
    return arr


def rotation_apply(r_y: float, p) -> np.ndarray:
    """Rotate an object-frame point by yaw r_y about the vertical axis.

    Returns (x cos r_y + z sin r_y, y, -x sin r_y + z cos r_y).
    """
    x, y, z = _point_array(p)
    c, s = math.cos(r_y), math.sin(r_y)
    return np.array([x * c + z * s, y, -x * s + z * c], dtype=np.float64)


def project(cam: Camera, pose: Pose, p) -> tuple[Pixel, float]:
    """Project an object-frame keypoint; returns the pixel and its depth s.

    Raises PointBehindCamera when the camera-frame depth s is <= 0.
    """
    cam_pt = rotation_apply(pose.r_y, p) + np.asarray(pose.t)
    s = float(cam_pt[2])
    if s <= 0.0:
        raise PointBehindCamera(f"depth {s} <= 0")
    u = cam.f_x * cam_pt[0] / s + cam.c_x
    v = cam.f_y * cam_pt[1] / s + cam.c_y
    return Pixel(float(u), float(v)), s


def project_points(
    cam: Camera, pose: Pose, pts: np.ndarray, strict: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized `project` for an (n, 3) array of object-frame points.

    Returns (uv (n, 2), s (n,)). With strict=True any s <= 0 raises
    PointBehindCamera; otherwise the offending pixels are NaN.
    """
    pts = np.asarray(pts, dtype=np.float64)
    c, s_ = math.cos(pose.r_y), math.sin(pose.r_y)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    X = x * c + z * s_ + pose.x_c
    Y = y + pose.y_c
    S = -x * s_ + z * c + pose.z_c
    if strict and np.any(S <= 0.0):
        raise PointBehindCamera("at least one keypoint has depth <= 0")
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.f_x * X / S + cam.c_x
        v = cam.f_y * Y / S + cam.c_y
    uv = np.stack([u, v], axis=1)
    uv[S <= 0.0] = np.nan
    return uv, S


def normalize(cam: Camera, px) -> NormalizedPixel:
    """Map a pixel to dimensionless coordinates ((u - c_x)/f_x, (v - c_y)/f_y)."""
    u, v = px
    return NormalizedPixel((u - cam.c_x) / cam.f_x, (v - cam.c_y) / cam.f_y)


def denormalize(cam: Camera, npx) -> Pixel:
    """Inverse of `normalize`."""
    u, v = npx
    return Pixel(u * cam.f_x + cam.c_x, v * cam.f_y + cam.c_y)


def normalize_points(cam: Camera, uv: np.ndarray) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64)
    out = np.empty_like(uv)
    out[..., 0] = (uv[..., 0] - cam.c_x) / cam.f_x
    out[..., 1] = (uv[..., 1] - cam.c_y) / cam.f_y
    return out


def denormalize_points(cam: Camera, npx: np.ndarray) -> np.ndarray:
    npx = np.asarray(npx, dtype=np.float64)
    out = np.empty_like(npx)
    out[..., 0] = npx[..., 0] * cam.f_x + cam.c_x
    out[..., 1] = npx[..., 1] * cam.f_y + cam.c_y
    return out
