"""Synthetic scenes standing in for a learned keypoint detector.

A template holds object-frame keypoints (8 box corners, top/bottom centers,
plus surface samples); instances draw a random yaw-only pose, project the
keypoints through a pinhole camera, and corrupt both the pixels and the 3D
points with a configurable noise model. Everything is deterministic given
(config, seed), and datasets round-trip losslessly through line-delimited
JSON.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, UnprojectableInstance
from .geometry import Camera, Pose, project_points

DATASET_SCHEMA = "edgedepth.dataset.v1"

# KITTI-like defaults: typical car box and a 1280x384 padded frame
DEFAULT_DIMS = (1.5, 1.6, 3.9)
DEFAULT_CAMERA = Camera(f_x=721.5, f_y=721.5, c_x=609.6, c_y=172.9)


@dataclass(frozen=True)
class ObjectTemplate:
    """Named keypoint template; dims are (h, w, l) meters, y vertical."""

    name: str
    kind: str
    dims: tuple[float, float, float]
    keypoints: np.ndarray  # (n, 3) object frame, center origin

    @property
    def n(self) -> int:
        return self.keypoints.shape[0]


@dataclass(frozen=True)
class NoiseModel:
    """Detector-error stand-in applied to one instance.

    sigma_px: Gaussian pixel noise std; sigma_3d: Gaussian object-frame
    keypoint noise std (m); p_outlier: probability a pixel is replaced by a
    uniform draw in a +-outlier_px box around the true pixel.
    """

    sigma_px: float = 0.0
    sigma_3d: float = 0.0
    p_outlier: float = 0.0
    outlier_px: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_px, self.sigma_3d, self.outlier_px) < 0.0:
            raise ValueError("noise magnitudes must be >= 0")
        if not 0.0 <= self.p_outlier <= 1.0:
            raise ValueError("p_outlier must be in [0, 1]")


@dataclass(frozen=True)
class PoseRanges:
    """Sampling ranges for instance poses; x_c is drawn as a fraction of z_c
    so objects stay near the viewing frustum at any depth."""

    z_range: tuple[float, float] = (5.0, 60.0)
    x_frac_range: tuple[float, float] = (-0.2, 0.2)
    y_range: tuple[float, float] = (0.8, 1.8)
    yaw_range: tuple[float, float] = (-math.pi, math.pi)


@dataclass
class ObjectInstance:
    """One synthetic object: clean geometry plus the corrupted observations."""

    template_name: str
    camera: Camera
    pose: Pose
    kp_index: np.ndarray   # (n,) semantic indices
    kp3d_clean: np.ndarray  # (n, 3) template keypoints
    kp3d: np.ndarray        # (n, 3) corrupted object-frame keypoints
    kp2d_clean: np.ndarray  # (n, 2) exact projections
    kp2d: np.ndarray        # (n, 2) corrupted pixels
    z_star: float           # ground-truth object depth
    seed: int = 0

    @property
    def n(self) -> int:
        return self.kp_index.shape[0]


def _box_corners(dims) -> np.ndarray:
    h, w, l = dims
    pts = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            for sz in (-1.0, 1.0):
                pts.append((sx * l / 2.0, sy * h / 2.0, sz * w / 2.0))
    return np.array(pts)


def _face_samples(dims, n_extra: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the box surface, faces weighted by area."""
    h, w, l = dims
    # faces: +-x (h*w), +-y (l*w), +-z (l*h)
    areas = np.array([h * w, h * w, l * w, l * w, l * h, l * h])
    probs = areas / areas.sum()
    pts = np.empty((n_extra, 3))
    faces = rng.choice(6, size=n_extra, p=probs)
    r1 = rng.uniform(-0.5, 0.5, size=n_extra)
    r2 = rng.uniform(-0.5, 0.5, size=n_extra)
    for i, f in enumerate(faces):
        if f < 2:
            pts[i] = ((1 if f == 1 else -1) * l / 2.0, r1[i] * h, r2[i] * w)
        elif f < 4:
            pts[i] = (r1[i] * l, (1 if f == 3 else -1) * h / 2.0, r2[i] * w)
        else:
            pts[i] = (r1[i] * l, r2[i] * h, (1 if f == 5 else -1) * w / 2.0)
    return pts


def make_template(kind: str = "car_like", n_extra: int = 63,
                  dims: tuple[float, float, float] | None = None,
                  seed: int = 0) -> ObjectTemplate:
    """Box template: 8 corners, top and bottom centers, n_extra face samples.

    kind="car_like" tapers the upper half of the extra samples inward,
    a crude cabin profile; kind="box" keeps them on the box surface.
    """
    if kind not in ("box", "car_like"):
        raise ValueError(f"unknown template kind {kind!r}")
    dims = tuple(float(d) for d in (dims or DEFAULT_DIMS))
    if min(dims) <= 0.0:
        raise ValueError("dims must be positive")
    h = dims[0]
    base = np.concatenate([
        _box_corners(dims),
        np.array([(0.0, -h / 2.0, 0.0), (0.0, h / 2.0, 0.0)]),  # top, bottom
    ])
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    extra = _face_samples(dims, n_extra, rng) if n_extra else np.empty((0, 3))
    if kind == "car_like" and n_extra:
        # shrink x/z toward the centerline above mid-height (y up is -h/2)
        above = extra[:, 1] < 0.0
        t = np.where(above, -extra[:, 1] / (h / 2.0), 0.0)
        scale = 1.0 - 0.35 * t
        extra[:, 0] *= scale
        extra[:, 2] *= scale
    kps = np.concatenate([base, extra])
    return ObjectTemplate(f"{kind}-{kps.shape[0]}kp-seed{seed}", kind, dims, kps)


def sample_instance(template: ObjectTemplate, pose_ranges: PoseRanges,
                    camera: Camera, noise: NoiseModel, seed: int,
                    max_redraws: int = 100) -> ObjectInstance:
    """Draw one instance; raises UnprojectableInstance when no pose within
    the ranges puts every keypoint in front of the camera."""
    ss = np.random.SeedSequence([noise.seed, int(seed)])
    pose_rng, noise_rng = (np.random.default_rng(c) for c in ss.spawn(2))
    for _ in range(max_redraws):
        r_y = pose_rng.uniform(*pose_ranges.yaw_range)
        z_c = pose_rng.uniform(*pose_ranges.z_range)
        x_c = z_c * pose_rng.uniform(*pose_ranges.x_frac_range)
        y_c = pose_rng.uniform(*pose_ranges.y_range)
        pose = Pose(r_y=r_y, t=(x_c, y_c, z_c))
        uv, s = project_points(camera, pose, template.keypoints, strict=False)
        if (s > 0.0).all():
            break
    else:
        raise UnprojectableInstance(
            f"no valid pose after {max_redraws} draws (seed {seed})")

    n = template.n
    kp2d = uv.copy()
    if noise.sigma_px > 0.0:
        kp2d += noise_rng.normal(0.0, noise.sigma_px, size=(n, 2))
    if noise.p_outlier > 0.0:
        hit = noise_rng.random(n) < noise.p_outlier
        shift = noise_rng.uniform(-noise.outlier_px, noise.outlier_px, size=(n, 2))
        kp2d[hit] = uv[hit] + shift[hit]
    kp3d = template.keypoints.copy()
    if noise.sigma_3d > 0.0:
        kp3d += noise_rng.normal(0.0, noise.sigma_3d, size=(n, 3))

    return ObjectInstance(
        template_name=template.name,
        camera=camera,
        pose=pose,
        kp_index=np.arange(n, dtype=np.int64),
        kp3d_clean=template.keypoints.copy(),
        kp3d=kp3d,
        kp2d_clean=uv,
        kp2d=kp2d,
        z_star=pose.z_c,
        seed=int(seed),
    )


def _instance_record(inst: ObjectInstance) -> dict:
    return {
        "schema": DATASET_SCHEMA,
        "template_name": inst.template_name,
        "camera": [inst.camera.f_x, inst.camera.f_y, inst.camera.c_x, inst.camera.c_y],
        "pose": {"r_y": inst.pose.r_y, "t": list(inst.pose.t)},
        "kp_index": inst.kp_index.tolist(),
        "kp3d_clean": inst.kp3d_clean.tolist(),
        "kp3d": inst.kp3d.tolist(),
        "kp2d_clean": inst.kp2d_clean.tolist(),
        "kp2d": inst.kp2d.tolist(),
        "z_star": inst.z_star,
        "seed": inst.seed,
    }


def _instance_from_record(rec: dict) -> ObjectInstance:
    cam = Camera(*rec["camera"])
    pose = Pose(r_y=rec["pose"]["r_y"], t=tuple(rec["pose"]["t"]))
    return ObjectInstance(
        template_name=rec["template_name"],
        camera=cam,
        pose=pose,
        kp_index=np.asarray(rec["kp_index"], dtype=np.int64),
        kp3d_clean=np.asarray(rec["kp3d_clean"], dtype=np.float64),
        kp3d=np.asarray(rec["kp3d"], dtype=np.float64),
        kp2d_clean=np.asarray(rec["kp2d_clean"], dtype=np.float64),
        kp2d=np.asarray(rec["kp2d"], dtype=np.float64),
        z_star=float(rec["z_star"]),
        seed=int(rec.get("seed", 0)),
    )


def write_dataset(path, instances) -> None:
    """One JSON object per line; floats serialize via repr and parse back to
    the identical double, so read(write(x)) == x bit for bit."""
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(_instance_record(inst), sort_keys=True))
            fh.write("\n")


def read_dataset(path) -> list[ObjectInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad JSON: {exc}", line=lineno) from exc
            if rec.get("schema") != DATASET_SCHEMA:
                raise ParseError(
                    f"unknown schema {rec.get('schema')!r}", line=lineno)
            try:
                out.append(_instance_from_record(rec))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad record: {exc}", line=lineno) from exc
    return out
