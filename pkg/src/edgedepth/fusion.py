"""Combine depth candidates into a final depth and full 3D location."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dgde import edge_terms_arrays
from .errors import NonPositiveSigma, ShapeMismatch
from .geometry import normalize_points


@dataclass(frozen=True)
class LocationEstimate:
    """Estimated translation plus per-object fusion diagnostics."""

    x_c: float
    y_c: float
    z_c: float
    n_candidates: int = 0
    weight_entropy: float = 0.0


def _candidate_depths(cands) -> np.ndarray:
    if isinstance(cands, np.ndarray):
        return np.asarray(cands, dtype=np.float64)
    z = getattr(cands, "z", None)
    if z is None:
        z = [c.z for c in cands]
    return np.asarray(z, dtype=np.float64)


def fuse_depth_raw(z: np.ndarray, w: np.ndarray) -> float:
    """Weighted mean of candidate depths: z = sum_s w_s z_s."""
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != z.shape or z.ndim != 1:
        raise ShapeMismatch(f"weights {w.shape} vs candidates {z.shape}")
    if abs(w.sum() - 1.0) > 1e-6 or (w < 0.0).any():
        raise ValueError("weights must be nonnegative and sum to 1")
    return float(w @ z)


def fuse_depth(cands, w: np.ndarray) -> float:
    """`fuse_depth_raw` over a CandidateSet (or any candidate sequence)."""
    return fuse_depth_raw(_candidate_depths(cands), w)


def weight_uniform(m: int) -> np.ndarray:
    if m < 1:
        raise ValueError("need at least one candidate")
    return np.full(m, 1.0 / m)


def weight_uncertainty(sigmas: np.ndarray) -> np.ndarray:
    """Inverse-scale weights w_s = (1/sigma_s) / sum_t (1/sigma_t)."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.ndim != 1 or sigmas.size < 1:
        raise ShapeMismatch("sigmas must be a nonempty vector")
    if (sigmas <= 0.0).any() or not np.isfinite(sigmas).all():
        raise NonPositiveSigma("all sigmas must be positive and finite")
    inv = 1.0 / sigmas
    return inv / inv.sum()


def weight_entropy(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=np.float64)
    nz = w[w > 0.0]
    return float(-(nz * np.log(nz)).sum())


def estimate_location(instance, z_fused: float, *, view: str = "observed",
                      n_candidates: int = 0, weights: np.ndarray | None = None
                      ) -> LocationEstimate:
    """Full translation: z from fusion, x/y recovered per keypoint from the
    constraint terms at the fused depth and averaged uniformly."""
    if not z_fused > 0.0:
        raise ValueError("fused depth must be positive")
    order = np.argsort(instance.kp_index, kind="stable")
    kp3d = instance.kp3d[order]
    uv = (instance.kp2d if view == "observed" else instance.kp2d_clean)[order]
    npx = normalize_points(instance.camera, uv)
    l, h = edge_terms_arrays(instance.pose.r_y, kp3d, npx)
    x = npx[:, 0] * z_fused - l
    y = npx[:, 1] * z_fused - h
    ent = weight_entropy(weights) if weights is not None else 0.0
    return LocationEstimate(float(x.mean()), float(y.mean()), float(z_fused),
                            n_candidates, ent)
