"""Closed-form per-edge depth candidates from keypoint-pair projection constraints.

For keypoint i with normalized pixel (u_i, v_i), object-frame point
(x_o, y_o, z_o) and yaw r_y, define

    l_i = x_o cos(r_y) + z_o sin(r_y) + u_i (x_o sin(r_y) - z_o cos(r_y))
    h_i = y_o + v_i (x_o sin(r_y) - z_o cos(r_y))

Eliminating the unknown lateral translation between the constraints of two
keypoints yields the pair depth

    z = (l_i - l_j) / (u_i - u_j)    (horizontal form)
    z = (h_i - h_j) / (v_i - v_j)    (vertical form)

and, given a depth, the translation recovers as x_c = u z - l, y_c = v z - h.
Pairs whose denominators are both zero correspond to coincident viewing rays
and carry no depth information.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEdge, NoValidCandidates, TooFewKeypoints
from .geometry import normalize_points

AXIS_HORIZONTAL = "horizontal"
AXIS_VERTICAL = "vertical"


@dataclass(frozen=True)
class EdgeTerms:
    """Per-keypoint constraint terms (l, h)."""

    l: float
    h: float


@dataclass(frozen=True)
class DepthCandidate:
    """Depth implied by one keypoint pair (i < j)."""

    i: int
    j: int
    z: float
    denom: float
    axis: str
    valid: bool
    edge_index: int


class CandidateSet:
    """Array-backed sequence of DepthCandidate.

    `edge_index` is each candidate's position in the full canonical
    (i < j, lexicographic) pair list, which stays aligned with the rows
    of the matching cost/assignment matrices even after selection.
    """

    def __init__(self, i, j, z, denom, axis_u, valid, edge_index):
        self.i = np.asarray(i, dtype=np.int64)
        self.j = np.asarray(j, dtype=np.int64)
        self.z = np.asarray(z, dtype=np.float64)
        self.denom = np.asarray(denom, dtype=np.float64)
        self.axis_u = np.asarray(axis_u, dtype=bool)
        self.valid = np.asarray(valid, dtype=bool)
        self.edge_index = np.asarray(edge_index, dtype=np.int64)

    def __len__(self) -> int:
        return self.z.shape[0]

    def __getitem__(self, s: int) -> DepthCandidate:
        return DepthCandidate(
            i=int(self.i[s]),
            j=int(self.j[s]),
            z=float(self.z[s]),
            denom=float(self.denom[s]),
            axis=AXIS_HORIZONTAL if self.axis_u[s] else AXIS_VERTICAL,
            valid=bool(self.valid[s]),
            edge_index=int(self.edge_index[s]),
        )

    def __iter__(self):
        for s in range(len(self)):
            yield self[s]

    def take(self, idx: np.ndarray) -> "CandidateSet":
        return CandidateSet(
            self.i[idx], self.j[idx], self.z[idx], self.denom[idx],
            self.axis_u[idx], self.valid[idx], self.edge_index[idx],
        )


def edge_terms(r_y: float, kp3d, npx) -> EdgeTerms:
    """Constraint terms for one keypoint given its normalized pixel."""
    if hasattr(kp3d, "as_array"):
        x_o, y_o, z_o = kp3d.as_array()
    else:
        x_o, y_o, z_o = (float(t) for t in kp3d)
    u, v = (float(t) for t in npx)
    c, s = math.cos(r_y), math.sin(r_y)
    swing = x_o * s - z_o * c
    return EdgeTerms(l=x_o * c + z_o * s + u * swing, h=y_o + v * swing)


def edge_terms_arrays(r_y: float, kp3d: np.ndarray, npx: np.ndarray):
    """Vectorized `edge_terms`: (n, 3) points and (n, 2) normalized pixels."""
    kp3d = np.asarray(kp3d, dtype=np.float64)
    npx = np.asarray(npx, dtype=np.float64)
    c, s = math.cos(r_y), math.sin(r_y)
    swing = kp3d[:, 0] * s - kp3d[:, 2] * c
    l = kp3d[:, 0] * c + kp3d[:, 2] * s + npx[:, 0] * swing
    h = kp3d[:, 1] + npx[:, 1] * swing
    return l, h


def edge_depth(terms_i: EdgeTerms, terms_j: EdgeTerms, npx_i, npx_j,
               i: int = 0, j: int = 1, edge_index: int = 0) -> DepthCandidate:
    """Depth candidate from two keypoints' constraint terms.

    Evaluates both closed forms and keeps the one with the larger absolute
    denominator. Raises DegenerateEdge when both denominators are zero.
    """
    du = float(npx_i[0]) - float(npx_j[0])
    dv = float(npx_i[1]) - float(npx_j[1])
    if du == 0.0 and dv == 0.0:
        raise DegenerateEdge(f"pair ({i}, {j}) projects along coincident rays")
    if abs(du) >= abs(dv):
        z = (terms_i.l - terms_j.l) / du
        return DepthCandidate(i, j, z, abs(du), AXIS_HORIZONTAL,
                              math.isfinite(z), edge_index)
    z = (terms_i.h - terms_j.h) / dv
    return DepthCandidate(i, j, z, abs(dv), AXIS_VERTICAL,
                          math.isfinite(z), edge_index)


def recover_xy(z: float, terms: EdgeTerms, npx) -> tuple[float, float]:
    """Translation components implied by a depth and one keypoint's constraint."""
    u, v = (float(t) for t in npx)
    return u * z - terms.l, v * z - terms.h


def candidates_from_arrays(r_y: float, kp3d: np.ndarray, npx: np.ndarray) -> CandidateSet:
    """All n(n-1)/2 pair depths in canonical (i < j) lexicographic order.

    Degenerate pairs are kept (denom 0, z NaN, valid False) so indices stay
    aligned with the edge graphs; they are removed later by mask_and_select.
    """
    n = kp3d.shape[0]
    if n < 2:
        raise TooFewKeypoints(f"need at least 2 keypoints, got {n}")
    l, h = edge_terms_arrays(r_y, kp3d, npx)
    ii, jj = np.triu_indices(n, k=1)
    du = npx[ii, 0] - npx[jj, 0]
    dv = npx[ii, 1] - npx[jj, 1]
    axis_u = np.abs(du) >= np.abs(dv)
    denom = np.where(axis_u, np.abs(du), np.abs(dv))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(axis_u, (l[ii] - l[jj]) / du, (h[ii] - h[jj]) / dv)
    valid = (denom > 0.0) & np.isfinite(z)
    z = np.where(valid, z, np.nan)
    return CandidateSet(ii, jj, z, denom, axis_u, valid, np.arange(len(ii)))


def generate_candidates(instance, view: str = "observed") -> CandidateSet:
    """Pair depths for one object instance (its corrupted view by default)."""
    order = np.argsort(instance.kp_index, kind="stable")
    kp3d = instance.kp3d[order]
    uv = (instance.kp2d if view == "observed" else instance.kp2d_clean)[order]
    npx = normalize_points(instance.camera, uv)
    return candidates_from_arrays(instance.pose.r_y, kp3d, npx)


def mask_and_select(cands: CandidateSet, tau: float, k: int) -> CandidateSet:
    """Drop degenerate/small-denominator candidates, keep the k largest denominators.

    Ties break by canonical edge order; the survivors are returned in
    canonical edge order. Raises NoValidCandidates when nothing survives.
    """
    if tau < 0.0:
        raise ValueError("tau must be >= 0")
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = cands.valid & (cands.denom >= tau)
    if not keep.any():
        raise NoValidCandidates(f"all {len(cands)} candidates masked at tau={tau}")
    idx = np.flatnonzero(keep)
    # primary: denom descending; secondary: edge index ascending
    order = np.lexsort((cands.edge_index[idx], -cands.denom[idx]))
    chosen = idx[order[:k]]
    chosen.sort()
    return cands.take(chosen)
