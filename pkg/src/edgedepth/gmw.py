"""Graph construction, edge encoding, entropic assignment and candidate weights.

Keypoints become the vertices of two complete graphs (2D pixels, 3D
object-frame points) whose edges are enumerated in identical canonical
(i < j) order, so edge index s names the same semantic pair in both. Edge
features pass through the encoders of `tinynn`, are row-normalized, and
give an m x m cost matrix of Euclidean distances. A Sinkhorn layer turns
the costs into a doubly stochastic assignment for supervision, while the
candidate weights come from the softmax of the inverse diagonal costs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _backend
from ._backend import sinkhorn_backward, sinkhorn_forward
from .errors import ShapeMismatch, TooFewKeypoints
from .geometry import normalize_points
from .tinynn import (
    EdgeEncoder,
    EncoderConfig,
    ParamStore,
    l2_normalize_rows,
    l2_normalize_rows_backward,
)

BCE_CLAMP = 1e-12


@dataclass(frozen=True)
class EdgeGraph:
    """Complete graph over keypoints with concatenated endpoint features."""

    points: np.ndarray    # (n, d_pt)
    edges: np.ndarray     # (m, 2) canonical i < j pairs
    features: np.ndarray  # (m, 2 * d_pt)


def _edge_features(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = points.shape[0]
    if n < 2:
        raise TooFewKeypoints(f"need at least 2 keypoints, got {n}")
    ii, jj = np.triu_indices(n, k=1)
    edges = np.stack([ii, jj], axis=1)
    feats = np.concatenate([points[ii], points[jj]], axis=1)
    return edges, feats


def build_graphs(instance) -> tuple[EdgeGraph, EdgeGraph]:
    """2D and 3D keypoint graphs with aligned canonical edge order."""
    order = np.argsort(instance.kp_index, kind="stable")
    p2d = np.asarray(instance.kp2d, dtype=np.float64)[order]
    p3d = np.asarray(instance.kp3d, dtype=np.float64)[order]
    e2, f2 = _edge_features(p2d)
    e3, f3 = _edge_features(p3d)
    return EdgeGraph(p2d, e2, f2), EdgeGraph(p3d, e3, f3)


def cost_matrix(f2d: np.ndarray, f3d: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances between 2D edge features (rows) and 3D
    edge features (columns)."""
    f2d = np.asarray(f2d, dtype=np.float64)
    f3d = np.asarray(f3d, dtype=np.float64)
    if f2d.ndim != 2 or f2d.shape != f3d.shape:
        raise ShapeMismatch(f"features {f2d.shape} vs {f3d.shape}")
    return _cost_batch(f2d[None], f3d[None])[0]


def _cost_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.ascontiguousarray(np.einsum("bmd,bmd->bm", a, a))
    nb = np.ascontiguousarray(np.einsum("bmd,bmd->bm", b, b))
    ab = np.ascontiguousarray(a @ b.transpose(0, 2, 1))
    return _backend.cost_assemble(na, nb, ab)


def _cost_batch_vjp(a, b, M, dM):
    S, row_sum, col_sum = _backend.cost_vjp_scale(M, dM)
    dA = a * row_sum[:, :, None] - S @ b
    dB = b * col_sum[:, :, None] - S.transpose(0, 2, 1) @ a
    return dA, dB


@dataclass(frozen=True)
class SinkhornConfig:
    """Entropic regularization weight, iteration cap, marginal tolerance.

    tol = 0 disables early stopping (always max_iters iterations), which
    gives a fixed computation graph for gradient checking.
    """

    alpha: float = 0.1
    max_iters: int = 200
    tol: float = 1e-9

    def __post_init__(self):
        if not self.alpha > 0.0:
            raise ValueError("alpha must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0.0:
            raise ValueError("tol must be >= 0")


@dataclass
class SinkhornResult:
    """Assignment plan plus convergence diagnostics (a failure to reach tol
    is reported through `converged`, not an exception)."""

    P: np.ndarray
    converged: bool
    n_iters: int
    marginal_err: float


class SinkhornTrace:
    """Batched solve that retains the dual iterates for exact backward."""

    def __init__(self, M: np.ndarray, cfg: SinkhornConfig):
        M = np.ascontiguousarray(M, dtype=np.float64)
        if M.ndim != 3 or M.shape[1] != M.shape[2]:
            raise ShapeMismatch(f"cost tensor {M.shape}")
        if not np.isfinite(M).all():
            raise ValueError("cost matrix must be finite")
        self.M = M
        self.cfg = cfg
        P, phi, psi, n_iters, err = sinkhorn_forward(
            M, cfg.alpha, cfg.max_iters, cfg.tol
        )
        self.P = P
        self._phi = phi
        self._psi = psi
        self.n_iters = n_iters
        self.err = err

    @property
    def converged(self) -> np.ndarray:
        return self.err < self.cfg.tol

    def vjp(self, dP: np.ndarray) -> np.ndarray:
        if dP.shape != self.P.shape:
            raise ShapeMismatch(f"dP {dP.shape} vs P {self.P.shape}")
        return sinkhorn_backward(self.M, self.cfg.alpha, self._phi, self._psi, dP)


def sinkhorn(M: np.ndarray, cfg: SinkhornConfig | None = None) -> SinkhornResult:
    """Entropic assignment of a single cost matrix with unit marginals.

    Minimizes sum(M * P + alpha * P * (log P - 1)) over doubly stochastic P
    by alternating log-domain marginal normalizations. Memory use is flat in
    the iteration count; use SinkhornTrace when gradients are needed.
    """
    cfg = cfg or SinkhornConfig()
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeMismatch(f"cost matrix {M.shape}")
    if not np.isfinite(M).all():
        raise ValueError("cost matrix must be finite")
    P, _, _, n_iters, err = sinkhorn_forward(
        M[None], cfg.alpha, cfg.max_iters, cfg.tol, keep_history=False)
    err0 = float(err[0])
    return SinkhornResult(P[0], err0 < cfg.tol, n_iters, err0)


def entropic_objective(M: np.ndarray, P: np.ndarray, alpha: float) -> float:
    """sum(M * P + alpha * P * (log P - 1)), the quantity Sinkhorn optimizes."""
    logP = np.log(np.maximum(P, 1e-300))
    return float((M * P + alpha * P * (logP - 1.0)).sum())


def sinkhorn_dual_objective(M, phi, psi, alpha) -> float:
    """Lagrangian dual value at scaled potentials (phi, psi); each half step
    of the iteration maximizes one block, so this is non-decreasing."""
    P = np.exp(-M / alpha + phi[:, None] + psi[None, :])
    return float(alpha * (phi.sum() + psi.sum() - P.sum()))


def weights_from_cost(M: np.ndarray, eps: float = 1e-6,
                      temperature: float = 1.0) -> np.ndarray:
    """Candidate weights: softmax over s of (1 / (M[s, s] + eps)) / temperature."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeMismatch(f"cost matrix {M.shape}")
    return softmax_inv_diag(np.diagonal(M).copy(), eps, temperature)


def softmax_inv_diag(diag: np.ndarray, eps: float, temperature: float) -> np.ndarray:
    q = (1.0 / (diag + eps)) / temperature
    q -= q.max()
    e = np.exp(q)
    return e / e.sum()


def softmax_inv_diag_vjp(diag, w, dw, eps, temperature):
    """Backward of softmax_inv_diag given its output w."""
    dq = w * (dw - float(w @ dw))
    return -dq / (temperature * (diag + eps) ** 2)


def matching_losses(P: np.ndarray, P_star: np.ndarray, z_fused: float,
                    z_star: float, beta: float):
    """(classification, regression, combined) supervision terms.

    Classification is element-wise binary cross entropy of the plan against
    the target plan summed over all entries (with probabilities clamped to
    [1e-12, 1 - 1e-12] before the logs); regression is |z_fused - z_star|.
    """
    P = np.asarray(P, dtype=np.float64)
    P_star = np.asarray(P_star, dtype=np.float64)
    if P.shape != P_star.shape or P.ndim != 2:
        raise ShapeMismatch(f"P {P.shape} vs P* {P_star.shape}")
    L_c = _bce_sum(P, P_star)
    L_r = abs(float(z_fused) - float(z_star))
    return L_c, L_r, L_c + beta * L_r


def _bce_sum(P, P_star):
    Pc = np.clip(P, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(-(P_star * np.log(Pc) + (1.0 - P_star) * np.log1p(-Pc)).sum())


@dataclass(frozen=True)
class GMWConfig:
    """Encoder sizes plus the weight-rule constants."""

    layers: int = 6
    hidden: int = 128
    feature_dim: int = 128
    momentum: float = 0.9
    eps: float = 1e-8
    weight_eps: float = 1e-6
    temperature: float = 1.0

    def encoder_config(self, in_dim: int) -> EncoderConfig:
        return EncoderConfig(self.layers, self.hidden, in_dim, self.feature_dim,
                             self.momentum, self.eps)


@dataclass
class Features:
    raw2: np.ndarray
    raw3: np.ndarray
    f2n: np.ndarray
    f3n: np.ndarray
    caches2: list = field(repr=False, default_factory=list)
    caches3: list = field(repr=False, default_factory=list)


class MatchingWeighter:
    """Two edge encoders and the matching head, with exact gradients."""

    def __init__(self, cfg: GMWConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore()
        ss = np.random.SeedSequence(seed)
        rng2, rng3 = (np.random.default_rng(c) for c in ss.spawn(2))
        self.enc2d = EdgeEncoder(cfg.encoder_config(4), self.store, "enc2d", rng2)
        self.enc3d = EdgeEncoder(cfg.encoder_config(6), self.store, "enc3d", rng3)

    def features(self, x2d: np.ndarray, x3d: np.ndarray, mode: str) -> Features:
        raw2, caches2 = self.enc2d.forward(x2d, mode)
        raw3, caches3 = self.enc3d.forward(x3d, mode)
        return Features(raw2, raw3, l2_normalize_rows(raw2),
                        l2_normalize_rows(raw3), caches2, caches3)

    def backward_features(self, feats: Features, df2n, df3n) -> dict:
        draw2 = l2_normalize_rows_backward(feats.raw2, df2n)
        draw3 = l2_normalize_rows_backward(feats.raw3, df3n)
        _, g2 = self.enc2d.backward(feats.caches2, draw2)
        _, g3 = self.enc3d.backward(feats.caches3, draw3)
        g2.update(g3)
        return g2

    def diag_costs(self, feats: Features) -> np.ndarray:
        """Per-edge matching cost ||f2n_s - f3n_s||, shape (B, m)."""
        d = feats.f2n - feats.f3n
        return np.sqrt((d * d).sum(axis=2))

    def edge_weights(self, x2d: np.ndarray, x3d: np.ndarray,
                     sel_idx: list[np.ndarray], mode: str = "eval"):
        """Eval-path weights per instance over the selected candidate edges."""
        feats = self.features(x2d, x3d, mode)
        diag = self.diag_costs(feats)
        return [
            softmax_inv_diag(diag[b, idx], self.cfg.weight_eps, self.cfg.temperature)
            for b, idx in enumerate(sel_idx)
        ]


def batch_loss_and_grads(model: MatchingWeighter, x2d, x3d, z_star, sel_idx,
                         z_sel, sinkhorn_cfg: SinkhornConfig, beta: float,
                         include_reg: bool, mode: str = "train"):
    """Losses and parameter gradients for one batch.

    x2d (B, m, 4) and x3d (B, m, 6) are raw edge features; sel_idx[b] and
    z_sel[b] hold each instance's selected candidate edge indices and their
    depths. Losses are means over the batch; the classification term keeps
    its sum over all m^2 plan entries per instance.
    """
    B, m = x2d.shape[0], x2d.shape[1]
    feats = model.features(x2d, x3d, mode)
    M = _cost_batch(feats.f2n, feats.f3n)
    trace = SinkhornTrace(M, sinkhorn_cfg)
    loss_sum, dP = _backend.bce_identity_loss_grad(trace.P, BCE_CLAMP, 1.0 / B)
    L_c = loss_sum / B
    dM = trace.vjp(dP)

    L_r = 0.0
    z_fused = np.full(B, np.nan)
    if include_reg:
        diag = np.diagonal(M, axis1=1, axis2=2)
        for b in range(B):
            idx = sel_idx[b]
            d = diag[b, idx]
            w = softmax_inv_diag(d, model.cfg.weight_eps, model.cfg.temperature)
            zf = float(w @ z_sel[b])
            z_fused[b] = zf
            r = zf - float(z_star[b])
            L_r += abs(r)
            dw = (np.sign(r) * beta / B) * z_sel[b]
            dd = softmax_inv_diag_vjp(d, w, dw, model.cfg.weight_eps,
                                      model.cfg.temperature)
            dM[b, idx, idx] += dd
        L_r /= B

    df2n, df3n = _cost_batch_vjp(feats.f2n, feats.f3n, M, dM)
    grads = model.backward_features(feats, df2n, df3n)
    losses = {
        "cls": L_c,
        "reg": L_r,
        "total": L_c + beta * L_r if include_reg else L_c,
    }
    return losses, grads, z_fused
