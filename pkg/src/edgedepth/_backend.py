"""Backend selection for the Sinkhorn hot loop.

The compiled extension is used when importable; set EDGEDEPTH_BACKEND=pure
to force the numpy fallback (or =ext to require the extension). Both
backends execute the same iteration schedule and agree to roundoff; the
extension additionally falls back per call when its scaling-domain
arithmetic would leave the double range.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_pure

_FORCED = os.environ.get("EDGEDEPTH_BACKEND", "auto").lower()

if _FORCED == "pure":
    _ext = None
elif _FORCED in ("ext", "auto"):
    try:
        from . import _kernels as _ext
    except ImportError:
        if _FORCED == "ext":
            raise
        _ext = None
else:
    raise ValueError(f"EDGEDEPTH_BACKEND must be auto, ext or pure, got {_FORCED!r}")


def backend_name() -> str:
    return "ext" if _ext is not None else "pure"


def cn_bn_relu_forward(z, gamma, beta, run_mean, run_var, momentum, eps, train):
    if _ext is None:
        return _kernels_pure.cn_bn_relu_forward(
            z, gamma, beta, run_mean, run_var, momentum, eps, train)
    return _ext.cn_bn_relu_forward(
        np.ascontiguousarray(z), gamma, beta, run_mean, run_var,
        momentum, eps, train)


def cn_bn_relu_backward(dy, xc, inv_cn, mu_bn, inv_bn, gamma, beta, train):
    if _ext is None:
        return _kernels_pure.cn_bn_relu_backward(
            dy, xc, inv_cn, mu_bn, inv_bn, gamma, beta, train)
    return _ext.cn_bn_relu_backward(
        np.ascontiguousarray(dy), xc, inv_cn, mu_bn, inv_bn, gamma, beta, train)


def bce_identity_loss_grad(P, clamp, scale):
    dP = np.empty_like(P)
    if _ext is None:
        loss = _kernels_pure.bce_identity_loss_grad(P, clamp, scale, dP)
    else:
        loss = _ext.bce_identity_loss_grad(P, clamp, scale, dP)
    return loss, dP


def cost_assemble(na, nb, ab):
    (_kernels_pure if _ext is None else _ext).cost_assemble(na, nb, ab)
    return ab


def cost_vjp_scale(M, dM):
    S = np.empty_like(M)
    row_sum = np.empty(M.shape[:2])
    col_sum = np.empty(M.shape[:2])
    mod = _kernels_pure if _ext is None else _ext
    mod.cost_vjp_scale(M, np.ascontiguousarray(dM), S, row_sum, col_sum)
    return S, row_sum, col_sum


def l2_normalize_rows(x, eps):
    if _ext is None:
        return _kernels_pure.l2_normalize_rows(x, eps)
    flat = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    y, _ = _ext.l2_rows(flat, eps)
    return y.reshape(x.shape)


def l2_normalize_rows_backward(x, dy, eps):
    if _ext is None:
        return _kernels_pure.l2_normalize_rows_backward(x, dy, eps)
    flat_x = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    flat_dy = np.ascontiguousarray(dy.reshape(-1, dy.shape[-1]))
    return _ext.l2_rows_backward(flat_x, flat_dy, eps).reshape(x.shape)


def sinkhorn_forward(M: np.ndarray, alpha: float, max_iters: int, tol: float,
                     keep_history: bool = True):
    """Dispatching wrapper around the backend forward kernels.

    Returns (P, phi_hist, psi_hist, n_iters, err) as documented in
    `_kernels_pure.sinkhorn_forward`. With keep_history=False the history
    stacks hold only the final potentials (enough for the plan, not for a
    backward pass), which keeps memory flat across very long runs.
    """
    if _ext is None:
        return _kernels_pure.sinkhorn_forward(M, alpha, max_iters, tol,
                                              keep_history)
    M = np.ascontiguousarray(M, dtype=np.float64)
    B, m, _ = M.shape
    K = np.exp(-M / alpha)
    slots = max_iters + 1 if keep_history else 1
    phi_hist = np.empty((slots, B, m))
    psi_hist = np.empty((slots, B, m))
    err = np.empty(B)
    n_iters, ok = _ext.sinkhorn_forward_ext(K, max_iters, tol, phi_hist,
                                            psi_hist, err, keep_history)
    if not ok:
        return _kernels_pure.sinkhorn_forward(M, alpha, max_iters, tol,
                                              keep_history)
    if keep_history:
        phi_hist = phi_hist[: n_iters + 1].copy()
        psi_hist = psi_hist[: n_iters + 1].copy()
    P = K * np.exp(phi_hist[-1])[:, :, None] * np.exp(psi_hist[-1])[:, None, :]
    return P, phi_hist, psi_hist, n_iters, err


def sinkhorn_backward(M, alpha, phi_hist, psi_hist, dP):
    """Dispatching wrapper around the backend backward kernels."""
    if _ext is None:
        return _kernels_pure.sinkhorn_backward(M, alpha, phi_hist, psi_hist, dP)
    M = np.ascontiguousarray(M, dtype=np.float64)
    K = np.exp(-M / alpha)
    u_hist = np.exp(phi_hist)
    v_hist = np.exp(psi_hist)
    if not (np.isfinite(u_hist).all() and np.isfinite(v_hist).all()):
        return _kernels_pure.sinkhorn_backward(M, alpha, phi_hist, psi_hist, dP)
    dC = np.empty_like(M)
    _ext.sinkhorn_backward_ext(
        K,
        np.ascontiguousarray(u_hist),
        np.ascontiguousarray(v_hist),
        np.ascontiguousarray(dP, dtype=np.float64),
        dC,
    )
    return -dC / alpha
