"""Pure numpy reference kernels for the Sinkhorn hot loop.

Layout shared with the compiled backend in `_kernels.pyx`:

- forward runs batched log-domain iterations on cost tensors (B, m, m) with
  uniform unit marginals, alternating row and column normalizations starting
  and ending on a row step, and stores every dual iterate so the backward
  pass can differentiate exactly through the executed updates;
- `phi_hist[k]` holds the row potential produced by row step k+1,
  `psi_hist[k]` the column potential after column step k (`psi_hist[0]` is
  the zero initialization);
- the reported marginal error is the worst row-sum deviation before the
  final row step, which bounds the column-sum deviation of the returned plan.

Potentials are scaled by 1/alpha (phi = f/alpha) so the plan is
P = exp(C + phi[:, None] + psi[None, :]) with C = -M/alpha.
"""

from __future__ import annotations

import numpy as np


def _lse_rows(C, psi):
    """logsumexp over the last axis of C + psi[:, None, :]."""
    X = C + psi[:, None, :]
    xm = X.max(axis=2, keepdims=True)
    return np.log(np.exp(X - xm).sum(axis=2)) + xm[:, :, 0]


def _lse_cols(C, phi):
    """logsumexp over the row axis of C + phi[:, :, None]."""
    X = C + phi[:, :, None]
    xm = X.max(axis=1, keepdims=True)
    return np.log(np.exp(X - xm).sum(axis=1)) + xm[:, 0, :]


def sinkhorn_forward(M: np.ndarray, alpha: float, max_iters: int, tol: float,
                     keep_history: bool = True):
    """Batched log-domain Sinkhorn with unit marginals.

    Returns (P, phi_hist, psi_hist, n_iters, err) where n_iters is the
    number of executed column steps (full iterations) and err the
    per-instance row-sum deviation at the stopping iterate. Iteration stops
    when every instance in the batch is below tol. keep_history=False
    retains only the final potentials (no backward pass possible).
    """
    M = np.ascontiguousarray(M, dtype=np.float64)
    B, m, m2 = M.shape
    C = -M / alpha
    phi = -_lse_rows(C, np.zeros((B, m)))
    psi = np.zeros((B, m))
    phi_hist = [phi]
    psi_hist = [psi]
    err = np.full(B, np.inf)
    n_iters = 0
    for t in range(1, max_iters + 1):
        psi = -_lse_cols(C, phi)
        phi_next = -_lse_rows(C, psi)
        err = np.abs(np.exp(phi - phi_next) - 1.0).max(axis=1)
        phi = phi_next
        if keep_history:
            psi_hist.append(psi)
            phi_hist.append(phi_next)
        n_iters = t
        if (err < tol).all():
            break
    if not keep_history:
        phi_hist = [phi]
        psi_hist = [psi]
    phi_stack = np.stack(phi_hist, axis=0)
    psi_stack = np.stack(psi_hist, axis=0)
    P = np.exp(C + phi_stack[-1][:, :, None] + psi_stack[-1][:, None, :])
    return P, phi_stack, psi_stack, n_iters, err


def sinkhorn_backward(M, alpha, phi_hist, psi_hist, dP):
    """Exact vector-Jacobian product through the executed iterations.

    `phi_hist`/`psi_hist` are the stacks returned by `sinkhorn_forward`.
    Returns dM with the same shape as M.
    """
    M = np.ascontiguousarray(M, dtype=np.float64)
    C = -M / alpha
    T = phi_hist.shape[0] - 1  # executed column steps

    P = np.exp(C + phi_hist[-1][:, :, None] + psi_hist[-1][:, None, :])
    dlogP = dP * P
    dC = dlogP.copy()
    dphi = dlogP.sum(axis=2)
    dpsi = dlogP.sum(axis=1)

    # final row step: phi_{T+1} from psi_T
    R = np.exp(C + phi_hist[T][:, :, None] + psi_hist[T][:, None, :])
    G = dphi[:, :, None] * R
    dC -= G
    dpsi -= G.sum(axis=1)

    for k in range(T, 0, -1):
        # column step k: psi_k from phi_k
        Q = np.exp(C + phi_hist[k - 1][:, :, None] + psi_hist[k][:, None, :])
        G = dpsi[:, None, :] * Q
        dC -= G
        dphi = -G.sum(axis=2)
        # row step k: phi_k from psi_{k-1}
        R = np.exp(C + phi_hist[k - 1][:, :, None] + psi_hist[k - 1][:, None, :])
        G = dphi[:, :, None] * R
        dC -= G
        dpsi = -G.sum(axis=1)

    return -dC / alpha


def cn_bn_relu_forward(z, gamma, beta, run_mean, run_var, momentum, eps, train):
    """Context norm -> batch norm -> ReLU; reference for the fused kernel.

    Returns (y, xc, inv_cn, mu_bn, inv_bn) and updates the running stats in
    place when train is set.
    """
    mu_cn = z.mean(axis=1, keepdims=True)
    inv_cn = 1.0 / np.sqrt(z.var(axis=1, keepdims=True) + eps)
    xc = (z - mu_cn) * inv_cn
    if train:
        mu_bn = xc.mean(axis=(0, 1))
        var_bn = xc.var(axis=(0, 1))
        run_mean *= momentum
        run_mean += (1.0 - momentum) * mu_bn
        run_var *= momentum
        run_var += (1.0 - momentum) * var_bn
    else:
        mu_bn = run_mean.copy()
        var_bn = run_var
    inv_bn = 1.0 / np.sqrt(var_bn + eps)
    pre = gamma * ((xc - mu_bn) * inv_bn) + beta
    return np.maximum(pre, 0.0), xc, inv_cn[:, 0, :], mu_bn, inv_bn


def cn_bn_relu_backward(dy, xc, inv_cn, mu_bn, inv_bn, gamma, beta, train):
    """Backward of `cn_bn_relu_forward`; returns (dz, dgamma, dbeta)."""
    xb = (xc - mu_bn) * inv_bn
    pre = gamma * xb + beta
    dpre = np.where(pre > 0.0, dy, 0.0)
    dgamma = (dpre * xb).sum(axis=(0, 1))
    dbeta = dpre.sum(axis=(0, 1))
    dxb = dpre * gamma
    if train:
        n = dy.shape[0] * dy.shape[1]
        s1 = dxb.sum(axis=(0, 1))
        s2 = (dxb * xb).sum(axis=(0, 1))
        dxc = inv_bn / n * (n * dxb - s1 - xb * s2)
    else:
        dxc = dxb * inv_bn
    m = dy.shape[1]
    t1 = dxc.sum(axis=1, keepdims=True)
    t2 = (dxc * xc).sum(axis=1, keepdims=True)
    dz = inv_cn[:, None, :] / m * (m * dxc - t1 - xc * t2)
    return dz, dgamma, dbeta


def bce_identity_loss_grad(P, clamp, scale, dP):
    """Summed BCE of the plan against identity, writing scale * grad into dP."""
    B, m, _ = P.shape
    eye = np.eye(m)[None]
    Pc = np.clip(P, clamp, 1.0 - clamp)
    loss = float(-(eye * np.log(Pc) + (1.0 - eye) * np.log1p(-Pc)).sum())
    in_range = (P > clamp) & (P < 1.0 - clamp)
    np.copyto(dP, np.where(in_range, scale * (Pc - eye) / (Pc * (1.0 - Pc)), 0.0))
    return loss


def cost_assemble(na, nb, ab):
    """In-place distance assembly from squared norms and inner products."""
    sq = na[:, :, None] + nb[:, None, :] - 2.0 * ab
    np.maximum(sq, 0.0, out=sq)
    np.sqrt(sq, out=sq)
    np.copyto(ab, sq)


def cost_vjp_scale(M, dM, S, row_sum, col_sum):
    """S = dM / M (zero where M is zero) plus its row and column sums."""
    np.copyto(S, np.where(M > 0.0, dM / np.maximum(M, 1e-300), 0.0))
    np.copyto(row_sum, S.sum(axis=2))
    np.copyto(col_sum, S.sum(axis=1))


def l2_normalize_rows(x, eps):
    """Unit-normalize trailing-axis rows; tiny rows divide by eps instead."""
    norms = np.sqrt(np.einsum("...d,...d->...", x, x))[..., None]
    return x / np.maximum(norms, eps)


def l2_normalize_rows_backward(x, dy, eps):
    norms = np.sqrt(np.einsum("...d,...d->...", x, x))[..., None]
    d = np.maximum(norms, eps)
    y = x / d
    proj = np.einsum("...d,...d->...", y, dy)[..., None]
    return np.where(norms > eps, (dy - y * proj) / d, dy / d)
