# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel bindings.

The numeric loops live in _kernels_impl.h as restrict-qualified C so the
compiler can vectorize them; this module only validates shapes, allocates
outputs and scratch, and dispatches. Semantics mirror `_kernels_pure`:

- Sinkhorn evaluates the log-domain updates through their scaling form
  (phi = -log(K @ exp(psi)) with K = exp(-M / alpha)), which is only valid
  while the scaling factors stay inside the double range; the forward
  reports failure when they leave (1e-290, 1e290) and the caller falls
  back to the pure log-domain path.
- Normalization variances use one-pass moments, so values can differ from
  the two-pass reference at roundoff level.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef extern from "_kernels_impl.h":
    long edk_sinkhorn_forward(const double* K, long B, long m, long max_iters,
                              double tol, int store_hist, double* phi_hist,
                              double* psi_hist, double* err, double* u,
                              double* v, double* acc) nogil
    void edk_sinkhorn_backward(const double* K, const double* u_hist,
                               const double* v_hist, const double* dP,
                               double* dC, long T, long B, long m,
                               double* dphi, double* dpsi) nogil
    void edk_cn_bn_relu_forward(const double* z, const double* gamma,
                                const double* beta, double* run_mean,
                                double* run_var, double momentum, double eps,
                                int train, long B, long m, long d, double* y,
                                double* xc, double* inv_cn, double* mu_bn,
                                double* inv_bn, double* mu_loc, double* s_acc,
                                double* q_acc) nogil
    void edk_cn_bn_relu_backward(const double* dy, const double* xc,
                                 const double* inv_cn, const double* mu_bn,
                                 const double* inv_bn, const double* gamma,
                                 const double* beta, int train, long B,
                                 long m, long d, double* dz, double* dgamma,
                                 double* dbeta, double* s1, double* s2,
                                 double* t1, double* t2) nogil
    double edk_bce_identity(const double* P, double clamp, double scale,
                            double* dP, long B, long m) nogil
    void edk_cost_assemble(const double* na, const double* nb, double* ab,
                           long B, long m) nogil
    void edk_cost_vjp_scale(const double* M, const double* dM, double* S,
                            double* row_sum, double* col_sum, long B,
                            long m) nogil
    void edk_l2_rows(const double* x, double* y, double* norms, double eps,
                     long rows, long d) nogil
    void edk_l2_rows_backward(const double* x, const double* dy, double* dx,
                              double eps, long rows, long d) nogil


def sinkhorn_forward_ext(double[:, :, ::1] K, long max_iters, double tol,
                         double[:, :, ::1] phi_hist, double[:, :, ::1] psi_hist,
                         double[::1] err, bint store_hist=True):
    """Batched iteration on kernel matrices K. With store_hist the history
    arrays must be (max_iters + 1, B, m); otherwise (1, B, m) slots receive
    the final potentials only. Returns (n_iters, ok)."""
    cdef long B = K.shape[0]
    cdef long m = K.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] u = np.empty((B, m))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] v = np.empty((B, m))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] acc = np.empty(m)
    cdef long n_iters
    with nogil:
        n_iters = edk_sinkhorn_forward(
            &K[0, 0, 0], B, m, max_iters, tol, store_hist, &phi_hist[0, 0, 0],
            &psi_hist[0, 0, 0], &err[0],
            <double*> u.data, <double*> v.data, <double*> acc.data)
    if n_iters < 0:
        return 0, False
    return n_iters, True


def sinkhorn_backward_ext(double[:, :, ::1] K, double[:, :, ::1] u_hist,
                          double[:, :, ::1] v_hist, double[:, :, ::1] dP,
                          double[:, :, ::1] dC):
    """Accumulate the vector-Jacobian product into dC (preallocated)."""
    cdef long T = u_hist.shape[0] - 1
    cdef long B = K.shape[0]
    cdef long m = K.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dphi = np.empty(m)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dpsi = np.empty(m)
    with nogil:
        edk_sinkhorn_backward(&K[0, 0, 0], &u_hist[0, 0, 0], &v_hist[0, 0, 0],
                              &dP[0, 0, 0], &dC[0, 0, 0], T, B, m,
                              <double*> dphi.data, <double*> dpsi.data)
    return None


def cn_bn_relu_forward(double[:, :, ::1] z, double[::1] gamma,
                       double[::1] beta, double[::1] run_mean,
                       double[::1] run_var, double momentum, double eps,
                       bint train):
    """Fused context norm -> batch norm -> ReLU over (B, m, d) activations.

    Returns (y, xc, inv_cn, mu_bn, inv_bn); updates the running statistics
    in place when train is set.
    """
    cdef long B = z.shape[0]
    cdef long m = z.shape[1]
    cdef long d = z.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] y = np.empty((B, m, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=3] xc = np.empty((B, m, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] inv_cn = np.empty((B, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] mu_bn = np.empty(d)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] inv_bn = np.empty(d)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] scratch = np.empty((3, d))
    with nogil:
        edk_cn_bn_relu_forward(
            &z[0, 0, 0], &gamma[0], &beta[0], &run_mean[0], &run_var[0],
            momentum, eps, train, B, m, d, <double*> y.data,
            <double*> xc.data, <double*> inv_cn.data, <double*> mu_bn.data,
            <double*> inv_bn.data, <double*> scratch.data,
            (<double*> scratch.data) + d, (<double*> scratch.data) + 2 * d)
    return y, xc, inv_cn, mu_bn, inv_bn


def cn_bn_relu_backward(double[:, :, ::1] dy, double[:, :, ::1] xc,
                        double[:, ::1] inv_cn, double[::1] mu_bn,
                        double[::1] inv_bn, double[::1] gamma,
                        double[::1] beta, bint train):
    """Backward of `cn_bn_relu_forward`; returns (dz, dgamma, dbeta)."""
    cdef long B = dy.shape[0]
    cdef long m = dy.shape[1]
    cdef long d = dy.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] dz = np.empty((B, m, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dgamma = np.empty(d)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dbeta = np.empty(d)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] scratch = np.empty((4, d))
    cdef double* sc = <double*> scratch.data
    with nogil:
        edk_cn_bn_relu_backward(
            &dy[0, 0, 0], &xc[0, 0, 0], &inv_cn[0, 0], &mu_bn[0], &inv_bn[0],
            &gamma[0], &beta[0], train, B, m, d, <double*> dz.data,
            <double*> dgamma.data, <double*> dbeta.data,
            sc, sc + d, sc + 2 * d, sc + 3 * d)
    return dz, dgamma, dbeta


def bce_identity_loss_grad(double[:, :, ::1] P, double clamp, double scale,
                           double[:, :, ::1] dP):
    """Summed BCE of the plan against the identity; writes scale * grad
    into dP (zero where the clamp binds) and returns the total loss."""
    cdef double loss
    with nogil:
        loss = edk_bce_identity(&P[0, 0, 0], clamp, scale, &dP[0, 0, 0],
                                P.shape[0], P.shape[1])
    return loss


def cost_assemble(double[:, ::1] na, double[:, ::1] nb,
                  double[:, :, ::1] ab):
    """In place: ab[b, s, t] <- sqrt(max(na[b, s] + nb[b, t] - 2 ab, 0))."""
    with nogil:
        edk_cost_assemble(&na[0, 0], &nb[0, 0], &ab[0, 0, 0],
                          ab.shape[0], ab.shape[1])
    return None


def cost_vjp_scale(double[:, :, ::1] M, double[:, :, ::1] dM,
                   double[:, :, ::1] S, double[:, ::1] row_sum,
                   double[:, ::1] col_sum):
    """S = dM / M (zero where M is zero) plus its row and column sums."""
    with nogil:
        edk_cost_vjp_scale(&M[0, 0, 0], &dM[0, 0, 0], &S[0, 0, 0],
                           &row_sum[0, 0], &col_sum[0, 0],
                           M.shape[0], M.shape[1])
    return None


def l2_rows(double[:, ::1] x, double eps):
    """Unit-normalize rows (flattened leading axes); returns (y, norms)."""
    cdef long rows = x.shape[0]
    cdef long d = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] y = np.empty((rows, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] norms = np.empty(rows)
    with nogil:
        edk_l2_rows(&x[0, 0], <double*> y.data, <double*> norms.data,
                    eps, rows, d)
    return y, norms


def l2_rows_backward(double[:, ::1] x, double[:, ::1] dy, double eps):
    cdef long rows = x.shape[0]
    cdef long d = x.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] dx = np.empty((rows, d))
    with nogil:
        edk_l2_rows_backward(&x[0, 0], &dy[0, 0], <double*> dx.data,
                             eps, rows, d)
    return dx
