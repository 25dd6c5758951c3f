/* Hot numeric loops shared by the Cython bindings in _kernels.pyx.
 *
 * Everything operates on C-contiguous float64 buffers. The restrict
 * qualifiers are what lets the compiler vectorize the feature-axis loops;
 * callers must never pass overlapping arrays.
 */

#ifndef EDGEDEPTH_KERNELS_IMPL_H
#define EDGEDEPTH_KERNELS_IMPL_H

#include <math.h>
#include <stdlib.h>

#define EDK_SCALE_MAX 1e290
#define EDK_SCALE_MIN 1e-290

/* one Sinkhorn batch in scaling form; returns executed column steps or -1
 * when a scaling factor leaves the safe range */
static long edk_sinkhorn_forward(const double *restrict K, long B, long m,
                                 long max_iters, double tol, int store_hist,
                                 double *restrict phi_hist,
                                 double *restrict psi_hist,
                                 double *restrict err,
                                 double *restrict u, double *restrict v,
                                 double *restrict acc) {
    long b, s, t, it, n_iters = 0;
    int all_done;
    double tot, dev, e;
    const long mm = m * m;
    const long hist = B * m;

    for (b = 0; b < B; b++) {
        const double *Kb = K + b * mm;
        double *ub = u + b * m;
        double *vb = v + b * m;
        for (t = 0; t < m; t++) vb[t] = 1.0;
        for (s = 0; s < m; s++) {
            tot = 0.0;
            for (t = 0; t < m; t++) tot += Kb[s * m + t];
            if (!(EDK_SCALE_MIN < tot && tot < EDK_SCALE_MAX)) return -1;
            ub[s] = 1.0 / tot;
            phi_hist[b * m + s] = -log(tot);
            psi_hist[b * m + s] = 0.0;
        }
        err[b] = INFINITY;
    }
    for (it = 1; it <= max_iters; it++) {
        all_done = 1;
        for (b = 0; b < B; b++) {
            const double *Kb = K + b * mm;
            double *ub = u + b * m;
            double *vb = v + b * m;
            double *phi_it = phi_hist + (store_hist ? it * hist : 0) + b * m;
            double *psi_it = psi_hist + (store_hist ? it * hist : 0) + b * m;
            for (t = 0; t < m; t++) acc[t] = 0.0;
            for (s = 0; s < m; s++) {
                const double us = ub[s];
                const double *row = Kb + s * m;
                for (t = 0; t < m; t++) acc[t] += row[t] * us;
            }
            for (t = 0; t < m; t++) {
                if (!(EDK_SCALE_MIN < acc[t] && acc[t] < EDK_SCALE_MAX))
                    return -1;
                vb[t] = 1.0 / acc[t];
                psi_it[t] = -log(acc[t]);
            }
            e = 0.0;
            for (s = 0; s < m; s++) {
                const double *row = Kb + s * m;
                tot = 0.0;
                for (t = 0; t < m; t++) tot += row[t] * vb[t];
                if (!(EDK_SCALE_MIN < tot && tot < EDK_SCALE_MAX)) return -1;
                dev = fabs(ub[s] * tot - 1.0);
                if (dev > e) e = dev;
                ub[s] = 1.0 / tot;
                phi_it[s] = -log(tot);
            }
            err[b] = e;
            if (e >= tol) all_done = 0;
        }
        n_iters = it;
        if (all_done) break;
    }
    return n_iters;
}

/* exact vector-Jacobian product through the stored iterates; u_hist/v_hist
 * are exp() of the dual history, laid out (T+1, B, m) */
static void edk_sinkhorn_backward(const double *restrict K,
                                  const double *restrict u_hist,
                                  const double *restrict v_hist,
                                  const double *restrict dP,
                                  double *restrict dC, long T, long B, long m,
                                  double *restrict dphi,
                                  double *restrict dpsi) {
    long b, s, t, k;
    const long mm = m * m;
    const long hist = B * m;

    for (b = 0; b < B; b++) {
        const double *Kb = K + b * mm;
        const double *dPb = dP + b * mm;
        double *dCb = dC + b * mm;
        const double *uT = u_hist + T * hist + b * m;
        const double *vT = v_hist + T * hist + b * m;

        for (t = 0; t < m; t++) dpsi[t] = 0.0;
        for (s = 0; s < m; s++) {
            const double us = uT[s];
            const double *Krow = Kb + s * m;
            const double *dProw = dPb + s * m;
            double *dCrow = dCb + s * m;
            double rowacc = 0.0;
            for (t = 0; t < m; t++) {
                double g = dProw[t] * Krow[t] * us * vT[t];
                dCrow[t] = g;
                rowacc += g;
                dpsi[t] += g;
            }
            dphi[s] = rowacc;
        }
        /* final row step shares the last potentials, so R equals the plan */
        for (s = 0; s < m; s++) {
            const double gs = dphi[s] * uT[s];
            const double *Krow = Kb + s * m;
            double *dCrow = dCb + s * m;
            for (t = 0; t < m; t++) {
                double g = gs * Krow[t] * vT[t];
                dCrow[t] -= g;
                dpsi[t] -= g;
            }
        }
        for (k = T; k >= 1; k--) {
            const double *uk = u_hist + (k - 1) * hist + b * m;
            const double *vk = v_hist + k * hist + b * m;
            const double *vprev = v_hist + (k - 1) * hist + b * m;
            /* column step k: Q = K u_k v_k */
            for (s = 0; s < m; s++) {
                const double us = uk[s];
                const double *Krow = Kb + s * m;
                double *dCrow = dCb + s * m;
                double rowacc = 0.0;
                for (t = 0; t < m; t++) {
                    double g = dpsi[t] * Krow[t] * us * vk[t];
                    dCrow[t] -= g;
                    rowacc += g;
                }
                dphi[s] = -rowacc;
            }
            /* row step k: R = K u_k v_{k-1} */
            for (t = 0; t < m; t++) dpsi[t] = 0.0;
            for (s = 0; s < m; s++) {
                const double gs = dphi[s] * uk[s];
                const double *Krow = Kb + s * m;
                double *dCrow = dCb + s * m;
                for (t = 0; t < m; t++) {
                    double g = gs * Krow[t] * vprev[t];
                    dCrow[t] -= g;
                    dpsi[t] -= g;
                }
            }
        }
    }
}

static void edk_cn_bn_relu_forward(const double *restrict z,
                                   const double *restrict gamma,
                                   const double *restrict beta,
                                   double *restrict run_mean,
                                   double *restrict run_var, double momentum,
                                   double eps, int train, long B, long m,
                                   long d, double *restrict y,
                                   double *restrict xc,
                                   double *restrict inv_cn,
                                   double *restrict mu_bn,
                                   double *restrict inv_bn,
                                   double *restrict mu_loc,
                                   double *restrict s_acc,
                                   double *restrict q_acc) {
    long b, e, f;
    const long md = m * d;
    const double n_total = (double)(B * m);

    for (f = 0; f < d; f++) {
        s_acc[f] = 0.0;
        q_acc[f] = 0.0;
    }
    for (b = 0; b < B; b++) {
        const double *zb = z + b * md;
        double *xcb = xc + b * md;
        double *icb = inv_cn + b * d;
        for (f = 0; f < d; f++) {
            mu_loc[f] = 0.0;
            icb[f] = 0.0;
        }
        for (e = 0; e < m; e++) {
            const double *row = zb + e * d;
            for (f = 0; f < d; f++) {
                double val = row[f];
                mu_loc[f] += val;
                icb[f] += val * val;
            }
        }
        for (f = 0; f < d; f++) {
            double mu = mu_loc[f] / m;
            double var = icb[f] / m - mu * mu;
            if (var < 0.0) var = 0.0;
            mu_loc[f] = mu;
            icb[f] = 1.0 / sqrt(var + eps);
        }
        for (e = 0; e < m; e++) {
            const double *row = zb + e * d;
            double *xrow = xcb + e * d;
            for (f = 0; f < d; f++) {
                double val = (row[f] - mu_loc[f]) * icb[f];
                xrow[f] = val;
                s_acc[f] += val;
                q_acc[f] += val * val;
            }
        }
    }
    for (f = 0; f < d; f++) {
        double mu, var;
        if (train) {
            mu = s_acc[f] / n_total;
            var = q_acc[f] / n_total - mu * mu;
            if (var < 0.0) var = 0.0;
            run_mean[f] = momentum * run_mean[f] + (1.0 - momentum) * mu;
            run_var[f] = momentum * run_var[f] + (1.0 - momentum) * var;
        } else {
            mu = run_mean[f];
            var = run_var[f];
        }
        mu_bn[f] = mu;
        inv_bn[f] = 1.0 / sqrt(var + eps);
    }
    for (b = 0; b < B; b++) {
        const double *xcb = xc + b * md;
        double *yb = y + b * md;
        for (e = 0; e < m; e++) {
            const double *xrow = xcb + e * d;
            double *yrow = yb + e * d;
            for (f = 0; f < d; f++) {
                double pre = gamma[f] * ((xrow[f] - mu_bn[f]) * inv_bn[f])
                             + beta[f];
                yrow[f] = pre > 0.0 ? pre : 0.0;
            }
        }
    }
}

static void edk_cn_bn_relu_backward(const double *restrict dy,
                                    const double *restrict xc,
                                    const double *restrict inv_cn,
                                    const double *restrict mu_bn,
                                    const double *restrict inv_bn,
                                    const double *restrict gamma,
                                    const double *restrict beta, int train,
                                    long B, long m, long d,
                                    double *restrict dz,
                                    double *restrict dgamma,
                                    double *restrict dbeta,
                                    double *restrict s1, double *restrict s2,
                                    double *restrict t1, double *restrict t2) {
    long b, e, f;
    const long md = m * d;
    const double n_total = (double)(B * m);

    for (f = 0; f < d; f++) {
        dgamma[f] = 0.0;
        dbeta[f] = 0.0;
        s1[f] = 0.0;
        s2[f] = 0.0;
    }
    for (b = 0; b < B; b++) {
        const double *dyb = dy + b * md;
        const double *xcb = xc + b * md;
        for (e = 0; e < m; e++) {
            const double *dyrow = dyb + e * d;
            const double *xrow = xcb + e * d;
            for (f = 0; f < d; f++) {
                double xb = (xrow[f] - mu_bn[f]) * inv_bn[f];
                double pre = gamma[f] * xb + beta[f];
                double dpre = dyrow[f] * (pre > 0.0 ? 1.0 : 0.0);
                dgamma[f] += dpre * xb;
                dbeta[f] += dpre;
                double dxb = dpre * gamma[f];
                s1[f] += dxb;
                s2[f] += dxb * xb;
            }
        }
    }
    for (f = 0; f < d; f++) {
        if (train) {
            s1[f] /= n_total;
            s2[f] /= n_total;
        } else {
            s1[f] = 0.0;
            s2[f] = 0.0;
        }
    }
    for (b = 0; b < B; b++) {
        const double *dyb = dy + b * md;
        const double *xcb = xc + b * md;
        const double *icb = inv_cn + b * d;
        double *dzb = dz + b * md;
        for (f = 0; f < d; f++) {
            t1[f] = 0.0;
            t2[f] = 0.0;
        }
        for (e = 0; e < m; e++) {
            const double *dyrow = dyb + e * d;
            const double *xrow = xcb + e * d;
            double *dzrow = dzb + e * d;
            for (f = 0; f < d; f++) {
                double xb = (xrow[f] - mu_bn[f]) * inv_bn[f];
                double pre = gamma[f] * xb + beta[f];
                double dxb = dyrow[f] * gamma[f] * (pre > 0.0 ? 1.0 : 0.0);
                double dxc = inv_bn[f] * (dxb - s1[f] - xb * s2[f]);
                dzrow[f] = dxc;
                t1[f] += dxc;
                t2[f] += dxc * xrow[f];
            }
        }
        for (f = 0; f < d; f++) {
            t1[f] /= m;
            t2[f] /= m;
        }
        for (e = 0; e < m; e++) {
            const double *xrow = xcb + e * d;
            double *dzrow = dzb + e * d;
            for (f = 0; f < d; f++)
                dzrow[f] = icb[f] * (dzrow[f] - t1[f] - xrow[f] * t2[f]);
        }
    }
}

static double edk_bce_identity(const double *restrict P, double clamp,
                               double scale, double *restrict dP, long B,
                               long m) {
    long b, s, t;
    double loss = 0.0;
    const double hi = 1.0 - clamp;
    const long mm = m * m;

    for (b = 0; b < B; b++) {
        const double *Pb = P + b * mm;
        double *dPb = dP + b * mm;
        for (s = 0; s < m; s++) {
            const double *prow = Pb + s * m;
            double *drow = dPb + s * m;
            double p, pc, keep;
            for (t = 0; t < m; t++) {
                p = prow[t];
                pc = p < clamp ? clamp : (p > hi ? hi : p);
                loss -= log(1.0 - pc);
                keep = (clamp < p && p < hi) ? 1.0 : 0.0;
                drow[t] = keep * scale / (1.0 - pc);
            }
            p = prow[s];
            pc = p < clamp ? clamp : (p > hi ? hi : p);
            loss += log(1.0 - pc) - log(pc);
            keep = (clamp < p && p < hi) ? 1.0 : 0.0;
            drow[s] = keep * scale * (pc - 1.0) / (pc * (1.0 - pc));
        }
    }
    return loss;
}

static void edk_cost_assemble(const double *restrict na,
                              const double *restrict nb, double *restrict ab,
                              long B, long m) {
    long b, s, t;
    const long mm = m * m;
    for (b = 0; b < B; b++) {
        const double *nab = na + b * m;
        const double *nbb = nb + b * m;
        double *abb = ab + b * mm;
        for (s = 0; s < m; s++) {
            const double ns = nab[s];
            double *row = abb + s * m;
            for (t = 0; t < m; t++) {
                double sq = ns + nbb[t] - 2.0 * row[t];
                row[t] = sq > 0.0 ? sqrt(sq) : 0.0;
            }
        }
    }
}

static void edk_cost_vjp_scale(const double *restrict M,
                               const double *restrict dM, double *restrict S,
                               double *restrict row_sum,
                               double *restrict col_sum, long B, long m) {
    long b, s, t;
    const long mm = m * m;
    for (b = 0; b < B; b++) {
        const double *Mb = M + b * mm;
        const double *dMb = dM + b * mm;
        double *Sb = S + b * mm;
        double *rs = row_sum + b * m;
        double *cs = col_sum + b * m;
        for (t = 0; t < m; t++) cs[t] = 0.0;
        for (s = 0; s < m; s++) {
            const double *Mrow = Mb + s * m;
            const double *dMrow = dMb + s * m;
            double *Srow = Sb + s * m;
            double acc = 0.0;
            for (t = 0; t < m; t++) {
                double v = Mrow[t] > 0.0 ? dMrow[t] / Mrow[t] : 0.0;
                Srow[t] = v;
                acc += v;
                cs[t] += v;
            }
            rs[s] = acc;
        }
    }
}

/* row-wise unit normalization with epsilon passthrough for tiny rows */
static void edk_l2_rows(const double *restrict x, double *restrict y,
                        double *restrict norms, double eps, long rows,
                        long d) {
    long r, f;
    for (r = 0; r < rows; r++) {
        const double *xr = x + r * d;
        double *yr = y + r * d;
        double sq = 0.0, inv;
        for (f = 0; f < d; f++) sq += xr[f] * xr[f];
        sq = sqrt(sq);
        norms[r] = sq;
        inv = 1.0 / (sq > eps ? sq : eps);
        for (f = 0; f < d; f++) yr[f] = xr[f] * inv;
    }
}

static void edk_l2_rows_backward(const double *restrict x,
                                 const double *restrict dy,
                                 double *restrict dx, double eps, long rows,
                                 long d) {
    long r, f;
    for (r = 0; r < rows; r++) {
        const double *xr = x + r * d;
        const double *dyr = dy + r * d;
        double *dxr = dx + r * d;
        double sq = 0.0;
        for (f = 0; f < d; f++) sq += xr[f] * xr[f];
        double n = sqrt(sq);
        double dd = n > eps ? n : eps;
        double inv = 1.0 / dd;
        if (n > eps) {
            double proj = 0.0;
            for (f = 0; f < d; f++) proj += xr[f] * dyr[f];
            proj *= inv * inv; /* x . dy scaled so that x * proj = y (y . dy) */
            for (f = 0; f < d; f++)
                dxr[f] = (dyr[f] - xr[f] * proj) * inv;
        } else {
            for (f = 0; f < d; f++) dxr[f] = dyr[f] * inv;
        }
    }
}

#endif /* EDGEDEPTH_KERNELS_IMPL_H */

