"""Timing comparison between the compiled kernels and the numpy fallback.

Run from the repository root after `python setup.py build_ext --inplace`:

    python benchmarks/bench_backends.py [--quick]

Each row reports the mean wall time per call for both backends and the
speedup of the compiled path.
"""

import argparse
import time

import numpy as np

from edgedepth import _kernels_pure

try:
    from edgedepth import _kernels as ext
except ImportError:
    ext = None


def timeit(fn, reps):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps * 1000.0


def bench_sinkhorn(B, m, iters, reps):
    rng = np.random.default_rng(0)
    M = rng.uniform(0.0, 2.0, (B, m, m))
    K = np.exp(-M / 0.1)

    def pure_fwd():
        return _kernels_pure.sinkhorn_forward(M, 0.1, iters, 0.0)

    rows = []
    P, phi, psi, T, err = pure_fwd()
    dP = rng.standard_normal(P.shape)
    t_pure = timeit(pure_fwd, reps)
    t_pure_bwd = timeit(
        lambda: _kernels_pure.sinkhorn_backward(M, 0.1, phi, psi, dP), reps)
    if ext is not None:
        phi_e = np.empty((iters + 1, B, m))
        psi_e = np.empty((iters + 1, B, m))
        err_e = np.empty(B)

        def ext_fwd():
            return ext.sinkhorn_forward_ext(K, iters, 0.0, phi_e, psi_e, err_e)

        u_hist = np.ascontiguousarray(np.exp(phi))
        v_hist = np.ascontiguousarray(np.exp(psi))
        dC = np.empty_like(M)

        def ext_bwd():
            ext.sinkhorn_backward_ext(K, u_hist, v_hist, dP, dC)

        t_ext = timeit(ext_fwd, reps)
        t_ext_bwd = timeit(ext_bwd, reps)
    else:
        t_ext = t_ext_bwd = float("nan")
    rows.append((f"sinkhorn fwd  B={B} m={m} T={iters}", t_pure, t_ext))
    rows.append((f"sinkhorn bwd  B={B} m={m} T={iters}", t_pure_bwd, t_ext_bwd))
    return rows


def bench_layer(B, m, d, reps):
    rng = np.random.default_rng(1)
    z = rng.standard_normal((B, m, d))
    gamma = np.ones(d)
    beta = np.zeros(d)
    rm = np.zeros(d)
    rv = np.ones(d)
    y, xc, inv_cn, mu_bn, inv_bn = _kernels_pure.cn_bn_relu_forward(
        z, gamma, beta, rm, rv, 0.9, 1e-8, True)
    dy = rng.standard_normal(z.shape)

    t_pure = timeit(lambda: _kernels_pure.cn_bn_relu_forward(
        z, gamma, beta, rm, rv, 0.9, 1e-8, True), reps)
    t_pure_bwd = timeit(lambda: _kernels_pure.cn_bn_relu_backward(
        dy, xc, inv_cn, mu_bn, inv_bn, gamma, beta, True), reps)
    if ext is not None:
        xc_c = np.ascontiguousarray(xc)
        icn_c = np.ascontiguousarray(inv_cn)
        t_ext = timeit(lambda: ext.cn_bn_relu_forward(
            z, gamma, beta, rm, rv, 0.9, 1e-8, True), reps)
        t_ext_bwd = timeit(lambda: ext.cn_bn_relu_backward(
            dy, xc_c, icn_c, mu_bn, inv_bn, gamma, beta, True), reps)
    else:
        t_ext = t_ext_bwd = float("nan")
    return [
        (f"layer fwd     B={B} m={m} d={d}", t_pure, t_ext),
        (f"layer bwd     B={B} m={m} d={d}", t_pure_bwd, t_ext_bwd),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true",
                        help="fewer repetitions and sizes")
    args = parser.parse_args()

    print(f"compiled backend available: {ext is not None}")
    rows = []
    reps = 3 if args.quick else 10
    rows += bench_sinkhorn(32, 120, 10, reps)
    rows += bench_layer(32, 120, 64, reps)
    if not args.quick:
        rows += bench_sinkhorn(1, 512, 10, reps)
        rows += bench_sinkhorn(1, 2628, 3, 2)

    print(f"\n{'case':<34}{'pure (ms)':>12}{'ext (ms)':>12}{'speedup':>10}")
    for name, t_pure, t_ext in rows:
        speed = t_pure / t_ext if t_ext == t_ext else float("nan")
        print(f"{name:<34}{t_pure:>12.3f}{t_ext:>12.3f}{speed:>9.1f}x")


if __name__ == "__main__":
    main()
