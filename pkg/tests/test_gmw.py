import dataclasses
import itertools
import math

import numpy as np
import pytest

from edgedepth import dgde, gmw
from edgedepth import _kernels_pure
from edgedepth.errors import ShapeMismatch, TooFewKeypoints
from edgedepth.tinynn import grad_check, l2_normalize_rows

from conftest import make_instance

RNG = np.random.default_rng(0)


# ---------------------------------------------------------------------------
# graphs


def test_build_graphs_small_enumeration(clean_instance):
    inst = make_instance(seed=0, n_extra=0)
    inst = dataclasses.replace(inst) if dataclasses.is_dataclass(inst) else inst
    g2, g3 = gmw.build_graphs(inst)
    n = inst.n
    assert g2.edges.shape == (n * (n - 1) // 2, 2)
    first = [tuple(e) for e in g2.edges[: n - 1]]
    assert first == [(0, j) for j in range(1, n)]
    assert np.array_equal(g2.edges, g3.edges)
    # features concatenate the two endpoints
    assert np.array_equal(g2.features[0], np.concatenate([g2.points[0], g2.points[1]]))
    assert g3.features.shape[1] == 6


def test_build_graphs_73_keypoints():
    inst = make_instance(seed=1, n_extra=63)
    g2, _ = gmw.build_graphs(inst)
    assert g2.edges.shape[0] == 2628


def test_build_graphs_storage_permutation_invariant():
    inst = make_instance(seed=2)
    perm = np.random.default_rng(3).permutation(inst.n)
    shuffled = dataclasses.replace(
        inst,
        kp_index=inst.kp_index[perm],
        kp3d=inst.kp3d[perm],
        kp3d_clean=inst.kp3d_clean[perm],
        kp2d=inst.kp2d[perm],
        kp2d_clean=inst.kp2d_clean[perm],
    )
    a2, a3 = gmw.build_graphs(inst)
    b2, b3 = gmw.build_graphs(shuffled)
    assert np.array_equal(a2.features, b2.features)
    assert np.array_equal(a3.features, b3.features)


def test_build_graphs_too_few():
    inst = make_instance(seed=2)
    tiny = dataclasses.replace(
        inst, kp_index=inst.kp_index[:1], kp3d=inst.kp3d[:1],
        kp3d_clean=inst.kp3d_clean[:1], kp2d=inst.kp2d[:1],
        kp2d_clean=inst.kp2d_clean[:1])
    with pytest.raises(TooFewKeypoints):
        gmw.build_graphs(tiny)


# ---------------------------------------------------------------------------
# cost matrix


def test_cost_matrix_zero_diagonal():
    f = l2_normalize_rows(RNG.standard_normal((5, 3)))
    M = gmw.cost_matrix(f, f)
    assert np.abs(np.diagonal(M)).max() < 1e-7
    assert (M >= 0.0).all() and (M <= 2.0 + 1e-12).all()


def test_cost_matrix_orthogonal_rows():
    f2 = np.array([[1.0, 0.0], [0.0, 1.0]])
    f3 = np.array([[0.0, 1.0], [1.0, 0.0]])
    M = gmw.cost_matrix(f2, f3)
    assert M[0, 0] == pytest.approx(math.sqrt(2.0), abs=1e-12)
    assert M[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_cost_matrix_matches_bruteforce():
    a = l2_normalize_rows(RNG.standard_normal((3, 2)))
    b = l2_normalize_rows(RNG.standard_normal((3, 2)))
    M = gmw.cost_matrix(a, b)
    for s in range(3):
        for t in range(3):
            ref = math.sqrt(sum((a[s, i] - b[t, i]) ** 2 for i in range(2)))
            assert M[s, t] == pytest.approx(ref, abs=1e-12)


def test_cost_matrix_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        gmw.cost_matrix(np.zeros((3, 2)), np.zeros((4, 2)))


# ---------------------------------------------------------------------------
# sinkhorn


def test_sinkhorn_constant_cost_is_uniform():
    m = 6
    res = gmw.sinkhorn(np.full((m, m), 0.7), gmw.SinkhornConfig(alpha=0.1))
    assert res.converged
    assert np.abs(res.P - 1.0 / m).max() < 1e-12


def test_sinkhorn_strong_diagonal_2x2():
    res = gmw.sinkhorn(np.array([[0.0, 10.0], [10.0, 0.0]]),
                       gmw.SinkhornConfig(alpha=0.1))
    assert np.abs(res.P - np.eye(2)).max() < 1e-3


def _entropic_2x2_oracle(M, alpha, iters=20000):
    # independent fixed-point iteration in plain python floats
    k = [[math.exp(-M[i][j] / alpha) for j in range(2)] for i in range(2)]
    u, v = [1.0, 1.0], [1.0, 1.0]
    for _ in range(iters):
        u = [1.0 / (k[i][0] * v[0] + k[i][1] * v[1]) for i in range(2)]
        v = [1.0 / (k[0][j] * u[0] + k[1][j] * u[1]) for j in range(2)]
    return [[u[i] * k[i][j] * v[j] for j in range(2)] for i in range(2)]


def test_sinkhorn_matches_2x2_fixed_point_oracle():
    M = [[0.3, 1.1], [0.9, 0.2]]
    ref = _entropic_2x2_oracle(M, alpha=0.2)
    res = gmw.sinkhorn(np.array(M), gmw.SinkhornConfig(alpha=0.2, max_iters=20000))
    assert np.abs(res.P - np.array(ref)).max() < 1e-9


def test_sinkhorn_marginals():
    for seed in range(5):
        M = np.random.default_rng(seed).uniform(0.0, 2.0, (8, 8))
        cfg = gmw.SinkhornConfig(alpha=0.1, max_iters=5000, tol=1e-10)
        res = gmw.sinkhorn(M, cfg)
        assert res.converged
        assert np.abs(res.P.sum(axis=1) - 1.0).max() < cfg.tol
        assert np.abs(res.P.sum(axis=0) - 1.0).max() < cfg.tol


def test_sinkhorn_nonconvergence_is_flagged():
    M = np.random.default_rng(1).uniform(0.0, 2.0, (6, 6))
    res = gmw.sinkhorn(M, gmw.SinkhornConfig(alpha=0.01, max_iters=2, tol=1e-12))
    assert not res.converged
    assert res.marginal_err > 1e-12


def test_sinkhorn_argmax_matches_bruteforce_permutation():
    hits = 0
    trials = 30
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(3, 6))
        M = rng.uniform(0.0, 1.0, (m, m))
        res = gmw.sinkhorn(M, gmw.SinkhornConfig(alpha=0.02, max_iters=200_000,
                                                 tol=1e-10))
        best = min(itertools.permutations(range(m)),
                   key=lambda p: sum(M[s, p[s]] for s in range(m)))
        if np.array_equal(res.P.argmax(axis=1), np.array(best)):
            hits += 1
    assert hits >= trials - 1


def test_sinkhorn_dual_ascends_and_final_primal_beats_uniform():
    # each half step maximizes one dual block, so the dual never decreases;
    # the converged plan also reaches a lower objective value than the
    # always-feasible uniform plan
    rng = np.random.default_rng(7)
    M = rng.uniform(0.0, 2.0, (6, 6))
    alpha = 0.15
    _, phi, psi, T, _ = _kernels_pure.sinkhorn_forward(M[None], alpha, 60, 0.0)
    duals = []
    for k in range(T + 1):
        duals.append(gmw.sinkhorn_dual_objective(M, phi[k, 0], psi[k, 0], alpha))
    assert (np.diff(duals) >= -1e-9).all()
    res = gmw.sinkhorn(M, gmw.SinkhornConfig(alpha=alpha, max_iters=5000))
    uniform = np.full_like(M, 1.0 / 6.0)
    assert gmw.entropic_objective(M, res.P, alpha) <= \
        gmw.entropic_objective(M, uniform, alpha) + 1e-9


# ---------------------------------------------------------------------------
# weights and losses


def test_weights_equal_diagonal_uniform():
    M = np.full((4, 4), 0.5)
    w = gmw.weights_from_cost(M)
    assert np.allclose(w, 0.25, atol=1e-12)


def test_weights_zero_cost_dominates():
    M = np.eye(3) * 0.0 + np.ones((3, 3))
    M[1, 1] = 0.0
    w = gmw.weights_from_cost(M, eps=1e-6, temperature=1.0)
    assert w[1] > 1.0 - 1e-3


def test_weights_sum_to_one():
    for seed in range(10):
        M = np.random.default_rng(seed).uniform(0.0, 2.0, (9, 9))
        w = gmw.weights_from_cost(M)
        assert abs(w.sum() - 1.0) < 1e-12
        assert (w >= 0.0).all()


def test_matching_losses_identity_plan():
    m = 4
    eye = np.eye(m)
    L_c, L_r, L_m = gmw.matching_losses(eye, eye, 10.0, 10.0, beta=2.0)
    assert 0.0 <= L_c <= m * m * 2.0 * gmw.BCE_CLAMP * 10
    assert L_r == 0.0
    assert L_m == L_c


def test_matching_losses_scalar_oracle():
    P = np.array([[0.7, 0.3], [0.2, 0.8]])
    P_star = np.eye(2)
    L_c, L_r, L_m = gmw.matching_losses(P, P_star, 12.5, 11.0, beta=0.5)
    ref = 0.0
    for s in range(2):
        for t in range(2):
            p, y = P[s, t], P_star[s, t]
            ref += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    assert L_c == pytest.approx(ref, abs=1e-12)
    assert L_r == pytest.approx(1.5, abs=1e-12)
    assert L_m == pytest.approx(ref + 0.5 * 1.5, abs=1e-12)


def test_matching_losses_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        gmw.matching_losses(np.eye(3), np.eye(4), 1.0, 1.0, 1.0)


def test_permutation_equivariance():
    m, d = 7, 5
    f2 = l2_normalize_rows(RNG.standard_normal((m, d)))
    f3 = l2_normalize_rows(RNG.standard_normal((m, d)))
    M = gmw.cost_matrix(f2, f3)
    w = gmw.weights_from_cost(M)
    perm = np.random.default_rng(5).permutation(m)
    M_perm = gmw.cost_matrix(f2[perm], f3[perm])
    assert np.allclose(M_perm, M[np.ix_(perm, perm)], atol=1e-12)
    assert np.allclose(gmw.weights_from_cost(M_perm), w[perm], atol=1e-12)


# ---------------------------------------------------------------------------
# end-to-end gradients


def _tiny_batch(n_kp=4, batch=2):
    x2d_list, x3d_list, z_star = [], [], []
    sel_idx, z_sel = [], []
    for seed in range(batch):
        inst = make_instance(seed=40 + seed, n_extra=n_kp - 10 if n_kp > 10 else 0,
                             sigma_px=0.5)
        if n_kp < 10:
            inst = dataclasses.replace(
                inst, kp_index=inst.kp_index[:n_kp], kp3d=inst.kp3d[:n_kp],
                kp3d_clean=inst.kp3d_clean[:n_kp], kp2d=inst.kp2d[:n_kp],
                kp2d_clean=inst.kp2d_clean[:n_kp])
        g2, g3 = gmw.build_graphs(inst)
        x2d_list.append(g2.features)
        x3d_list.append(g3.features)
        cands = dgde.generate_candidates(inst)
        sel = dgde.mask_and_select(cands, tau=1e-4, k=len(cands))
        sel_idx.append(sel.edge_index)
        z_sel.append(sel.z)
        z_star.append(inst.z_star)
    return (np.stack(x2d_list), np.stack(x3d_list), np.array(z_star),
            sel_idx, z_sel)


def test_end_to_end_gradient_matches_finite_differences():
    x2d, x3d, z_star, sel_idx, z_sel = _tiny_batch(n_kp=4)
    model = gmw.MatchingWeighter(gmw.GMWConfig(layers=2, hidden=6, feature_dim=5),
                                 seed=3)
    cfg = gmw.SinkhornConfig(alpha=0.1, max_iters=12, tol=0.0)

    def loss_and_grads():
        losses, grads, _ = gmw.batch_loss_and_grads(
            model, x2d, x3d, z_star, sel_idx, z_sel, cfg,
            beta=5.0, include_reg=True, mode="eval")
        return losses["total"], grads

    err = grad_check(loss_and_grads, model.store, n_samples=400, h=1e-5, seed=1)
    assert err < 1e-4
