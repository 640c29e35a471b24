import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadalign.geometry import quat_to_matrix, random_rotation, rot_z, rotation_angle_deg
from cadalign.procrustes import (CorrespondenceSet, DegenerateConfiguration, GradientSingular,
                                 TooFewPoints, ZeroVariance, frobenius_loss_grad, residual,
                                 rotation_gradient, solve_rotation, solve_similarity)


def euler_grid(step_deg):
    """ZYZ Euler-angle grid covering SO(3) at ``step_deg`` resolution."""
    a = np.radians(np.arange(0, 360, step_deg))
    b = np.radians(np.arange(0, 180 + step_deg, step_deg))
    A, B, C = np.meshgrid(a, b, a, indexing="ij")
    A, B, C = A.ravel(), B.ravel(), C.ravel()

    def rz(t):
        R = np.zeros((len(t), 3, 3))
        R[:, 0, 0] = R[:, 1, 1] = np.cos(t)
        R[:, 0, 1], R[:, 1, 0] = -np.sin(t), np.sin(t)
        R[:, 2, 2] = 1
        return R

    def ry(t):
        R = np.zeros((len(t), 3, 3))
        R[:, 0, 0] = R[:, 2, 2] = np.cos(t)
        R[:, 0, 2], R[:, 2, 0] = np.sin(t), -np.sin(t)
        R[:, 1, 1] = 1
        return R

    return rz(A) @ ry(B) @ rz(C)


def brute_residuals(c, rotations):
    """Weighted centered residual of each candidate rotation, summed naively."""
    w = c.weight
    qc = c.p_cad - (w @ c.p_cad) / w.sum()
    qs = c.p_scan - (w @ c.p_scan) / w.sum()
    pred = np.einsum("kij,nj->kni", rotations, qc)
    return ((pred - qs[None]) ** 2).sum(-1) @ w


# --------------------------------------------------------------------------
# solve_rotation
# --------------------------------------------------------------------------

def test_identity_example():
    p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    sol = solve_rotation(CorrespondenceSet(p, p))
    assert np.allclose(sol.rotation, np.eye(3), atol=1e-12)


def test_rz90_example():
    p = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0]], float)
    R = solve_rotation(CorrespondenceSet(p, p @ rot_z(90).T)).rotation
    assert np.allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-9)


def test_mirrored_input_beats_brute_force_grid(rng):
    p = rng.normal(size=(30, 3)) * [1.0, 0.7, 0.4]
    c = CorrespondenceSet(p, p * [1, 1, -1])
    sol = solve_rotation(c)
    assert sol.d == -1.0
    assert abs(np.linalg.det(sol.rotation) - 1) < 1e-9
    grid = euler_grid(3.0)
    best = brute_residuals(c, grid).min()
    assert residual(c, sol.rotation) <= best + 1e-9


def test_residual_optimal_vs_random_rotations(rng):
    for _ in range(10):
        p = rng.normal(size=(40, 3))
        q = p @ random_rotation(rng).T + 0.3 * rng.normal(size=(40, 3))
        c = CorrespondenceSet(p, q, rng.uniform(0.1, 1, 40))
        r = residual(c, solve_rotation(c).rotation)
        cands = np.stack([random_rotation(rng) for _ in range(1000)])
        assert r <= brute_residuals(c, cands).min() + 1e-9


@settings(max_examples=300, deadline=None)
@given(st.integers(3, 200), st.integers(0, 2 ** 32 - 1))
def test_exact_recovery_property(n, seed):
    rng = np.random.default_rng(seed)
    R = random_rotation(rng)
    p = rng.normal(size=(n, 3))
    sol = solve_rotation(CorrespondenceSet(p, p @ R.T + rng.normal(size=3)))
    assert np.radians(rotation_angle_deg(sol.rotation, R)) < 1e-6
    assert abs(np.linalg.det(sol.rotation) - 1) < 1e-9
    assert np.allclose(sol.rotation.T @ sol.rotation, np.eye(3), atol=1e-9)


def test_det_positive_stress(rng):
    for k in range(10_000):
        n = int(rng.integers(3, 30))
        p = rng.normal(size=(n, 3))
        kind = k % 4
        if kind == 1:
            p[:, 2] *= 1e-6  # near-planar
        q = p @ random_rotation(rng).T
        if kind == 2:
            q = q * [1, 1, -1]  # mirrored
        if kind == 3:
            q = rng.normal(size=(n, 3))
        try:
            R = solve_rotation(CorrespondenceSet(p, q)).rotation
        except DegenerateConfiguration:
            continue
        assert abs(np.linalg.det(R) - 1) < 1e-9


def test_rotation_invariance(rng):
    for _ in range(50):
        p = rng.normal(size=(20, 3))
        q = rng.normal(size=(20, 3))
        Q1, Q2 = random_rotation(rng), random_rotation(rng)
        R = solve_rotation(CorrespondenceSet(p, q)).rotation
        R2 = solve_rotation(CorrespondenceSet(p @ Q1.T, q @ Q2.T)).rotation
        assert np.allclose(R2, Q2 @ R @ Q1.T, atol=1e-8)


def test_weight_duplication_equivalence(rng):
    p = rng.normal(size=(10, 3))
    q = rng.normal(size=(10, 3))
    w = np.ones(10)
    a = solve_rotation(CorrespondenceSet(p, q, w))
    pd = np.vstack([p, p[:1]])
    qd = np.vstack([q, q[:1]])
    wd = np.r_[0.5, w[1:], 0.5]
    b = solve_rotation(CorrespondenceSet(pd, qd, wd))
    assert np.allclose(a.rotation, b.rotation, atol=1e-12)


def test_errors():
    p = np.eye(3)[:2]
    with pytest.raises(TooFewPoints):
        solve_rotation(CorrespondenceSet(p, p))
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateConfiguration):
        solve_rotation(CorrespondenceSet(line, line))
    with pytest.raises(TooFewPoints):
        solve_rotation(CorrespondenceSet(np.eye(3), np.eye(3), np.zeros(3)))
    with pytest.raises(ValueError):
        CorrespondenceSet(np.eye(3), np.eye(3), [1, -1, 1])
    with pytest.raises(ValueError):
        CorrespondenceSet(np.zeros((4, 3)), np.zeros((5, 3)))


def test_solve_time_n1000(rng):
    p = rng.normal(size=(1000, 3))
    c = CorrespondenceSet(p, p @ random_rotation(rng).T)
    solve_rotation(c)
    t0 = time.perf_counter()
    for _ in range(100):
        solve_rotation(c)
    assert (time.perf_counter() - t0) / 100 < 1e-3


# --------------------------------------------------------------------------
# solve_similarity
# --------------------------------------------------------------------------

def test_similarity_example():
    p = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    R, s, t = solve_similarity(CorrespondenceSet(p, 2 * p + [1, 0, 0]))
    assert abs(s - 2) < 1e-9 and np.allclose(R, np.eye(3), atol=1e-9)
    assert np.allclose(t, [1, 0, 0], atol=1e-9)


def test_similarity_round_trip(rng):
    for _ in range(50):
        R0, s0, t0 = random_rotation(rng), rng.uniform(0.5, 2), rng.normal(size=3)
        p = rng.normal(size=(50, 3))
        R, s, t = solve_similarity(CorrespondenceSet(p, s0 * p @ R0.T + t0))
        assert np.allclose(R, R0, atol=1e-8) and abs(s - s0) < 1e-8
        assert np.allclose(t, t0, atol=1e-8)


def test_similarity_noise_monte_carlo(rng):
    errs = []
    for _ in range(100):
        R0 = random_rotation(rng)
        p = rng.normal(size=(200, 3))
        q = p @ R0.T + rng.normal(0, 0.01, (200, 3))
        errs.append(rotation_angle_deg(solve_similarity(CorrespondenceSet(p, q))[0], R0))
    assert max(errs) < 1.0


def test_similarity_zero_variance():
    # cross-covariance is rank 2 but the CAD side carries no spread
    p = np.zeros((4, 3))
    with pytest.raises((ZeroVariance, DegenerateConfiguration)):
        solve_similarity(CorrespondenceSet(p, np.eye(4)[:, :3]))


# --------------------------------------------------------------------------
# gradient
# --------------------------------------------------------------------------

def finite_difference(c, G, h=1e-5):
    def loss(pc, ps):
        return float((G * solve_rotation(CorrespondenceSet(pc, ps, c.weight)).rotation).sum())

    grads = []
    for which in (0, 1):
        base = [c.p_cad.copy(), c.p_scan.copy()]
        g = np.zeros_like(base[which])
        for idx in np.ndindex(*g.shape):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[which][idx] += h
            minus[which][idx] -= h
            g[idx] = (loss(*plus) - loss(*minus)) / (2 * h)
        grads.append(g)
    return grads


def assert_grad_close(analytic, numeric, rtol=1e-4):
    scale = np.abs(numeric).max()
    denom = np.maximum(np.abs(numeric), 1e-3 * scale)
    assert np.all(np.abs(analytic - numeric) / denom < rtol)


@pytest.mark.parametrize("mirror", [False, True])
def test_gradient_matches_finite_differences(rng, mirror):
    for _ in range(5):
        p = rng.normal(size=(10, 3)) * [1.5, 1.0, 0.6]
        q = p @ random_rotation(rng).T + 0.2 * rng.normal(size=(10, 3))
        if mirror:
            q = q * [1, 1, -1]
        c = CorrespondenceSet(p, q, rng.uniform(0.2, 1, 10))
        G = rng.normal(size=(3, 3))
        a_cad, a_scan = rotation_gradient(c, G)
        n_cad, n_scan = finite_difference(c, G)
        assert_grad_close(a_cad, n_cad)
        assert_grad_close(a_scan, n_scan)


def test_gradient_stationary_at_optimum(rng):
    p = rng.normal(size=(10, 3))
    R_gt = random_rotation(rng)
    c = CorrespondenceSet(p, p @ R_gt.T)
    R = solve_rotation(c).rotation
    _, dL_dR = frobenius_loss_grad(R, R_gt)
    g_cad, g_scan = rotation_gradient(c, dL_dR)
    assert np.linalg.norm(g_cad) < 1e-9 and np.linalg.norm(g_scan) < 1e-9


def test_gradient_centering_invariance(rng):
    p = rng.normal(size=(10, 3))
    c = CorrespondenceSet(p, rng.normal(size=(10, 3)), rng.uniform(0.2, 1, 10))
    g_cad, g_scan = rotation_gradient(c, rng.normal(size=(3, 3)))
    # a uniform shift of either set leaves R unchanged
    assert np.allclose(g_cad.sum(axis=0), 0, atol=1e-9)
    assert np.allclose(g_scan.sum(axis=0), 0, atol=1e-9)


def test_gradient_singular():
    # isotropic configuration: all singular values equal
    p = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    with pytest.raises(GradientSingular):
        rotation_gradient(CorrespondenceSet(p, p), np.eye(3))


def test_frobenius_loss_grad():
    R = rot_z(10)
    L, g = frobenius_loss_grad(R, np.eye(3))
    assert abs(L - ((R - np.eye(3)) ** 2).sum()) < 1e-15
    assert np.allclose(g, 2 * (R - np.eye(3)))
