"""Bellman solver tests: dynamic-programming oracle, stationarity,
minimality and the PSD pseudo-inverse contract."""

import numpy as np
import pytest

from kooplift import (CostQuadratic, KoopmanBlocks, LqrSolveError,
                      bellman_residuals, psd_pinv, solve_bellman)
from kooplift.lqr import bellman_rhs

from conftest import random_stable


def make_hier(rng, py=3, pw=2, scale=0.3):
    return KoopmanBlocks(
        form="hier", n_px=0, n_py=py, n_pw=pw, n_pu=1,
        K_yy=random_stable(rng, py, 0.8),
        K_yw=scale * rng.standard_normal((py, pw)),
        K_ww=random_stable(rng, pw, 0.5),
        K_wy=scale * rng.standard_normal((pw, py)),
        K_wu=scale * rng.standard_normal((pw, 1)))


def regulator_cost(py, pw, q=1.0, r=0.1):
    return CostQuadratic(dims={"u": 1, "w": pw, "y": py, "x": 0},
                         Q={("y", "y"): q * np.eye(py),
                            ("w", "w"): r * np.eye(pw)})


def dp_feedback(A, B, Q, R, steps=500):
    """Brute-force finite-horizon value iteration from P = 0."""
    P = np.zeros_like(Q)
    for _ in range(steps):
        BtPB = B.T @ P @ B
        F = np.linalg.solve(R + BtPB, B.T @ P @ A)
        P = Q + A.T @ P @ A - A.T @ P @ B @ F
        P = 0.5 * (P + P.T)
    F = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return P, F


def test_bellman_matches_dp_oracle():
    rng = np.random.default_rng(0)
    model = make_hier(rng)
    cost = regulator_cost(model.n_py, model.n_pw)
    policy = solve_bellman(model, cost)
    A = model.K_yy
    B = (np.eye(model.n_py) - model.K_yy) @ model.K_yw
    P_dp, F_dp = dp_feedback(A, B, cost.q("y", "y"), cost.q("w", "w"))
    np.testing.assert_allclose(policy.F, F_dp, atol=1e-8)
    np.testing.assert_allclose(policy.P, P_dp, atol=1e-8)
    assert policy.closed_loop_radius < 1.0
    # regulator cost has no linear or input terms: affine parts vanish
    np.testing.assert_allclose(policy.d_0, 0.0, atol=1e-10)
    np.testing.assert_allclose(policy.p_0, 0.0, atol=1e-10)


def test_bellman_stationarity_residuals():
    rng = np.random.default_rng(1)
    model = make_hier(rng)
    cost = regulator_cost(model.n_py, model.n_pw)
    # add input coupling so the affine (d, p) parts are exercised
    cost.Q[("y", "u")] = rng.standard_normal((model.n_py, 1)) * 0.1
    cost.Q[("u", "y")] = cost.Q[("y", "u")].T.copy()
    policy = solve_bellman(model, cost)
    res = bellman_residuals(policy, model, cost, samples=5,
                            rng=np.random.default_rng(2))
    assert res["quadratic"] < 1e-7
    assert res["linear"] < 1e-7


def test_feedback_is_local_minimum():
    rng = np.random.default_rng(3)
    model = make_hier(rng)
    cost = regulator_cost(model.n_py, model.n_pw)
    policy = solve_bellman(model, cost)
    psi_y = rng.standard_normal(model.n_py)
    psi_u = rng.standard_normal(1)
    w_star = policy.feedback(psi_y, psi_u=psi_u)
    base = bellman_rhs(model, cost, policy, psi_y, w_star, psi_u=psi_u)
    for _ in range(20):
        pert = w_star + 0.1 * rng.standard_normal(model.n_pw)
        assert bellman_rhs(model, cost, policy, psi_y, pert, psi_u=psi_u) \
            >= base - 1e-9


def test_warm_start_converges_fast():
    rng = np.random.default_rng(4)
    model = make_hier(rng)
    cost = regulator_cost(model.n_py, model.n_pw)
    cold = solve_bellman(model, cost)
    warm = solve_bellman(model, cost, P0=cold.P)
    assert warm.iterations <= 3
    np.testing.assert_allclose(warm.F, cold.F, atol=1e-9)


def test_psd_pinv_contract():
    rng = np.random.default_rng(5)
    V = rng.standard_normal((3, 2))
    Q = V @ V.T  # rank-2 PSD with one flat direction
    Qp = psd_pinv(Q)
    np.testing.assert_allclose(Q @ Qp @ Q, Q, atol=1e-10)
    null = np.linalg.svd(Q)[0][:, -1]
    np.testing.assert_allclose(Qp @ null, 0.0, atol=1e-10)
    with pytest.raises(LqrSolveError):
        psd_pinv(np.diag([1.0, -0.5]))


def test_rejects_tss_form():
    rng = np.random.default_rng(6)
    model = KoopmanBlocks(form="tss", n_px=2, n_py=2, n_pw=0, n_pu=0,
                          K_xx=random_stable(rng, 2, 0.5),
                          K_xy=0.1 * rng.standard_normal((2, 2)),
                          K_yy=random_stable(rng, 2, 0.5),
                          K_yx=0.1 * rng.standard_normal((2, 2)))
    with pytest.raises(ValueError):
        solve_bellman(model, regulator_cost(2, 0))
