"""Acceptance suite: the eight primary criteria.

Each test asserts one criterion at its stated tolerance and prints exactly
one PASS/FAIL line (bypassing output capture so the line is visible in the
test log).  Informational report lines (reseed tables) are printed the same
way but carry no assertion.
"""

import time

import numpy as np
import pytest

from kooplift import (GridConfig, KoopmanBlocks, LiftingMap, OcpSpec,
                      SystemConfig, TimeGrid, benchmark_train_config,
                      best_constant_policy, complex_stability_radius,
                      generate_dataset, kreiss_lower_bound,
                      prediction_rms_table, run_policy_study, solve_bellman,
                      solve_ocp, spectral_radius, train)
from kooplift.lqr import bellman_residuals, bellman_rhs
from kooplift.training import prediction_loss, stabilize

from conftest import random_stable
from test_lqr import dp_feedback, make_hier, regulator_cost
from test_models import make_comb, make_tss
from test_ocp import make_cost, make_limit

GRID = TimeGrid(0.1, 100)


def _criterion(capsys, num, desc, checks: dict, info: list[str] = ()):
    ok = all(checks.values())
    with capsys.disabled():
        print(f"\n[criterion {num}] {'PASS' if ok else 'FAIL'}: {desc}")
        for line in info:
            print(f"  [criterion {num}] {line}")
    failed = [k for k, v in checks.items() if not v]
    assert ok, f"criterion {num} failed: {failed}"


def _train_full(variant, seed=0):
    cfg = SystemConfig(variant=variant)
    t0 = time.time()
    ds = generate_dataset(cfg, GRID, n_traj=10_000, seed=seed)
    result = train(variant, ds, benchmark_train_config(variant, seed=seed))
    return result, cfg, time.time() - t0


@pytest.fixture(scope="module")
def tss_full():
    return _train_full("tss")


@pytest.fixture(scope="module")
def hier_full():
    return _train_full("hier")


@pytest.fixture(scope="module")
def comb_full():
    return _train_full("comb")


# ---------------------------------------------------------------------------
# 1. oracle LQR equivalence


def test_criterion_1_bellman_vs_brute_force_dp(capsys):
    rng = np.random.default_rng(0)
    py = pw = 2  # 2-state linear fast system, identity lifting
    model = KoopmanBlocks(
        form="hier", n_px=0, n_py=py, n_pw=pw, n_pu=1,
        K_yy=random_stable(rng, py, 0.9),
        K_yw=0.4 * rng.standard_normal((py, pw)),
        K_ww=random_stable(rng, pw, 0.5),
        K_wy=0.1 * rng.standard_normal((pw, py)),
        K_wu=0.1 * rng.standard_normal((pw, 1)))
    cost = regulator_cost(py, pw, q=1.0, r=0.1)
    t0 = time.time()
    policy = solve_bellman(model, cost)
    elapsed = time.time() - t0
    A = model.K_yy
    B = (np.eye(py) - model.K_yy) @ model.K_yw
    _, F_dp = dp_feedback(A, B, cost.q("y", "y"), cost.q("w", "w"), steps=500)
    err = float(np.max(np.abs(policy.F - F_dp)))
    _criterion(capsys, 1, "solve_bellman F matches 500-step brute-force DP",
               {"F_err_le_1e-8": err <= 1e-8, "runtime_lt_1s": elapsed < 1.0},
               [f"max|F - F_dp| = {err:.2e}, solve time {elapsed * 1e3:.1f} ms"])


# ---------------------------------------------------------------------------
# 2. limit-matrix correctness


def _king_step(K, state, target):
    """Batched King-form update over stacked models: (M, B, p) arrays."""
    return np.einsum("mij,mbj->mbi", K, state - target) + target


def test_criterion_2_limits_vs_rollout_fixed_points(capsys):
    rng = np.random.default_rng(0)
    t0 = time.time()
    n_models, iters = 100, 10_000
    burn = iters - 1000  # window mean over the final 1000 fast samples

    # --- comb form: combined_limit's B blocks ---
    combs = [make_comb(rng, px=3, py=3, pw=2) for _ in range(n_models)]
    px, py, pw, pu = 3, 3, 2, 1
    B = px + pu + 1  # probe basis for psi_x and psi_u plus the zero probe
    Xp = np.vstack([np.eye(px), np.zeros((pu + 1, px))])
    Up = np.vstack([np.zeros((px, pu)), np.eye(pu), np.zeros((1, pu))])
    K = {name: np.stack([getattr(m, name) for m in combs])
         for name in ("K_yy", "K_yx", "K_yw", "K_ww", "K_wy", "K_wx", "K_wu")}
    drive_y = np.einsum("mij,bj->mbi", K["K_yx"], Xp)
    drive_w = np.einsum("mij,bj->mbi", K["K_wx"], Xp) \
        + np.einsum("mij,bj->mbi", K["K_wu"], Up)
    y = np.zeros((n_models, B, py))
    w = np.zeros((n_models, B, pw))
    ybar = np.zeros_like(y)
    wbar = np.zeros_like(w)
    for it in range(iters):
        ty = drive_y + np.einsum("mij,mbj->mbi", K["K_yw"], w)
        tw = drive_w + np.einsum("mij,mbj->mbi", K["K_wy"], y)
        y, w = _king_step(K["K_yy"], y, ty), _king_step(K["K_ww"], w, tw)
        if it >= burn:
            ybar += y
            wbar += w
    ybar /= iters - burn
    wbar /= iters - burn
    worst_comb = 0.0
    for i, m in enumerate(combs):
        limit = m.combined_limit()
        for b in range(B):
            ye, we = limit.fast_equilibrium(Xp[b], Up[b])
            xe = limit.step(Xp[b], Up[b])
            xr = m.step_slow(Xp[b], ybar[i, b][None, :], wbar[i, b][None, :])
            worst_comb = max(worst_comb,
                             float(np.max(np.abs(y[i, b] - ye))),
                             float(np.max(np.abs(w[i, b] - we))),
                             float(np.max(np.abs(xr - xe))))

    # --- tss form: tss_limit's K_comb_xx vs the long-window slow map ---
    tsss = [make_tss(rng, px=3, py=3) for _ in range(n_models)]
    Kt = {name: np.stack([getattr(m, name) for m in tsss])
          for name in ("K_yy", "K_yx")}
    Xb = np.eye(px)
    drive = np.einsum("mij,bj->mbi", Kt["K_yx"], Xb)
    yt = np.zeros((n_models, px, py))
    ytbar = np.zeros_like(yt)
    for it in range(iters):
        yt = _king_step(Kt["K_yy"], yt, drive)
        if it >= burn:
            ytbar += yt
    ytbar /= iters - burn
    worst_tss = 0.0
    for i, m in enumerate(tsss):
        K_comb = m.tss_limit().slow_A
        # columns of the slow map probed with the converged long window
        cols = np.stack([m.step_slow(Xb[b], ytbar[i, b][None, :])
                         for b in range(px)], axis=1)
        worst_tss = max(worst_tss, float(np.max(np.abs(cols - K_comb))))
    elapsed = time.time() - t0
    _criterion(capsys, 2, "collapsed limits match 1e4-step rollout fixed points",
               {"comb_B_blocks_le_1e-6": worst_comb <= 1e-6,
                "tss_K_comb_xx_le_1e-6": worst_tss <= 1e-6,
                "runtime_lt_30s": elapsed < 30.0},
               [f"comb max err {worst_comb:.2e}, tss max err {worst_tss:.2e}, "
                f"{2 * n_models} models in {elapsed:.1f} s"])


# ---------------------------------------------------------------------------
# 3. stability measures


def test_criterion_3_stability_measures(capsys):
    rng = np.random.default_rng(0)
    checks = {}
    A = 0.5 * np.eye(4)
    checks["half_identity_radius_1e-6"] = \
        abs(complex_stability_radius(A) - 0.5) <= 1e-6
    checks["half_identity_kreiss_1e-3"] = \
        abs(kreiss_lower_bound(A) - 1.0) <= 1e-3

    worst_normal = 0.0
    for _ in range(20):
        d = rng.uniform(-0.9, 0.9, size=4)
        Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        N = Q @ np.diag(d) @ Q.T
        worst_normal = max(worst_normal, abs(
            complex_stability_radius(N) - (1.0 - np.max(np.abs(d)))))
    checks["normal_radius_1e-4"] = worst_normal <= 1e-4

    mono = True
    for _ in range(50):
        M = random_stable(rng, 4, rho=rng.uniform(0.4, 0.95))
        k_prev, r_prev = -np.inf, np.inf
        for levels in (0, 1, 2, 3):
            g = GridConfig(n_angle=64, n_radial=16, refine_levels=levels)
            k, r = kreiss_lower_bound(M, g), complex_stability_radius(M, g)
            mono &= (k >= k_prev - 1e-12) and (r <= r_prev + 1e-12)
            k_prev, r_prev = k, r
    checks["refinement_monotone_50_matrices"] = mono
    _criterion(capsys, 3, "pseudospectral stability measure contracts", checks,
               [f"normal-matrix worst radius error {worst_normal:.2e}"])


# ---------------------------------------------------------------------------
# 4. benchmark prediction accuracy


def test_criterion_4_prediction_rms(capsys, tss_full, comb_full):
    res_t, cfg_t, t_tss = tss_full
    res_c, cfg_c, t_comb = comb_full
    t0 = time.time()
    rms_t = prediction_rms_table(res_t.model, res_t.lifts, cfg_t, GRID,
                                 n_traj=100, n_steps=100, seed=1234)
    rms_c = prediction_rms_table(res_c.model, res_c.lifts, cfg_c, GRID,
                                 n_traj=100, n_steps=100, seed=1234)
    total = t_tss + t_comb + (time.time() - t0)
    _criterion(capsys, 4, "held-out 100-step prediction RMS",
               {"tss_slow_le_0.2": rms_t["slow_full"] <= 0.2,
                "tss_fast_le_0.1": rms_t["fast_y_limit"] <= 0.1,
                "comb_collapsed_slow_le_0.2": rms_c["slow_limit"] <= 0.2,
                "train_plus_eval_le_30min": total <= 1800.0},
               [f"tss slow {rms_t['slow_full']:.4f}, "
                f"fast {rms_t['fast_y_limit']:.4f}; "
                f"comb collapsed slow {rms_c['slow_limit']:.4f}; "
                f"total {total:.0f} s"])


# ---------------------------------------------------------------------------
# 5. cross-scale stability ordering


def _tss_measures(model):
    K_comb = model.tss_limit().slow_A
    return {"kreiss_eps": kreiss_lower_bound(model.K_xx),
            "kreiss_limit": kreiss_lower_bound(K_comb),
            "radius_eps": complex_stability_radius(model.K_xx),
            "radius_limit": complex_stability_radius(K_comb)}


def test_criterion_5_cross_scale_ordering(capsys, tss_full):
    result, _, _ = tss_full
    m = _tss_measures(result.model)
    info = [f"seed 0: kreiss {m['kreiss_eps']:.3g} -> {m['kreiss_limit']:.3g}, "
            f"radius {m['radius_eps']:.3g} -> {m['radius_limit']:.3g}"]
    for seed in range(1, 6):  # reported, not asserted
        res_s, _, _ = _train_full("tss", seed=seed)
        ms = _tss_measures(res_s.model)
        holds = ms["kreiss_limit"] > ms["kreiss_eps"] and \
            ms["radius_limit"] < ms["radius_eps"]
        info.append(
            f"seed {seed}: kreiss {ms['kreiss_eps']:.3g} -> "
            f"{ms['kreiss_limit']:.3g}, radius {ms['radius_eps']:.3g} -> "
            f"{ms['radius_limit']:.3g} (ordering {'holds' if holds else 'reversed'})")
    _criterion(capsys, 5, "scale collapse is destabilizing (tss slow map)",
               {"kreiss_limit_gt_eps": m["kreiss_limit"] > m["kreiss_eps"],
                "radius_limit_lt_eps": m["radius_limit"] < m["radius_eps"]},
               info)


# ---------------------------------------------------------------------------
# 6. hierarchical LQR vs PI


def test_criterion_6_hier_policy_study(capsys, hier_full):
    result, cfg, t_train = hier_full
    t0 = time.time()
    study = run_policy_study("hier", result.model, result.lifts, cfg, GRID,
                             result.policy, n_starts=100, seed=2024)
    elapsed = t_train + (time.time() - t0)
    s = study.summary
    _criterion(capsys, 6, "hier: Koopman-LQR beats PI, both near scan optimum",
               {"median_improvement_gt_20pct":
                    s["improvement_lqr_vs_pi"]["median"] > 0.20,
                "median_gap_pi_lt_2pct": s["gap_pi"]["median"] < 0.02,
                "median_gap_lqr_lt_2pct": s["gap_lqr"]["median"] < 0.02,
                "runtime_lt_10min": elapsed < 600.0},
               [f"improvement median {s['improvement_lqr_vs_pi']['median']:.3f}, "
                f"gaps {s['gap_pi']['median']:.4f} / {s['gap_lqr']['median']:.4f}, "
                f"{elapsed:.0f} s"])


# ---------------------------------------------------------------------------
# 7. combined-case claims


def test_criterion_7_comb_policy_study(capsys, comb_full):
    result, cfg, t_train = comb_full
    t0 = time.time()
    study = run_policy_study("comb", result.model, result.lifts, cfg, GRID,
                             result.policy, n_starts=100, seed=2024)
    elapsed = t_train + (time.time() - t0)
    s = study.summary
    ratio = s["ratio_lqr_vs_pi"]["median"]
    _criterion(capsys, 7, "comb: LQR/PI realized parity, both beat constants",
               {"ratio_within_10pct": 0.9 <= ratio <= 1.1,
                "pi_beats_const_gt_20pct":
                    s["improvement_pi_vs_const"]["median"] > 0.20,
                "lqr_beats_const_gt_20pct":
                    s["improvement_lqr_vs_const"]["median"] > 0.20,
                "runtime_lt_15min": elapsed < 900.0},
               [f"ratio median {ratio:.3f}, improvements "
                f"{s['improvement_pi_vs_const']['median']:.3f} / "
                f"{s['improvement_lqr_vs_const']['median']:.3f}, {elapsed:.0f} s"])


# ---------------------------------------------------------------------------
# 8. property suites


def test_criterion_8_property_suites(capsys):
    rng = np.random.default_rng(0)
    checks = {}

    # state-inclusion exactness
    lf = LiftingMap.create(2, 3, 8, rng)
    lf.W2 += 0.5 * rng.standard_normal(lf.W2.shape)
    V = rng.standard_normal((20, 2))
    checks["state_inclusion_exact"] = np.array_equal(lf.lift(V)[:, :2], V)

    # analytic gradients vs finite differences at 1e-4
    lifts = {"x": LiftingMap.create(2, 2, 4, rng),
             "y": LiftingMap.create(2, 2, 4, rng)}
    for l in lifts.values():
        l.W2 += 0.3 * rng.standard_normal(l.W2.shape)
    model = KoopmanBlocks(
        form="tss", n_px=4, n_py=4, n_pw=0, n_pu=0,
        K_xx=random_stable(rng, 4, 0.6), K_xy=0.2 * rng.standard_normal((4, 4)),
        K_yy=random_stable(rng, 4, 0.7), K_yx=0.2 * rng.standard_normal((4, 4)))
    batch = {"Y": rng.uniform(-1, 1, size=(3, 4, 2)),
             "X0": rng.uniform(-1, 1, size=(3, 2)),
             "XT": rng.uniform(-1, 1, size=(3, 2))}
    _, grads = prediction_loss(model, lifts, batch)
    eps, ok_grad = 1e-6, True
    for name, arr in (("K_yy", model.K_yy), ("K_xy", model.K_xy),
                      ("lift_y.W1", lifts["y"].W1)):
        flat = arr.reshape(-1)
        for i in rng.choice(flat.size, size=3, replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            hi = prediction_loss(model, lifts, batch)[0]["total"]
            flat[i] = orig - eps
            lo = prediction_loss(model, lifts, batch)[0]["total"]
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            gi = np.asarray(grads[name]).reshape(-1)[i]
            ok_grad &= abs(gi - fd) <= 1e-4 * max(1.0, abs(fd))
    checks["gradients_match_fd_1e-4"] = ok_grad

    # Bellman stationarity and local minimality
    hmodel = make_hier(rng)
    cost = regulator_cost(hmodel.n_py, hmodel.n_pw)
    policy = solve_bellman(hmodel, cost)
    res = bellman_residuals(policy, hmodel, cost, samples=5, rng=rng)
    checks["bellman_stationarity"] = res["quadratic"] < 1e-7 and \
        res["linear"] < 1e-7
    psi_y = rng.standard_normal(hmodel.n_py)
    psi_u = rng.standard_normal(1)
    w_star = policy.feedback(psi_y, psi_u=psi_u)
    base = bellman_rhs(hmodel, cost, policy, psi_y, w_star, psi_u=psi_u)
    checks["bellman_local_minimality"] = all(
        bellman_rhs(hmodel, cost, policy, psi_y,
                    w_star + 0.1 * rng.standard_normal(hmodel.n_pw),
                    psi_u=psi_u) >= base - 1e-9
        for _ in range(20))

    # spectral projection contract rho <= 1 - delta
    delta = 0.01
    wild = KoopmanBlocks(
        form="comb", n_px=3, n_py=3, n_pw=2, n_pu=1,
        K_xx=random_stable(rng, 3, 1.5), K_xy=rng.standard_normal((3, 3)),
        K_yy=random_stable(rng, 3, 1.2), K_yx=rng.standard_normal((3, 3)),
        K_yw=rng.standard_normal((3, 2)), K_ww=random_stable(rng, 2, 1.4),
        K_wy=rng.standard_normal((2, 3)), K_wx=rng.standard_normal((2, 3)),
        K_wu=rng.standard_normal((2, 1)))
    stabilize(wild, delta)
    cap = 1.0 - delta + 1e-10
    checks["stabilize_rho_le_1_minus_delta"] = (
        spectral_radius(wild.K_xx) <= cap and
        spectral_radius(wild.K_yy) <= cap and
        spectral_radius(wild.fast_matrix()[0]) <= cap)

    # OCP feasibility and monotone improvement over the best constant
    limit = make_limit(rng)
    ocost = make_cost(rng)
    spec = OcpSpec(horizon=10, dynamics="collapsed", cost=ocost,
                   x_lo=-np.inf, x_hi=np.inf)
    psi0 = {"x": rng.standard_normal(limit.n_px)}
    sol = solve_ocp(spec, limit=limit, psi0=psi0)
    _, c_const = best_constant_policy(spec, limit=limit, psi0=psi0)
    checks["ocp_feasible"] = bool(np.all(sol.u >= spec.u_lo - 1e-12)
                                  and np.all(sol.u <= spec.u_hi + 1e-12)
                                  and sol.converged)
    checks["ocp_improves_on_best_constant"] = sol.cost <= c_const + 1e-8

    _criterion(capsys, 8, "property suites under the default seed", checks)
