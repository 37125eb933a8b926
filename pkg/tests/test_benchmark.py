"""Dynamics, integrator and trajectory-container tests."""

import csv

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from kooplift import (DivergenceError, ScaleState, SystemConfig, TimeGrid,
                      fast_equilibrium_state, integrate, integrate_batch, rhs)
from kooplift.benchmark import save_trajectories


def test_rhs_hand_check_comb():
    cfg = SystemConfig(variant="comb", epsilon_rate=100.0)
    v = np.array([0.3, -0.2, 0.5, 0.1, 0.4])  # x1 x2 y1 y2 w
    u = 0.2
    out = rhs(v, cfg, u)
    x1, x2, y1, y2, w = v
    assert out[0] == pytest.approx(x2)
    assert out[1] == pytest.approx(-0.5 * (1 - x1**2) * x2 - x1 + y1)
    assert out[2] == pytest.approx(100.0 * y2)
    assert out[3] == pytest.approx(
        100.0 * (-2 * y2 - y1 - y1**3 + 0.5 * x2**2 - 2 * w))
    # PI channel: k1 = 1/rate cancels the rate multiplier on y2
    assert out[4] == pytest.approx(y2 + (y1 - u))


def test_rhs_variant_shapes():
    for variant, n in (("tss", 4), ("hier", 3), ("comb", 5)):
        cfg = SystemConfig(variant=variant)
        v = np.linspace(0.1, 0.5, n)
        assert rhs(v, cfg, 0.1).shape == (n,)
    with pytest.raises(ValueError):
        rhs(np.zeros(3), SystemConfig(variant="tss"))


def test_rhs_batched_matches_loop():
    cfg = SystemConfig(variant="comb")
    rng = np.random.default_rng(0)
    V = rng.uniform(-1, 1, size=(7, 5))
    u = rng.uniform(-1, 1, size=7)
    batched = rhs(V, cfg, u)
    for i in range(7):
        np.testing.assert_allclose(batched[i], rhs(V[i], cfg, u[i]), rtol=1e-14)


def test_rk4_matches_scipy_reference():
    cfg = SystemConfig(variant="comb")
    grid = TimeGrid(0.1, 10)
    v0 = np.array([0.4, -0.3, 0.2, 0.1, -0.2])
    u = 0.3
    traj, ok = integrate_batch(v0[None, :], np.full((1, 1), u), grid, 1, cfg)
    assert ok.all()
    ref = solve_ivp(lambda t, v: rhs(v, cfg, u), (0.0, grid.dt_slow), v0,
                    rtol=1e-11, atol=1e-12, dense_output=True)
    np.testing.assert_allclose(traj.states[0, -1], ref.y[:, -1], atol=1e-6)
    # intermediate fast samples line up as well
    mid = ref.sol(grid.tau * 5)
    np.testing.assert_allclose(traj.states[0, 5], mid, atol=1e-6)


@pytest.mark.parametrize("variant", ["tss", "hier", "comb"])
def test_fast_equilibrium_zeroes_fast_rhs(variant):
    cfg = SystemConfig(variant=variant)
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, size=(5, 2)) if cfg.has_x else None
    u = rng.uniform(-1, 1, size=5)
    v = fast_equilibrium_state(cfg, x, u)
    d = rhs(v, cfg, u)
    np.testing.assert_allclose(d[..., cfg.y_slice], 0.0, atol=1e-10)
    if cfg.has_w:
        np.testing.assert_allclose(d[..., cfg.w_index], 0.0, atol=1e-10)
    if cfg.has_x:
        np.testing.assert_allclose(v[..., :2], x)  # slow states untouched


def test_divergence_raises_and_masks():
    cfg = SystemConfig(variant="tss")
    grid = TimeGrid(0.1, 10)
    bad = np.array([[1e5, 1e5, 0.0, 0.0]])
    with pytest.raises(DivergenceError):
        integrate_batch(bad, np.zeros((1, 1)), grid, 1, cfg)
    good = np.array([[0.1, 0.1, 0.1, 0.1]])
    traj, ok = integrate_batch(np.vstack([bad, good]), np.zeros((2, 1)),
                               grid, 1, cfg, on_divergence="mask")
    assert ok.tolist() == [False, True]
    assert np.isnan(traj.states[0, -1]).all()
    assert np.isfinite(traj.states[1]).all()


def test_scale_state_pack_unpack_roundtrip():
    cfg = SystemConfig(variant="comb")
    st = ScaleState(x=[0.1, 0.2], y=[0.3, 0.4], w=0.5, u=0.6, t=1.0)
    v = st.pack(cfg)
    np.testing.assert_array_equal(v, [0.1, 0.2, 0.3, 0.4, 0.5])
    back = ScaleState.unpack(v, cfg, u=0.6)
    np.testing.assert_array_equal(back.pack(cfg), v)
    with pytest.raises(ValueError):
        ScaleState(x=[0.1, 0.2], y=[0.3, 0.4]).pack(cfg)  # missing w
    with pytest.raises(ValueError):
        ScaleState(x=[0.1], y=[0.3, 0.4], w=0.0).pack(cfg)


def test_integrate_single_and_save(tmp_path):
    cfg = SystemConfig(variant="hier")
    grid = TimeGrid(0.1, 5)
    st = ScaleState(x=[], y=[0.2, 0.1], w=0.0)
    traj = integrate(st, 0.5, grid, 3, cfg)
    assert traj.states.shape == (1, 16, 3)
    assert traj.fast_y().shape == (1, 16, 2)
    path = tmp_path / "traj.csv"
    save_trajectories(traj, path, seed=7)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["t", "y1", "y2", "w", "u", "traj_id"]
    assert len(rows) == 1 + 16
    assert path.with_suffix(".json").exists()


def test_timegrid_and_config_validation():
    with pytest.raises(ValueError):
        TimeGrid(0.0, 10)
    with pytest.raises(ValueError):
        SystemConfig(variant="nope")
    with pytest.raises(ValueError):
        SystemConfig(epsilon_rate=0.5)
    assert TimeGrid(0.1, 100).tau == pytest.approx(1e-3)
    assert SystemConfig().k1 == pytest.approx(0.01)
