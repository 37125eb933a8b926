"""Training-loop tests: dataset generation, gradient correctness, stability
projection, determinism and artifact output."""

import numpy as np
import pytest

from kooplift import (KoopmanBlocks, LiftingMap, SystemConfig, TimeGrid,
                      TrainConfig, benchmark_train_config, generate_dataset,
                      prediction_rms_table, save_dataset, save_history,
                      spectral_radius, train)
from kooplift.training import prediction_loss, stabilize, stabilize_limit

from conftest import random_stable


# ---------------------------------------------------------------------------
# dataset generation


def test_generate_dataset_shapes_and_determinism():
    cfg = SystemConfig(variant="comb")
    grid = TimeGrid(0.1, 10)
    ds = generate_dataset(cfg, grid, n_traj=20, seed=5)
    assert ds.Y.shape == (20, 11, 2)
    assert ds.W.shape == (20, 11)
    assert ds.X0.shape == ds.XT.shape == (20, 2)
    assert ds.U.shape == (20,)
    ds2 = generate_dataset(cfg, grid, n_traj=20, seed=5)
    np.testing.assert_array_equal(ds.Y, ds2.Y)
    np.testing.assert_array_equal(ds.U, ds2.U)


def test_generate_dataset_hier_keeps_one_step():
    cfg = SystemConfig(variant="hier")
    ds = generate_dataset(cfg, TimeGrid(0.1, 10), n_traj=8, seed=0)
    assert ds.Y.shape == (8, 2, 2)
    assert ds.W.shape == (8, 2)
    assert ds.X0 is None


def test_save_dataset_and_history(tmp_path):
    cfg = SystemConfig(variant="tss")
    ds = generate_dataset(cfg, TimeGrid(0.1, 5), n_traj=4, seed=1)
    save_dataset(ds, tmp_path / "ds.csv")
    header = (tmp_path / "ds.csv").read_text().splitlines()[0]
    assert header == "t,x1,x2,y1,y2,u,traj_id"
    assert (tmp_path / "ds.json").exists()
    hist = [{"epoch": 0, "total": 1.0}, {"epoch": 1, "total": 0.5}]
    save_history(hist, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().strip().splitlines()
    assert lines[0].split(",")[0] == "epoch"
    assert len(lines) == 3


# ---------------------------------------------------------------------------
# gradient checks (finite differences at 1e-4)


def _fd_check(loss_fn, arrays: dict, grads: dict, n_probe=4, eps=1e-6):
    rng = np.random.default_rng(0)
    for name, arr in arrays.items():
        assert name in grads, f"missing gradient for {name}"
        g = np.atleast_1d(np.asarray(grads[name]))
        flat = arr.reshape(-1)
        idxs = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn()
            flat[i] = orig - eps
            lo = loss_fn()
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            gi = g.reshape(-1)[i]
            assert abs(gi - fd) <= 1e-4 * max(1.0, abs(fd)), \
                f"{name}[{i}]: analytic {gi} vs fd {fd}"


def _jittered(lift, rng, s=0.3):
    lift.W2 += s * rng.standard_normal(lift.W2.shape)
    return lift


def test_tss_loss_gradients_match_fd():
    rng = np.random.default_rng(1)
    lifts = {"x": _jittered(LiftingMap.create(2, 2, 4, rng), rng),
             "y": _jittered(LiftingMap.create(2, 2, 4, rng), rng)}
    model = KoopmanBlocks(
        form="tss", n_px=4, n_py=4, n_pw=0, n_pu=0,
        K_xx=random_stable(rng, 4, 0.6), K_xy=0.2 * rng.standard_normal((4, 4)),
        K_yy=random_stable(rng, 4, 0.7), K_yx=0.2 * rng.standard_normal((4, 4)))
    batch = {"Y": rng.uniform(-1, 1, size=(3, 4, 2)),
             "X0": rng.uniform(-1, 1, size=(3, 2)),
             "XT": rng.uniform(-1, 1, size=(3, 2))}
    terms, grads = prediction_loss(model, lifts, batch)

    def loss():
        return prediction_loss(model, lifts, batch)[0]["total"]

    arrays = {"K_xx": model.K_xx, "K_xy": model.K_xy,
              "K_yy": model.K_yy, "K_yx": model.K_yx,
              "lift_x.W1": lifts["x"].W1, "lift_x.W2": lifts["x"].W2,
              "lift_y.W1": lifts["y"].W1, "lift_y.b2": lifts["y"].b2}
    _fd_check(loss, arrays, grads)


def test_comb_loss_gradients_match_fd():
    rng = np.random.default_rng(2)
    lifts = {"x": _jittered(LiftingMap.create(2, 2, 4, rng), rng),
             "y": _jittered(LiftingMap.create(2, 2, 4, rng), rng),
             "w": _jittered(LiftingMap.create(1, 1, 4, rng), rng)}
    model = KoopmanBlocks(
        form="comb", n_px=4, n_py=4, n_pw=2, n_pu=1,
        K_xx=random_stable(rng, 4, 0.6), K_xy=0.2 * rng.standard_normal((4, 4)),
        K_xw=0.2 * rng.standard_normal((4, 2)),
        K_yy=random_stable(rng, 4, 0.7), K_yx=0.2 * rng.standard_normal((4, 4)),
        K_yw=0.2 * rng.standard_normal((4, 2)),
        K_ww=random_stable(rng, 2, 0.5), K_wy=0.2 * rng.standard_normal((2, 4)),
        K_wx=0.2 * rng.standard_normal((2, 4)),
        K_wu=0.2 * rng.standard_normal((2, 1)))
    batch = {"Y": rng.uniform(-1, 1, size=(3, 3, 2)),
             "W": rng.uniform(-1, 1, size=(3, 3)),
             "X0": rng.uniform(-1, 1, size=(3, 2)),
             "XT": rng.uniform(-1, 1, size=(3, 2)),
             "U": rng.uniform(-1, 1, size=3)}
    _, grads = prediction_loss(model, lifts, batch)

    def loss():
        return prediction_loss(model, lifts, batch)[0]["total"]

    arrays = {"K_yy": model.K_yy, "K_yw": model.K_yw, "K_ww": model.K_ww,
              "K_wy": model.K_wy, "K_wu": model.K_wu, "K_xx": model.K_xx,
              "K_xy": model.K_xy, "K_xw": model.K_xw, "K_yx": model.K_yx,
              "K_wx": model.K_wx, "lift_w.W2": lifts["w"].W2,
              "lift_y.W1": lifts["y"].W1, "lift_x.W2": lifts["x"].W2}
    _fd_check(loss, arrays, grads)


def test_hier_loss_gradients_match_fd():
    rng = np.random.default_rng(3)
    lifts = {"y": _jittered(LiftingMap.create(2, 2, 4, rng), rng),
             "w": _jittered(LiftingMap.create(1, 1, 4, rng), rng)}
    model = KoopmanBlocks(
        form="hier", n_px=0, n_py=4, n_pw=2, n_pu=1,
        K_yy=random_stable(rng, 4, 0.7), K_yw=0.2 * rng.standard_normal((4, 2)),
        K_ww=random_stable(rng, 2, 0.5), K_wy=0.2 * rng.standard_normal((2, 4)),
        K_wu=0.2 * rng.standard_normal((2, 1)))
    batch = {"Y": rng.uniform(-1, 1, size=(4, 2, 2)),
             "W": rng.uniform(-1, 1, size=(4, 2)),
             "U": rng.uniform(-1, 1, size=4)}
    _, grads = prediction_loss(model, lifts, batch)

    def loss():
        return prediction_loss(model, lifts, batch)[0]["total"]

    arrays = {"K_yy": model.K_yy, "K_yw": model.K_yw, "K_ww": model.K_ww,
              "K_wy": model.K_wy, "K_wu": model.K_wu,
              "lift_y.W2": lifts["y"].W2, "lift_w.W1": lifts["w"].W1}
    _fd_check(loss, arrays, grads)


# ---------------------------------------------------------------------------
# stability projection


def test_stabilize_projects_into_radius_cap():
    rng = np.random.default_rng(4)
    delta = 0.01
    cap = 1.0 - delta
    model = KoopmanBlocks(
        form="comb", n_px=3, n_py=3, n_pw=2, n_pu=1,
        K_xx=random_stable(rng, 3, 1.4), K_xy=rng.standard_normal((3, 3)),
        K_yy=random_stable(rng, 3, 1.2), K_yx=rng.standard_normal((3, 3)),
        K_yw=rng.standard_normal((3, 2)), K_ww=random_stable(rng, 2, 1.3),
        K_wy=rng.standard_normal((2, 3)), K_wx=rng.standard_normal((2, 3)),
        K_wu=rng.standard_normal((2, 1)))
    report = stabilize(model, delta)
    assert spectral_radius(model.K_xx) <= cap + 1e-10
    assert spectral_radius(model.K_yy) <= cap + 1e-10
    assert spectral_radius(model.fast_matrix()[0]) <= cap + 1e-10
    assert "K_xx" in report and "K_yy" in report


def test_stabilize_leaves_stable_blocks_untouched():
    rng = np.random.default_rng(5)
    model = KoopmanBlocks(
        form="tss", n_px=2, n_py=2, n_pw=0, n_pu=0,
        K_xx=random_stable(rng, 2, 0.5), K_xy=0.1 * rng.standard_normal((2, 2)),
        K_yy=random_stable(rng, 2, 0.5), K_yx=0.1 * rng.standard_normal((2, 2)))
    before = {k: getattr(model, k).copy() for k in ("K_xx", "K_yy")}
    assert stabilize(model, 0.01) == {}
    for k, v in before.items():
        np.testing.assert_array_equal(getattr(model, k), v)


def test_stabilize_limit_caps_collapsed_map():
    rng = np.random.default_rng(6)
    delta = 0.01
    model = KoopmanBlocks(
        form="tss", n_px=2, n_py=2, n_pw=0, n_pu=0,
        K_xx=random_stable(rng, 2, 0.9), K_xy=2.0 * rng.standard_normal((2, 2)),
        K_yy=random_stable(rng, 2, 0.5), K_yx=2.0 * rng.standard_normal((2, 2)))
    report = stabilize_limit(model, delta)
    assert spectral_radius(model.tss_limit().slow_A) <= 1.0 - delta + 1e-10
    assert report["shrinks"] >= 0


# ---------------------------------------------------------------------------
# training driver


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(delta=0.5)
    with pytest.raises(ValueError):
        TrainConfig(w_fast=-1.0)
    cfg = benchmark_train_config("comb", epochs=3)
    assert cfg.epochs == 3 and cfg.identity_psi_w
    assert not benchmark_train_config("tss").identity_psi_w


def test_train_is_deterministic():
    sys_cfg = SystemConfig(variant="tss")
    grid = TimeGrid(0.1, 20)
    cfg = TrainConfig(epochs=1, seed=0)
    runs = []
    for _ in range(2):
        ds = generate_dataset(sys_cfg, grid, n_traj=40, seed=0)
        runs.append(train("tss", ds, cfg))
    np.testing.assert_array_equal(runs[0].model.K_xx, runs[1].model.K_xx)
    np.testing.assert_array_equal(runs[0].model.K_yy, runs[1].model.K_yy)
    np.testing.assert_array_equal(runs[0].lifts["y"].W2, runs[1].lifts["y"].W2)
    assert runs[0].history[0]["val_total"] == runs[1].history[0]["val_total"]


def test_train_rejects_variant_mismatch():
    ds = generate_dataset(SystemConfig(variant="tss"), TimeGrid(0.1, 5),
                          n_traj=4, seed=0)
    with pytest.raises(ValueError):
        train("comb", ds, TrainConfig(epochs=1))


def test_tiny_tss_pipeline(tiny_tss, grid):
    result, sys_cfg = tiny_tss
    assert result.policy is None  # tss has no actuator loop
    assert len(result.history) == 2
    assert all(np.isfinite(rec["val_total"]) for rec in result.history)
    assert spectral_radius(result.model.K_yy) < 1.0
    rms = prediction_rms_table(result.model, result.lifts, sys_cfg, grid,
                               n_traj=5, n_steps=10)
    assert set(rms) == {"slow_full", "slow_limit", "fast_y_limit"}
    assert all(np.isfinite(v) for v in rms.values())


def test_tiny_hier_pipeline(tiny_hier, grid):
    result, sys_cfg = tiny_hier
    assert result.policy is not None
    assert result.policy.closed_loop_radius < 1.0
    assert result.lifts["w"].n_nonlinear == 0  # identity psi_w
    rms = prediction_rms_table(result.model, result.lifts, sys_cfg, grid,
                               n_traj=5, n_steps=50)
    assert set(rms) == {"fast_y_full", "fast_w_full"}
    assert all(np.isfinite(v) for v in rms.values())
