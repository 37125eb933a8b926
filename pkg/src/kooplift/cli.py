"""Command-line front end: simulate -> train -> analyze -> optimize -> report.

Every run is a pure function of (config, seed): rerunning a subcommand with
the same configuration produces byte-identical CSV output.  Every output file
embeds the configuration hash and the seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import click
import numpy as np
import yaml

log = logging.getLogger("kooplift.cli")

DEFAULT_CONFIG: dict = {
    "variant": "comb",
    "seed": 0,
    "system": {"epsilon_rate": 100.0, "k1": None, "k2": 1.0,
               "couple_x_to_y": True, "couple_y_to_x": True},
    "grid": {"dt_slow": 0.1, "m": 100},
    "dataset": {"n_traj": 10_000},
    "train": {},  # overrides on top of benchmark_train_config(variant)
    "eval": {"n_traj": 100, "n_steps": 100, "seed": 1234,
             "fast_init": "equilibrium"},
    "stability": {"n_angle": 256, "n_radial": 64, "refine_levels": 3,
                  "refine_factor": 4, "r_max_scale": 10.0},
    "study": {"n_starts": 100, "seed": 2024, "horizon": None,
              "scan_resolution": 0.01, "substeps": 5, "u_rate_penalty": 15.0},
    "ocp": {"horizon": 100, "u_lo": -1.0, "u_hi": 1.0, "actuator": "pi",
            "dynamics": "collapsed", "constant_u": False,
            "u_rate_penalty": 0.0},
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, default=float)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict],
               cfg_hash: str, seed: int) -> None:
    """RFC-4180 CSV with config hash + seed embedded as trailing columns."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(fieldnames + ["config_hash", "seed"])
        for row in rows:
            cells = []
            for k in fieldnames:
                v = row[k]
                cells.append(repr(float(v)) if isinstance(v, (float, np.floating))
                             else v)
            wr.writerow(cells + [cfg_hash, seed])


def _write_json(path: Path, obj: dict) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=float)
        f.write("\n")


def _objects(cfg: dict):
    from .benchmark import SystemConfig, TimeGrid
    sc = {k: v for k, v in cfg["system"].items()}
    system = SystemConfig(variant=cfg["variant"], **sc)
    grid = TimeGrid(**cfg["grid"])
    return system, grid


def _grid_config(cfg: dict):
    from .stability import GridConfig
    return GridConfig(**cfg["stability"])


def _train_config(cfg: dict):
    from .training import benchmark_train_config
    return benchmark_train_config(cfg["variant"], seed=cfg["seed"],
                                  **cfg["train"])


def _save_policy(path: Path, policy) -> None:
    np.savez(path, P=policy.P, F=policy.F, P_x=policy.P_x, P_u=policy.P_u,
             p_0=policy.p_0, D_x=policy.D_x, D_u=policy.D_u, d_0=policy.d_0,
             closed_loop_radius=policy.closed_loop_radius,
             iterations=policy.iterations, residual=policy.residual)


def _load_policy(path: Path):
    from .lqr import LqrPolicy
    with np.load(path) as d:
        return LqrPolicy(P=d["P"], F=d["F"], P_x=d["P_x"], P_u=d["P_u"],
                         p_0=d["p_0"], D_x=d["D_x"], D_u=d["D_u"], d_0=d["d_0"],
                         closed_loop_radius=float(d["closed_loop_radius"]),
                         iterations=int(d["iterations"]),
                         residual=float(d["residual"]))


def save_bundle(outdir: Path, result, cfg: dict) -> None:
    """Persist a trained model (blocks + lifts + policy + log) to a directory."""
    outdir.mkdir(parents=True, exist_ok=True)
    result.model.save(outdir / "model.npz")
    for g, lf in result.lifts.items():
        lf.save(outdir / f"lift_{g}.json")
    if result.policy is not None:
        _save_policy(outdir / "policy.npz", result.policy)
    from .training import save_history
    save_history(result.history, outdir / "train_log.csv")
    _write_json(outdir / "experiment.json", {
        "config": cfg, "config_hash": _config_hash(cfg), "seed": cfg["seed"],
        "val_losses": result.val_losses,
    })


def load_bundle(outdir: Path):
    """Load (model, lifts, policy, experiment-metadata) from a directory."""
    from .lifting import LiftingMap
    from .models import KoopmanBlocks
    outdir = Path(outdir)
    model = KoopmanBlocks.load(outdir / "model.npz")
    lifts = {}
    for g in ("x", "y", "w"):
        p = outdir / f"lift_{g}.json"
        if p.exists():
            lifts[g] = LiftingMap.load(p)
    policy = None
    if (outdir / "policy.npz").exists():
        policy = _load_policy(outdir / "policy.npz")
    meta = json.loads((outdir / "experiment.json").read_text())
    return model, lifts, policy, meta


def _train_pipeline(cfg: dict):
    from .training import generate_dataset, train
    system, grid = _objects(cfg)
    ds = generate_dataset(system, grid, n_traj=cfg["dataset"]["n_traj"],
                          seed=cfg["seed"])
    return train(cfg["variant"], ds, _train_config(cfg)), system, grid


def _stability_matrices(cfg: dict, model, policy):
    """Labeled matrices per variant: the eps > 0 slow (or fast) map against
    the collapsed limit map(s)."""
    variant = cfg["variant"]
    if variant == "tss":
        return [("K_xx", model.K_xx),
                ("K_comb_xx", model.tss_limit().slow_A)]
    if variant == "comb":
        mats = [("K_xx", model.K_xx),
                ("B_xx_pi", model.combined_limit().slow_A)]
        if policy is not None:
            mats.append(("B_xx_lqr", model.combined_limit(policy).slow_A))
        return mats
    mats = [("K_yy", model.K_yy)]
    if policy is not None:
        from .models import spectral_radius  # noqa: F401  (shape check only)
        E = np.eye(model.n_py) - model.K_yy
        mats.append(("A_cl", model.K_yy - E @ model.K_yw @ policy.F))
    return mats


def _stability_rows(reports) -> tuple[list[str], list[dict]]:
    fields = ["measure"] + [r.label for r in reports]
    rows = []
    for key, attr in (("max_initial_transient_growth", "log_norm"),
                      ("max_transient_growth_lower_bound", "kreiss_lb"),
                      ("complex_stability_radius", "stability_radius")):
        rows.append({"measure": key,
                     **{r.label: getattr(r, attr) for r in reports}})
    return fields, rows


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None, help="YAML configuration file; flags override it.")
@click.option("--seed", type=int, default=None, help="Master seed override.")
@click.option("--out", "out_dir", type=click.Path(), default="out",
              help="Output directory (created if missing).")
@click.option("--threads", type=int, default=None,
              help="Bound BLAS/OpenMP parallelism inside numerical kernels.")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
@click.pass_context
def main(ctx, config_path, seed, out_dir, threads, verbose):
    """Structured Koopman models: learning, stability analysis and lifted
    optimal control on the two-time-scale benchmark."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)
        try:
            import threadpoolctl
            threadpoolctl.threadpool_limits(threads)
        except ImportError:
            pass
    cfg = DEFAULT_CONFIG
    if config_path:
        with open(config_path) as f:
            cfg = _merge(cfg, yaml.safe_load(f) or {})
    if seed is not None:
        cfg = _merge(cfg, {"seed": seed})
    ctx.obj = {"cfg": cfg, "out": Path(out_dir)}


def _ctx(ctx) -> tuple[dict, Path, str]:
    cfg, out = ctx.obj["cfg"], ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out, _config_hash(cfg)


@main.command("gen-data")
@click.option("--n-traj", type=int, default=None, help="Trajectory count.")
@click.pass_context
def gen_data(ctx, n_traj):
    """Generate the training dataset (columnar CSV + JSON sidecar)."""
    cfg, out, h = _ctx(ctx)
    if n_traj is not None:
        cfg = _merge(cfg, {"dataset": {"n_traj": n_traj}})
    from .training import generate_dataset, save_dataset
    system, grid = _objects(cfg)
    ds = generate_dataset(system, grid, n_traj=cfg["dataset"]["n_traj"],
                          seed=cfg["seed"])
    save_dataset(ds, out / "dataset.csv")
    _write_json(out / "dataset.meta.json",
                {"config_hash": h, "seed": cfg["seed"],
                 "n_traj": ds.n_traj, "resampled": ds.resampled,
                 "stats": ds.stats})
    click.echo(f"wrote {out / 'dataset.csv'} ({ds.n_traj} trajectories)")


@main.command()
@click.option("--steps", type=int, default=100, help="Slow steps to simulate.")
@click.option("--u", "u_const", type=float, default=0.0,
              help="Constant control input.")
@click.option("--v0", "v0_str", type=str, default=None,
              help="Comma-separated initial state (defaults to a seeded draw).")
@click.pass_context
def simulate(ctx, steps, u_const, v0_str):
    """Integrate one benchmark trajectory and write it as CSV."""
    cfg, out, h = _ctx(ctx)
    from .benchmark import integrate_batch, save_trajectories
    system, grid = _objects(cfg)
    if v0_str is not None:
        v0 = np.array([float(s) for s in v0_str.split(",")], dtype=float)
    else:
        v0 = np.random.default_rng(cfg["seed"]).uniform(-1, 1, system.n_state)
    u_seq = np.full((1, steps), u_const)
    traj, ok = integrate_batch(v0[None, :], u_seq, grid, steps, system,
                               on_divergence="mask")
    if not ok[0]:
        click.echo("trajectory diverged; partial samples are NaN", err=True)
    save_trajectories(traj, out / "trajectory.csv", seed=cfg["seed"])
    click.echo(f"wrote {out / 'trajectory.csv'} ({steps} slow steps)")


@main.command()
@click.pass_context
def train(ctx):
    """Train the lifted model for the configured variant; save the bundle."""
    cfg, out, h = _ctx(ctx)
    t0 = time.time()
    result, system, grid = _train_pipeline(cfg)
    save_bundle(out, result, cfg)
    click.echo(f"trained {cfg['variant']} in {time.time() - t0:.0f}s; "
               f"val losses {result.val_losses}")
    click.echo(f"bundle written to {out}")


@main.command()
@click.option("--model", "model_dir", type=click.Path(exists=True),
              default=None, help="Trained bundle directory (default: --out).")
@click.pass_context
def stability(ctx, model_dir):
    """Pseudospectral stability table for the trained model's slow maps."""
    cfg, out, h = _ctx(ctx)
    from .stability import format_table, stability_table
    model, lifts, policy, _ = load_bundle(Path(model_dir or out))
    reports = stability_table(_stability_matrices(cfg, model, policy),
                              _grid_config(cfg))
    fields, rows = _stability_rows(reports)
    _write_csv(out / "stability_table.csv", fields, rows, h, cfg["seed"])
    click.echo(format_table(reports))
    click.echo(f"wrote {out / 'stability_table.csv'}")


@main.command("lqr-solve")
@click.option("--model", "model_dir", type=click.Path(exists=True),
              default=None, help="Trained bundle directory (default: --out).")
@click.pass_context
def lqr_solve(ctx, model_dir):
    """Solve the infinite-horizon Bellman equation for the actuator loop."""
    cfg, out, h = _ctx(ctx)
    from .costs import lqr_tracking_cost
    from .lqr import solve_bellman
    model, lifts, policy, _ = load_bundle(Path(model_dir or out))
    _, grid = _objects(cfg)
    dims = {"u": model.n_pu, "w": model.n_pw, "y": model.n_py, "x": model.n_px}
    cost = lqr_tracking_cost(dims, step=grid.tau)
    pol = solve_bellman(model, cost, P0=policy.P if policy else None)
    _save_policy(out / "policy.npz", pol)
    _write_json(out / "lqr_summary.json", {
        "config_hash": h, "seed": cfg["seed"],
        "closed_loop_radius": pol.closed_loop_radius,
        "iterations": pol.iterations, "residual": pol.residual,
        "F_max_abs": float(np.max(np.abs(pol.F))),
    })
    click.echo(f"closed-loop spectral radius {pol.closed_loop_radius:.6f} "
               f"({pol.iterations} iterations)")
    click.echo(f"wrote {out / 'policy.npz'} and {out / 'lqr_summary.json'}")


@main.command()
@click.option("--model", "model_dir", type=click.Path(exists=True),
              default=None, help="Trained bundle directory (default: --out).")
@click.option("--x0", "x0_str", type=str, default=None,
              help="Comma-separated initial state (defaults to a seeded draw).")
@click.pass_context
def ocp(ctx, model_dir, x0_str):
    """Solve one box-constrained OCP from a given start."""
    cfg, out, h = _ctx(ctx)
    from .costs import benchmark_running_cost
    from .models import collapse_cost
    from .ocp import OcpSpec, solve_ocp
    model, lifts, policy, _ = load_bundle(Path(model_dir or out))
    system, grid = _objects(cfg)
    oc = cfg["ocp"]
    variant = cfg["variant"]
    if variant == "tss":
        raise click.UsageError(
            "the tss variant has no control input; the OCP applies to the "
            "hier and comb variants")
    dims = {"u": model.n_pu, "w": model.n_pw, "y": model.n_py, "x": model.n_px}
    rng = np.random.default_rng(cfg["seed"])
    if x0_str is not None:
        v0 = np.array([float(s) for s in x0_str.split(",")], dtype=float)
    else:
        v0 = rng.uniform(-1, 1, system.n_state)
    if variant == "hier":
        cost = benchmark_running_cost("hier", dims, step=grid.tau)
        spec = OcpSpec(horizon=oc["horizon"], actuator=oc["actuator"],
                       cost=cost, constant_u=True,
                       u_lo=oc["u_lo"], u_hi=oc["u_hi"])
        psi0 = {"y": lifts["y"].lift(v0[:2]), "w": lifts["w"].lift(v0[2:3])}
        sol = solve_ocp(spec, model=model, psi0=psi0,
                        policy=policy if oc["actuator"] == "lqr" else None)
    else:
        base = benchmark_running_cost(variant, dims, step=grid.dt_slow)
        limit = model.tss_limit() if variant == "tss" else \
            model.combined_limit(policy if oc["actuator"] == "lqr" else None)
        spec = OcpSpec(horizon=oc["horizon"], dynamics="collapsed",
                       actuator=oc["actuator"], cost=collapse_cost(base, limit),
                       u_lo=oc["u_lo"], u_hi=oc["u_hi"],
                       u_rate_penalty=oc["u_rate_penalty"])
        psi0 = {"x": lifts["x"].lift(v0[:2])}
        sol = solve_ocp(spec, limit=limit, psi0=psi0,
                        policy=policy if oc["actuator"] == "lqr" else None)
    rows = [{"step": t, "u": float(u)} for t, u in enumerate(sol.u)]
    _write_csv(out / "ocp_solution.csv", ["step", "u"], rows, h, cfg["seed"])
    _write_json(out / "ocp_summary.json", {
        "config_hash": h, "seed": cfg["seed"], "cost": sol.cost,
        "iterations": sol.iterations, "kkt_residual": sol.kkt_residual,
        "converged": sol.converged, "x_violation": sol.x_violation,
    })
    click.echo(f"optimal cost {sol.cost:.6f} "
               f"(kkt {sol.kkt_residual:.2e}, converged={sol.converged})")
    click.echo(f"wrote {out / 'ocp_solution.csv'}")


@main.command()
@click.option("--model", "model_dir", type=click.Path(exists=True),
              default=None, help="Trained bundle directory (default: --out).")
@click.option("--n-starts", type=int, default=None)
@click.pass_context
def study(ctx, model_dir, n_starts):
    """LQR-vs-PI policy study over random starts (hier or comb)."""
    cfg, out, h = _ctx(ctx)
    from .ocp import run_policy_study
    model, lifts, policy, _ = load_bundle(Path(model_dir or out))
    system, grid = _objects(cfg)
    st = cfg["study"]
    result = run_policy_study(
        cfg["variant"], model, lifts, system, grid, policy,
        n_starts=n_starts if n_starts is not None else st["n_starts"],
        seed=st["seed"], horizon=st["horizon"],
        scan_resolution=st["scan_resolution"], substeps=st["substeps"],
        u_rate_penalty=st["u_rate_penalty"])
    fields = list(result.rows[0].keys())
    _write_csv(out / "policy_study.csv", fields, result.rows, h, cfg["seed"])
    _write_json(out / "study_summary.json",
                {"config_hash": h, **result.summary})
    click.echo(json.dumps(result.summary, indent=1, default=float))
    click.echo(f"wrote {out / 'policy_study.csv'}")


def _assertions(variant: str, rms: dict, stab: dict, study: dict | None) -> dict:
    checks = {}
    if variant == "tss":
        checks["slow_rms_le_0.2"] = rms["slow_full"] <= 0.2
        checks["fast_rms_le_0.1"] = rms["fast_y_limit"] <= 0.1
        checks["kreiss_limit_gt_eps"] = \
            stab["K_comb_xx"]["kreiss_lb"] > stab["K_xx"]["kreiss_lb"]
        checks["radius_limit_lt_eps"] = \
            stab["K_comb_xx"]["stability_radius"] < stab["K_xx"]["stability_radius"]
    elif variant == "hier":
        checks["lqr_vs_pi_improvement_gt_20pct"] = \
            study["improvement_lqr_vs_pi"]["median"] > 0.20
        checks["gap_pi_lt_2pct"] = study["gap_pi"]["median"] < 0.02
        checks["gap_lqr_lt_2pct"] = study["gap_lqr"]["median"] < 0.02
    else:
        checks["collapsed_slow_rms_le_0.2"] = rms["slow_limit"] <= 0.2
        med = study["ratio_lqr_vs_pi"]["median"]
        checks["lqr_pi_realized_within_10pct"] = 0.9 <= med <= 1.1
        checks["pi_beats_const_gt_20pct"] = \
            study["improvement_pi_vs_const"]["median"] > 0.20
        checks["lqr_beats_const_gt_20pct"] = \
            study["improvement_lqr_vs_const"]["median"] > 0.20
    return checks


@main.command()
@click.argument("variant", type=click.Choice(["tss", "hier", "comb"]))
@click.pass_context
def reproduce(ctx, variant):
    """Full pipeline for one variant; exit 0 only if its assertions pass."""
    cfg, out, h = _ctx(ctx)
    cfg = _merge(cfg, {"variant": variant})
    h = _config_hash(cfg)
    from .stability import stability_table
    from .training import prediction_rms_table
    from .ocp import run_policy_study
    timings: dict[str, float] = {}
    stage = "train"
    try:
        t0 = time.time()
        result, system, grid = _train_pipeline(cfg)
        save_bundle(out, result, cfg)
        timings["train_s"] = time.time() - t0

        stage = "rms"
        t0 = time.time()
        ev = cfg["eval"]
        rms = prediction_rms_table(result.model, result.lifts, system, grid,
                                   n_traj=ev["n_traj"], n_steps=ev["n_steps"],
                                   seed=ev["seed"], fast_init=ev["fast_init"])
        rows = [{"metric": k, "mean_rms": v} for k, v in sorted(rms.items())]
        _write_csv(out / "rms_table.csv", ["metric", "mean_rms"], rows, h,
                   cfg["seed"])
        timings["rms_s"] = time.time() - t0

        stage = "stability"
        t0 = time.time()
        reports = stability_table(
            _stability_matrices(cfg, result.model, result.policy),
            _grid_config(cfg))
        fields, srows = _stability_rows(reports)
        _write_csv(out / "stability_table.csv", fields, srows, h, cfg["seed"])
        stab = {r.label: {"log_norm": r.log_norm, "kreiss_lb": r.kreiss_lb,
                          "stability_radius": r.stability_radius}
                for r in reports}
        timings["stability_s"] = time.time() - t0

        study_summary = None
        if variant in ("hier", "comb"):
            stage = "study"
            t0 = time.time()
            st = cfg["study"]
            sres = run_policy_study(
                variant, result.model, result.lifts, system, grid,
                result.policy, n_starts=st["n_starts"], seed=st["seed"],
                horizon=st["horizon"], scan_resolution=st["scan_resolution"],
                substeps=st["substeps"], u_rate_penalty=st["u_rate_penalty"])
            _write_csv(out / "policy_study.csv", list(sres.rows[0].keys()),
                       sres.rows, h, cfg["seed"])
            study_summary = sres.summary
            timings["study_s"] = time.time() - t0
        stage = "assertions"
        checks = _assertions(variant, rms, stab, study_summary)
    except Exception as e:
        click.echo(f"stage '{stage}' failed: {e}", err=True)
        sys.exit(2)
    summary = {
        "variant": variant, "config_hash": h, "seed": cfg["seed"],
        "rms": rms, "stability": stab, "study": study_summary,
        "checks": checks, "passed": all(checks.values()), "timings": timings,
        "val_losses": result.val_losses,
    }
    _write_json(out / "summary.json", summary)
    for name, ok in checks.items():
        click.echo(f"{'PASS' if ok else 'FAIL'} {name}")
    click.echo(f"wrote {out / 'summary.json'}")
    sys.exit(0 if all(checks.values()) else 1)


if __name__ == "__main__":
    main()
