"""Dataset generation and joint training of lifting maps + Koopman blocks.

Training minimizes a mean squared prediction error over one slow interval
(the fast lifted states are rolled out for all m substeps and the slow update
uses the predicted window average), with spectral projection after every
optimizer step to keep the governed matrices inside the unit disk, and -- for
the forms with an actuator -- an LQR-consistency term that ties the learned
psi_w to the feedback law resolved each epoch.

Everything is plain numpy with hand-written reverse accumulation; training is
a pure function of (dataset, config, seed).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import benchmark
from .benchmark import SystemConfig, TimeGrid, integrate_batch
from .costs import CostQuadratic, lqr_tracking_cost
from .lifting import LiftingMap
from .lqr import LqrPolicy, LqrSolveError, solve_bellman
from .models import KoopmanBlocks, spectral_radius

log = logging.getLogger(__name__)

# lifted dimensions used throughout: 12 nonlinear observables for psi_x and
# psi_y, four for psi_w; u stays unlifted
N_NONLINEAR_XY = 12
N_NONLINEAR_W = 4


@dataclass
class Dataset:
    variant: str
    config: SystemConfig
    grid: TimeGrid
    seed: int
    X0: np.ndarray | None  # (N, 2) slow states at t=0 (None for hier)
    XT: np.ndarray | None  # (N, 2) slow states at t=dt_slow
    Y: np.ndarray  # (N, n_fast+1, 2) fast states every tau
    W: np.ndarray | None  # (N, n_fast+1) actuator (None for tss)
    U: np.ndarray | None  # (N,) constant control per trajectory (None for tss)
    stats: dict = field(default_factory=dict)
    resampled: int = 0

    @property
    def n_traj(self) -> int:
        return self.Y.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.variant, self.config, self.grid, self.seed,
                       pick(self.X0), pick(self.XT), self.Y[idx], pick(self.W),
                       pick(self.U), self.stats, self.resampled)


def generate_dataset(config: SystemConfig, grid: TimeGrid, n_traj: int = 10_000,
                     seed: int = 0) -> Dataset:
    """Simulate one slow step from random initial conditions in [-1, 1]^n.

    Controls (hier/comb) are uniform in [-1, 1], constant per trajectory.
    The hierarchical variant keeps only the first tau step.  Trajectories
    that diverge are resampled (logged).
    """
    rng = np.random.default_rng(seed)
    n = config.n_state
    need = n_traj
    chunks, resampled = [], 0
    while need > 0:
        v0 = rng.uniform(-1.0, 1.0, size=(need, n))
        u = rng.uniform(-1.0, 1.0, size=(need, 1)) if config.variant != "tss" \
            else np.zeros((need, 1))
        traj, ok = integrate_batch(v0, u, grid, 1, config, on_divergence="mask")
        if not ok.all():
            resampled += int((~ok).sum())
            log.warning("resampling %d diverged trajectories", int((~ok).sum()))
        chunks.append((traj.states[ok], u[ok, 0]))
        need -= int(ok.sum())
    states = np.concatenate([c[0] for c in chunks])[:n_traj]
    U = np.concatenate([c[1] for c in chunks])[:n_traj]
    if config.variant == "hier":
        states = states[:, :2]  # only the first fast step is used for training
    X0 = states[:, 0, config.x_slice] if config.has_x else None
    XT = states[:, -1, config.x_slice] if config.has_x else None
    Y = states[:, :, config.y_slice]
    W = states[:, :, config.w_index] if config.has_w else None
    stats = {"y_mean": Y.mean(axis=(0, 1)).tolist(), "y_std": Y.std(axis=(0, 1)).tolist()}
    if X0 is not None:
        stats.update(x_mean=X0.mean(axis=0).tolist(), x_std=X0.std(axis=0).tolist())
    return Dataset(config.variant, config, grid, seed, X0, XT, Y, W,
                   U if config.variant != "tss" else None, stats, resampled)


def save_dataset(ds: Dataset, csv_path: str | Path) -> None:
    """Columnar CSV (one row per fast sample) + JSON sidecar."""
    cfg = ds.config
    n_fast = ds.Y.shape[1] - 1
    n_state = cfg.n_state
    states = np.empty((ds.n_traj, n_fast + 1, n_state))
    if cfg.has_x:
        # slow states recorded at t=0 and t=dt only; intermediate rows repeat t=0
        states[:, :, cfg.x_slice] = ds.X0[:, None, :]
        states[:, -1, cfg.x_slice] = ds.XT
    states[:, :, cfg.y_slice] = ds.Y
    if cfg.has_w:
        states[:, :, cfg.w_index] = ds.W
    controls = (ds.U[:, None] if ds.U is not None else np.zeros((ds.n_traj, 1)))
    traj = benchmark.Trajectory(config=cfg, grid=TimeGrid(ds.grid.tau * n_fast, n_fast),
                                times=np.arange(n_fast + 1) * ds.grid.tau,
                                states=states, controls=controls)
    benchmark.save_trajectories(traj, csv_path, seed=ds.seed)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    lr: float = 1e-6  # larger rates destabilize the m-step rollout fit
    lr_decay: float = 0.985  # per-epoch multiplicative decay
    grad_clip: float = 1.0  # global-norm clip (rollout gradients can explode)
    refit_blocks: bool = True  # ridge-refit K blocks each epoch (see train())
    w_fast: float = 1.0
    w_slow: float = 1.0
    w_consist: float = 0.1
    w_lqr: float = 0.1
    delta: float = 0.001  # stability margin (true fast block sits at rho ~ 0.998/step)
    init_jitter: float = 1e-2  # symmetry-breaking noise on the lift output layer
    hidden: int = 32
    seed: int = 0
    val_frac: float = 0.1
    identity_psi_w: bool = False  # fallback: psi_w(w) = w, no nonlinear part

    def __post_init__(self):
        if not (0.0 < self.delta < 0.1):
            raise ValueError("delta must lie in (0, 0.1)")
        for w in (self.w_fast, self.w_slow, self.w_consist, self.w_lqr):
            if w < 0:
                raise ValueError("loss weights must be nonnegative")


class Adam:
    """First-order optimizer over a dict of named arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            if k not in self.params:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# stability projection


def stabilize(model: KoopmanBlocks, delta: float) -> dict:
    """Project governed matrices back inside radius 1 - delta (in place).

    K_xx and K_yy are rescaled directly; the closed fast block is cooled by
    shrinking the K_yw / K_wy couplings 2% at a time (rescaling K_ww itself
    only when it alone exceeds the cap, since the actuator carries a
    near-integrator mode that the couplings cannot fix).  Already-stable
    blocks are left untouched bit-exactly.
    """
    report = {}
    cap = 1.0 - delta
    for name in ("K_xx", "K_yy"):
        M = getattr(model, name, None)
        if M is None or M.size == 0:
            continue
        rho = spectral_radius(M)
        if rho > cap:
            M *= cap / rho
            report[name] = rho
    if model.form in ("hier", "comb"):
        for _ in range(500):
            A_fast, _, _ = model.fast_matrix()
            rho = spectral_radius(A_fast)
            if rho <= cap:
                break
            report["fast_block"] = report.get("fast_block", rho)
            rho_ww = spectral_radius(model.K_ww)
            if rho_ww > cap:
                model.K_ww *= cap / rho_ww
                report["K_ww"] = rho_ww
            else:
                model.K_yw *= 0.98
                model.K_wy *= 0.98
                # diagonal blocks sitting exactly at the cap pin the joint
                # radius at the cap from above as the couplings vanish; give
                # them a hair of margin so the loop terminates below the cap
                model.K_yy *= 0.9995
                model.K_ww *= 0.9995
    return report


def stabilize_limit(model: KoopmanBlocks, delta: float) -> dict:
    """Post-epoch pass: shrink the responsible slow couplings by 2% per
    violation until the collapsed slow matrix is inside radius 1 - delta."""
    report = {"shrinks": 0}
    if model.form == "hier":  # no slow scale to collapse
        return report
    cap = 1.0 - delta
    for _ in range(500):
        limit = model.tss_limit() if model.form == "tss" else model.combined_limit()
        rho = spectral_radius(limit.slow_A)
        report["rho_limit"] = rho
        if rho <= cap:
            break
        model.K_xy *= 0.98
        if model.form == "comb":
            model.K_xw *= 0.98
        report["shrinks"] += 1
    return report


# ---------------------------------------------------------------------------
# block initialization (ridge regression on the initial lifted data)


def _ridge(X: np.ndarray, Y: np.ndarray, lam: float = 1e-6) -> np.ndarray:
    """Solve min ||X T - Y||^2 + lam ||T||^2, returns T^T (map as row-matrix)."""
    A = X.T @ X + lam * np.eye(X.shape[1])
    return np.linalg.solve(A, X.T @ Y).T


def _king_form(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Given next = A cur + B inp, recover the target map T with
    next = A (cur - T inp) + T inp, i.e. T = (I - A)^-1 B."""
    return np.linalg.solve(np.eye(A.shape[0]) - A, B)


# ---------------------------------------------------------------------------
# losses (value + gradients, hand-written reverse accumulation)


def _lift_all(lift: LiftingMap, X: np.ndarray):
    """Forward a (..., d) array through a lifting map, keeping the cache."""
    return lift.forward(X)


def _mse_grad(pred: np.ndarray, target: np.ndarray, weight: float):
    diff = pred - target
    n = diff.size
    loss = weight * float(np.sum(diff * diff)) / n
    g = (2.0 * weight / n) * diff
    return loss, g


def prediction_loss(model: KoopmanBlocks, lifts: dict[str, LiftingMap],
                    batch: dict[str, np.ndarray], w_fast: float = 1.0,
                    w_slow: float = 1.0):
    """Prediction MSE and exact gradients for one mini-batch.

    Returns (loss_terms, grads) where grads maps parameter names (K blocks and
    ``lift_<g>.<param>``) to arrays.  The fast lifted states are rolled out
    through all m substeps of the slow interval; the slow prediction uses the
    predicted window average.
    """
    if model.form == "tss":
        return _loss_tss(model, lifts, batch, w_fast, w_slow)
    if model.form == "hier":
        return _loss_hier(model, lifts, batch, w_fast)
    return _loss_comb(model, lifts, batch, w_fast, w_slow)


def _collect_lift_grads(grads: dict, name: str, lift: LiftingMap, cache, dPsi):
    pgrads, dV = lift.backward(cache, dPsi)
    for k, g in pgrads.items():
        key = f"lift_{name}.{k}"
        if key in grads:
            grads[key] += g
        else:
            grads[key] = g
    return dV


def _loss_tss(model, lifts, batch, w_fast, w_slow):
    K_xx, K_xy, K_yy, K_yx = model.K_xx, model.K_xy, model.K_yy, model.K_yx
    py = model.n_py
    B, mp1 = batch["Y"].shape[:2]
    m = mp1 - 1

    a, cache_x0 = lifts["x"].forward(batch["X0"])
    t_x, cache_xT = lifts["x"].forward(batch["XT"])
    b, cache_y = lifts["y"].forward(batch["Y"])  # (B, m+1, py)
    b = np.swapaxes(b, 0, 1)  # (m+1, B, py)

    Iyy = np.eye(py) - K_yy
    u_x = a @ K_yx.T
    drive = u_x @ Iyy.T
    Yhat = np.empty_like(b)
    Yhat[0] = b[0]
    for n in range(m):
        Yhat[n + 1] = Yhat[n] @ K_yy.T + drive

    loss_fast, g_fast = _mse_grad(Yhat[1:], b[1:], w_fast)
    wbar = Yhat[:m].mean(axis=0)
    c = wbar @ K_xy.T
    xhat = (a - c) @ K_xx.T + c
    loss_slow, dxhat = _mse_grad(xhat, t_x, w_slow)

    grads: dict[str, np.ndarray] = {}
    # slow step
    da = dxhat @ K_xx
    dc = dxhat @ (np.eye(model.n_px) - K_xx)
    grads["K_xx"] = dxhat.T @ (a - c)
    grads["K_xy"] = dc.T @ wbar
    dwbar = dc @ K_xy
    dt_x = -dxhat
    # reverse the fast rollout
    dK_yy = np.zeros_like(K_yy)
    ddrive = np.zeros_like(drive)
    db = np.zeros_like(b)
    dwin = dwbar / m
    adj = g_fast[m - 1].copy()  # adjoint of Yhat[m]
    for n in range(m - 1, -1, -1):
        dK_yy += adj.T @ Yhat[n]
        ddrive += adj
        prev = adj @ K_yy
        if n > 0:
            adj = prev + g_fast[n - 1] + dwin
        else:
            db[0] = prev + dwin
    db[1:] -= g_fast
    # drive = u_x @ (I - K_yy)^T: d u_x = ddrive @ (I - K_yy); dK_yy -= ddrive^T u_x
    du_x = ddrive @ Iyy
    grads["K_yy"] = dK_yy - ddrive.T @ u_x
    grads["K_yx"] = du_x.T @ a
    da = da + du_x @ K_yx

    db = np.swapaxes(db, 0, 1)
    _collect_lift_grads(grads, "y", lifts["y"], cache_y, db)
    _collect_lift_grads(grads, "x", lifts["x"], cache_x0, da)
    _collect_lift_grads(grads, "x", lifts["x"], cache_xT, dt_x)
    return {"fast": loss_fast, "slow": loss_slow, "total": loss_fast + loss_slow}, grads


def _loss_hier(model, lifts, batch, w_fast):
    K_yy, K_yw = model.K_yy, model.K_yw
    K_ww, K_wy, K_wu = model.K_ww, model.K_wy, model.K_wu
    U = batch["U"][:, None]  # (B, 1) unlifted

    py0, cy0 = lifts["y"].forward(batch["Y"][:, 0])
    py1, cy1 = lifts["y"].forward(batch["Y"][:, 1])
    pw0, cw0 = lifts["w"].forward(batch["W"][:, 0:1])
    pw1, cw1 = lifts["w"].forward(batch["W"][:, 1:2])

    Iyy = np.eye(model.n_py) - K_yy
    Iww = np.eye(model.n_pw) - K_ww
    ty = pw0 @ K_yw.T
    yhat = (py0 - ty) @ K_yy.T + ty
    tw = py0 @ K_wy.T + U @ K_wu.T
    what = (pw0 - tw) @ K_ww.T + tw

    loss_y, gy = _mse_grad(yhat, py1, w_fast)
    loss_w, gw = _mse_grad(what, pw1, w_fast)

    grads: dict[str, np.ndarray] = {}
    grads["K_yy"] = gy.T @ (py0 - ty)
    dty = gy @ Iyy
    grads["K_yw"] = dty.T @ pw0
    dpy0 = gy @ K_yy
    dpw0 = dty @ K_yw
    grads["K_ww"] = gw.T @ (pw0 - tw)
    dtw = gw @ Iww
    grads["K_wy"] = dtw.T @ py0
    grads["K_wu"] = dtw.T @ U
    dpw0 += gw @ K_ww
    dpy0 += dtw @ K_wy

    _collect_lift_grads(grads, "y", lifts["y"], cy0, dpy0)
    _collect_lift_grads(grads, "y", lifts["y"], cy1, -gy)
    _collect_lift_grads(grads, "w", lifts["w"], cw0, dpw0)
    _collect_lift_grads(grads, "w", lifts["w"], cw1, -gw)
    return {"fast": loss_y + loss_w, "slow": 0.0, "total": loss_y + loss_w}, grads


def _loss_comb(model, lifts, batch, w_fast, w_slow):
    K_xx, K_xy, K_xw = model.K_xx, model.K_xy, model.K_xw
    K_yy, K_yx, K_yw = model.K_yy, model.K_yx, model.K_yw
    K_ww, K_wy, K_wx, K_wu = model.K_ww, model.K_wy, model.K_wx, model.K_wu
    py, pw, px = model.n_py, model.n_pw, model.n_px
    B, mp1 = batch["Y"].shape[:2]
    m = mp1 - 1
    U = batch["U"][:, None]

    a, cache_x0 = lifts["x"].forward(batch["X0"])
    t_x, cache_xT = lifts["x"].forward(batch["XT"])
    by, cache_y = lifts["y"].forward(batch["Y"])
    bw, cache_w = lifts["w"].forward(batch["W"][:, :, None])
    by = np.swapaxes(by, 0, 1)  # (m+1, B, py)
    bw = np.swapaxes(bw, 0, 1)

    Iyy = np.eye(py) - K_yy
    Iww = np.eye(pw) - K_ww
    c_y = a @ K_yx.T  # constant part of the fast y target
    c_w = a @ K_wx.T + U @ K_wu.T
    Yhat = np.empty_like(by)
    What = np.empty_like(bw)
    Yhat[0], What[0] = by[0], bw[0]
    ty = np.empty((m,) + Yhat.shape[1:])
    tw = np.empty((m,) + What.shape[1:])
    for n in range(m):
        ty[n] = c_y + What[n] @ K_yw.T
        tw[n] = c_w + Yhat[n] @ K_wy.T
        Yhat[n + 1] = (Yhat[n] - ty[n]) @ K_yy.T + ty[n]
        What[n + 1] = (What[n] - tw[n]) @ K_ww.T + tw[n]

    loss_fy, g_fy = _mse_grad(Yhat[1:], by[1:], w_fast)
    loss_fw, g_fw = _mse_grad(What[1:], bw[1:], w_fast)
    ybar = Yhat[:m].mean(axis=0)
    wbar = What[:m].mean(axis=0)
    cx = ybar @ K_xy.T + wbar @ K_xw.T
    xhat = (a - cx) @ K_xx.T + cx
    loss_slow, dxhat = _mse_grad(xhat, t_x, w_slow)

    grads: dict[str, np.ndarray] = {}
    da = dxhat @ K_xx
    dcx = dxhat @ (np.eye(px) - K_xx)
    grads["K_xx"] = dxhat.T @ (a - cx)
    grads["K_xy"] = dcx.T @ ybar
    grads["K_xw"] = dcx.T @ wbar
    dybar = (dcx @ K_xy) / m
    dwbar = (dcx @ K_xw) / m
    dt_x = -dxhat

    dK_yy = np.zeros_like(K_yy)
    dK_ww = np.zeros_like(K_ww)
    dK_yw = np.zeros_like(K_yw)
    dK_wy = np.zeros_like(K_wy)
    dc_y = np.zeros_like(c_y)
    dc_w = np.zeros_like(c_w)
    dby = np.zeros_like(by)
    dbw = np.zeros_like(bw)
    adj_y = g_fy[m - 1].copy()
    adj_w = g_fw[m - 1].copy()
    for n in range(m - 1, -1, -1):
        dK_yy += adj_y.T @ (Yhat[n] - ty[n])
        dty = adj_y @ Iyy
        dK_ww += adj_w.T @ (What[n] - tw[n])
        dtw = adj_w @ Iww
        dc_y += dty
        dc_w += dtw
        dK_yw += dty.T @ What[n]
        dK_wy += dtw.T @ Yhat[n]
        prev_y = adj_y @ K_yy + dtw @ K_wy
        prev_w = adj_w @ K_ww + dty @ K_yw
        if n > 0:
            adj_y = prev_y + g_fy[n - 1] + dybar
            adj_w = prev_w + g_fw[n - 1] + dwbar
        else:
            dby[0] = prev_y + dybar
            dbw[0] = prev_w + dwbar
    dby[1:] -= g_fy
    dbw[1:] -= g_fw
    grads["K_yy"] = dK_yy
    grads["K_ww"] = dK_ww
    grads["K_yw"] = dK_yw
    grads["K_wy"] = dK_wy
    grads["K_yx"] = dc_y.T @ a
    grads["K_wx"] = dc_w.T @ a
    grads["K_wu"] = dc_w.T @ U
    da = da + dc_y @ K_yx + dc_w @ K_wx

    _collect_lift_grads(grads, "y", lifts["y"], cache_y, np.swapaxes(dby, 0, 1))
    _collect_lift_grads(grads, "w", lifts["w"], cache_w, np.swapaxes(dbw, 0, 1))
    _collect_lift_grads(grads, "x", lifts["x"], cache_x0, da)
    _collect_lift_grads(grads, "x", lifts["x"], cache_xT, dt_x)
    return {"fast": loss_fy + loss_fw, "slow": loss_slow,
            "total": loss_fy + loss_fw + loss_slow}, grads


def lqr_consistency_loss(model: KoopmanBlocks, lifts: dict[str, LiftingMap],
                         policy: LqrPolicy, batch: dict[str, np.ndarray],
                         cost: CostQuadratic, weight: float = 1.0,
                         w_bellman: float = 1.0):
    """Internal consistency of the calculated psi_w under the feedback law.

    Penalizes || psi_w(w_extracted) - (-F psi_y - d) ||^2 where w_extracted is
    the state-inclusive first entry of the policy output, plus the (frozen-
    policy) Riccati residual of K_yy as an auxiliary penalty.
    """
    U = batch["U"][:, None]
    py0, cy0 = lifts["y"].forward(batch["Y"][:, 0])
    if model.n_px:
        px0, cx0 = lifts["x"].forward(batch["X0"])
    else:
        px0, cx0 = np.zeros((len(U), 0)), None
    pol = policy.feedback(py0, psi_x=px0, psi_u=U)
    w_ext = pol[:, 0:1]
    lifted, cw = lifts["w"].forward(w_ext)
    loss, gdiff = _mse_grad(lifted, pol, weight)

    grads: dict[str, np.ndarray] = {}
    dw_ext = _collect_lift_grads(grads, "w", lifts["w"], cw, gdiff)
    dpol = -gdiff
    dpol[:, 0:1] += dw_ext
    dpy0 = -(dpol @ policy.F)
    _collect_lift_grads(grads, "y", lifts["y"], cy0, dpy0)
    if cx0 is not None:
        dpx0 = -(dpol @ policy.D_x)
        _collect_lift_grads(grads, "x", lifts["x"], cx0, dpx0)

    # Riccati residual of the current K_yy against the frozen (P, F)
    bell = 0.0
    if w_bellman > 0:
        from .lqr import assemble_qrq
        Q_mat, F, _ = assemble_qrq(model, cost, policy.P)
        S = policy.P - (model.K_yy.T @ policy.P @ model.K_yy
                        - 0.5 * policy.F.T @ Q_mat @ policy.F + cost.q("y", "y"))
        bell = w_bellman * float(np.sum(S * S))
        grads["K_yy"] = grads.get("K_yy", 0.0) - w_bellman * 2.0 * (
            policy.P @ model.K_yy @ S.T + policy.P.T @ model.K_yy @ S)
    return {"consist": loss, "bellman": bell, "total": loss + bell}, grads


# ---------------------------------------------------------------------------
# training driver


@dataclass
class TrainResult:
    model: KoopmanBlocks
    lifts: dict[str, LiftingMap]
    policy: LqrPolicy | None
    history: list[dict]
    val_losses: dict
    config: TrainConfig


def _init_state(variant: str, cfg: TrainConfig):
    rng = np.random.default_rng(cfg.seed)
    lifts: dict[str, LiftingMap] = {}
    dims = {"x": 0, "y": 2 + N_NONLINEAR_XY, "w": 0, "u": 0}
    if variant in ("tss", "comb"):
        lifts["x"] = LiftingMap.create(2, N_NONLINEAR_XY, cfg.hidden, rng)
        dims["x"] = 2 + N_NONLINEAR_XY
    lifts["y"] = LiftingMap.create(2, N_NONLINEAR_XY, cfg.hidden, rng)
    if variant in ("hier", "comb"):
        if cfg.identity_psi_w:
            lifts["w"] = LiftingMap.identity(1)
        else:
            lifts["w"] = LiftingMap.create(1, N_NONLINEAR_W, cfg.hidden, rng)
        dims["w"] = lifts["w"].output_dim
        dims["u"] = 1
    # an exactly-zero output layer together with the regression-based block
    # initialization is a stationary point (zero observables get zero
    # couplings, which in turn zero the observable gradients); jitter W2 to
    # break the symmetry while staying near the linear regime
    if cfg.init_jitter > 0:
        for lf in lifts.values():
            if lf.W2 is not None:
                lf.W2 += cfg.init_jitter * rng.standard_normal(lf.W2.shape)
    return rng, lifts, dims


def init_blocks_from_data(variant: str, lifts: dict[str, LiftingMap],
                          ds: Dataset, dims: dict[str, int],
                          seed: int | None = None) -> KoopmanBlocks:
    """Ridge-regression (EDMD-style) initialization of the K blocks from the
    current liftings, respecting the King-form parameterization and the
    domain zeros K_xw = K_wx = 0."""
    py, pw, px = dims["y"], dims["w"], dims["x"]
    Y = lifts["y"].lift(ds.Y)  # (N, n_fast+1, py)
    kw: dict[str, np.ndarray] = {}
    if variant == "tss":
        X0 = lifts["x"].lift(ds.X0)
        cur = Y[:, :-1].reshape(-1, py)
        nxt = Y[:, 1:].reshape(-1, py)
        inp = np.repeat(X0, Y.shape[1] - 1, axis=0)
        T = _ridge(np.column_stack([cur, inp]), nxt)
        K_yy, B = T[:, :py], T[:, py:]
        kw.update(K_yy=K_yy, K_yx=_king_form(K_yy, B))
        XT = lifts["x"].lift(ds.XT)
        ybar = Y[:, :-1].mean(axis=1)
        T = _ridge(np.column_stack([X0, ybar]), XT)
        K_xx, B = T[:, :px], T[:, px:]
        kw.update(K_xx=K_xx, K_xy=_king_form(K_xx, B))
        return KoopmanBlocks(form="tss", n_px=px, n_py=py, n_pw=pw, n_pu=0,
                             seed=seed, **kw)
    W = lifts["w"].lift(ds.W[:, :, None])
    U = ds.U[:, None]
    n_step = Y.shape[1] - 1
    cur_y = Y[:, :-1].reshape(-1, py)
    nxt_y = Y[:, 1:].reshape(-1, py)
    cur_w = W[:, :-1].reshape(-1, pw)
    nxt_w = W[:, 1:].reshape(-1, pw)
    u_rep = np.repeat(U, n_step, axis=0)
    if variant == "hier":
        T = _ridge(np.column_stack([cur_y, cur_w]), nxt_y)
        K_yy, B = T[:, :py], T[:, py:]
        kw.update(K_yy=K_yy, K_yw=_king_form(K_yy, B))
        T = _ridge(np.column_stack([cur_w, cur_y, u_rep]), nxt_w)
        K_ww, B = T[:, :pw], T[:, pw:]
        BW = _king_form(K_ww, B)
        kw.update(K_ww=K_ww, K_wy=BW[:, :py], K_wu=BW[:, py:])
        return KoopmanBlocks(form="hier", n_px=0, n_py=py, n_pw=pw, n_pu=1,
                             seed=seed, **kw)
    X0 = lifts["x"].lift(ds.X0)
    XT = lifts["x"].lift(ds.XT)
    x_rep = np.repeat(X0, n_step, axis=0)
    T = _ridge(np.column_stack([cur_y, x_rep, cur_w]), nxt_y)
    K_yy, B = T[:, :py], T[:, py:]
    BY = _king_form(K_yy, B)
    kw.update(K_yy=K_yy, K_yx=BY[:, :px], K_yw=BY[:, px:])
    # w and x do not appear in each other's dynamics: K_wx and K_xw stay zero
    T = _ridge(np.column_stack([cur_w, cur_y, u_rep]), nxt_w)
    K_ww, B = T[:, :pw], T[:, pw:]
    BW = _king_form(K_ww, B)
    kw.update(K_ww=K_ww, K_wy=BW[:, :py], K_wu=BW[:, py:])
    ybar = Y[:, :-1].mean(axis=1)
    T = _ridge(np.column_stack([X0, ybar]), XT)
    K_xx, B = T[:, :px], T[:, px:]
    kw.update(K_xx=K_xx, K_xy=_king_form(K_xx, B))
    return KoopmanBlocks(form="comb", n_px=px, n_py=py, n_pw=pw, n_pu=1,
                         seed=seed, **kw)


def _param_registry(model: KoopmanBlocks, lifts: dict[str, LiftingMap]) -> dict:
    params: dict[str, np.ndarray] = {}
    for name in KoopmanBlocks._MATS:
        M = getattr(model, name)
        if M is None or M.size == 0:
            continue
        if model.form == "comb" and name in ("K_xw", "K_wx"):
            continue  # domain zeros stay pinned
        params[name] = M
    for g, lf in lifts.items():
        for k, arr in lf.params().items():
            params[f"lift_{g}.{k}"] = arr
    return params


def benchmark_train_config(variant: str, **overrides) -> TrainConfig:
    """Validated settings for the benchmark pipelines.

    30 alternating epochs reach the reported held-out accuracy in about a
    minute per variant.  The actuator ODE is exactly linear in (w, y, u), so
    the hier and comb pipelines keep psi_w = w (``identity_psi_w``):
    nonlinear actuator observables add spurious decay modes to long PI
    rollouts and unrealizable feedback channels to the LQR policy.
    """
    kw: dict = {"epochs": 30, "seed": 0}
    if variant in ("hier", "comb"):
        kw["identity_psi_w"] = True
    kw.update(overrides)
    return TrainConfig(**kw)


def train(variant: str, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Alternating training: Adam on the lifting networks, with the Koopman
    blocks re-fit by ridge regression (their exact one-step optimum given the
    current features) at every epoch.

    First-order steps on the blocks themselves are unusable here: the m-step
    fast rollout amplifies generic block perturbations so strongly that the
    prediction loss is razor-sharp in block space (perturbations of 1e-5 per
    entry already ruin the fit).  Setting ``refit_blocks=False`` falls back
    to fully joint Adam.
    """
    if dataset.variant != variant:
        raise ValueError("dataset variant does not match")
    rng, lifts, dims = _init_state(variant, cfg)
    n = dataset.n_traj
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_frac * n)))
    val = dataset.subset(perm[:n_val])
    tr = dataset.subset(perm[n_val:])

    model = init_blocks_from_data(variant, lifts, tr, dims, seed=cfg.seed)
    stabilize(model, cfg.delta)
    params = _param_registry(model, lifts)
    opt_params = {k: v for k, v in params.items() if k.startswith("lift_")} \
        if cfg.refit_blocks else params
    opt = Adam(opt_params, lr=cfg.lr)

    def refit_blocks():
        fresh = init_blocks_from_data(variant, lifts, tr, dims, seed=cfg.seed)
        for name in KoopmanBlocks._MATS:
            M = getattr(model, name)
            if M is not None and M.size:
                M[...] = getattr(fresh, name)
        stabilize(model, cfg.delta)

    track_cost = None
    policy = None
    if variant in ("hier", "comb"):
        track_cost = lqr_tracking_cost(
            {"u": 1, "w": dims["w"], "y": dims["y"], "x": dims["x"]},
            step=dataset.grid.tau)

    def batches(ds: Dataset, idx: np.ndarray):
        for s in range(0, len(idx), cfg.batch_size):
            sel = idx[s:s + cfg.batch_size]
            b = {"Y": ds.Y[sel]}
            if ds.X0 is not None:
                b["X0"], b["XT"] = ds.X0[sel], ds.XT[sel]
            if ds.W is not None:
                b["W"] = ds.W[sel]
            if ds.U is not None:
                b["U"] = ds.U[sel]
            yield b

    def val_prediction() -> dict:
        out: dict[str, float] = {"fast": 0.0, "slow": 0.0, "total": 0.0}
        nb = 0
        for batch in batches(val, np.arange(val.n_traj)):
            terms, _ = prediction_loss(model, lifts, batch, cfg.w_fast, cfg.w_slow)
            for k in out:
                out[k] += terms[k]
            nb += 1
        return {k: v / max(nb, 1) for k, v in out.items()}

    history: list[dict] = []
    best = {"val": np.inf, "params": None}
    n_tr = tr.n_traj
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * cfg.lr_decay**epoch
        if cfg.refit_blocks and epoch > 0:
            refit_blocks()
            stabilize_limit(model, cfg.delta)
        if track_cost is not None:
            try:
                policy = solve_bellman(model, track_cost,
                                       P0=policy.P if policy is not None else None)
            except LqrSolveError as e:
                policy = None
                log.warning("epoch %d: LQR solve failed (%s); consistency term skipped",
                            epoch, e)
        sums = {"fast": 0.0, "slow": 0.0, "consist": 0.0, "bellman": 0.0}
        count = 0
        for batch in batches(tr, rng.permutation(n_tr)):
            terms, grads = prediction_loss(model, lifts, batch, cfg.w_fast, cfg.w_slow)
            if policy is not None and cfg.w_consist > 0:
                cterms, cgrads = lqr_consistency_loss(
                    model, lifts, policy, batch, track_cost,
                    weight=cfg.w_consist, w_bellman=cfg.w_lqr)
                for k, g in cgrads.items():
                    grads[k] = grads.get(k, 0.0) + g
                terms = {**terms, "consist": cterms["consist"], "bellman": cterms["bellman"]}
            total = terms["total"] + terms.get("consist", 0.0) + terms.get("bellman", 0.0)
            if not math.isfinite(total):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} (terms: {terms}); aborting")
            if cfg.grad_clip > 0:
                gnorm = math.sqrt(sum(float(np.sum(np.square(g)))
                                      for g in grads.values()))
                if gnorm > cfg.grad_clip:
                    scale = cfg.grad_clip / gnorm
                    grads = {k: g * scale for k, g in grads.items()}
            opt.step(grads)
            stabilize(model, cfg.delta)
            for k in sums:
                sums[k] += terms.get(k, 0.0)
            count += 1
        limit_report = stabilize_limit(model, cfg.delta)
        vl = val_prediction()
        if vl["total"] < best["val"]:
            best = {"val": vl["total"], "params": {k: v.copy() for k, v in params.items()}}
        rec = {"epoch": epoch, **{k: v / count for k, v in sums.items()},
               "val_total": vl["total"],
               "rho_K_yy": spectral_radius(model.K_yy),
               "rho_limit": limit_report.get("rho_limit", float("nan")),
               "limit_shrinks": limit_report["shrinks"]}
        if model.K_xx is not None:
            rec["rho_K_xx"] = spectral_radius(model.K_xx)
        history.append(rec)

    if best["params"] is not None:  # roll back to the best-validation epoch
        for k, v in best["params"].items():
            params[k][...] = v
    if track_cost is not None:
        try:
            policy = solve_bellman(model, track_cost,
                                   P0=policy.P if policy is not None else None)
        except LqrSolveError:
            policy = None
    val_losses = val_prediction()
    return TrainResult(model=model, lifts=lifts, policy=policy,
                       history=history, val_losses=val_losses, config=cfg)


def save_history(history: list[dict], path: str | Path) -> None:
    if not history:
        return
    keys = sorted({k for rec in history for k in rec}, key=lambda k: (k != "epoch", k))
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=keys)
        wr.writeheader()
        for rec in history:
            wr.writerow(rec)


# ---------------------------------------------------------------------------
# held-out multi-step prediction error


def _rms(err: np.ndarray) -> float:
    """Mean over trajectories of the per-trajectory RMS over time and components."""
    return float(np.mean(np.sqrt(np.mean(err**2, axis=tuple(range(1, err.ndim))))))


def _rms_table_hier(model: KoopmanBlocks, lifts: dict[str, LiftingMap],
                    config: SystemConfig, grid: TimeGrid, n_traj: int,
                    n_steps: int, seed: int) -> dict[str, float]:
    """Fast-scale rollout RMS for the hierarchical form.

    The hier form has no slow scale, so ``n_steps`` counts fast steps here and
    trajectories start from random states: the full fast model is expected to
    track transients, so no manifold-start protocol applies.
    """
    rng = np.random.default_rng(seed)
    n_slow = -(-n_steps // grid.m)
    states_parts, v0_parts, u_parts = [], [], []
    have = 0
    while have < n_traj:
        need = n_traj - have
        v0 = rng.uniform(-1.0, 1.0, size=(need, config.n_state))
        u1 = rng.uniform(-1.0, 1.0, size=(need, 1))
        traj, ok = integrate_batch(v0, np.repeat(u1, n_slow, axis=1), grid,
                                   n_slow, config, on_divergence="mask")
        if not ok.all():
            log.warning("resampling %d diverged evaluation trajectories",
                        int((~ok).sum()))
        states_parts.append(traj.states[ok])
        v0_parts.append(v0[ok])
        u_parts.append(u1[ok])
        have += int(ok.sum())
    states = np.concatenate(states_parts)[:n_traj, :n_steps + 1]
    v0 = np.concatenate(v0_parts)[:n_traj]
    u = np.concatenate(u_parts)[:n_traj]
    y_true = states[..., config.y_slice]
    w_true = states[..., config.w_index]

    psi_y0 = lifts["y"].lift(v0[:, config.y_slice])
    psi_w0 = lifts["w"].lift(v0[:, config.w_index][:, None])
    roll = model.rollout_fast(psi_y0, psi_w0, u, n_steps)
    y_hat = np.swapaxes(roll["psi_y"][..., :2], 0, 1)
    w_hat = np.swapaxes(roll["psi_w"][..., 0], 0, 1)
    return {"fast_y_full": _rms(y_hat[:, 1:] - y_true[:, 1:]),
            "fast_w_full": _rms(w_hat[:, 1:] - w_true[:, 1:])}


def prediction_rms_table(model: KoopmanBlocks, lifts: dict[str, LiftingMap],
                         config: SystemConfig, grid: TimeGrid,
                         n_traj: int = 100, n_steps: int = 100,
                         seed: int = 1234, fast_init: str = "equilibrium") -> dict[str, float]:
    """Mean RMS prediction error over fresh random trajectories.

    Compares the eps>0 multirate rollout and the eps->0 collapsed rollout
    against ground-truth integration; fast errors are measured at the slow
    sampling instants against the predicted fast equilibria.

    With ``fast_init="equilibrium"`` (the default) the held-out trajectories
    start with the fast variables on the slow manifold -- the collapsed model
    conditions only on (psi_x, u), so arbitrary fast initial transients would
    measure an unknowable quantity rather than model quality.  Trajectories
    whose ground truth diverges (basin escape under a held control) are
    resampled so the table always covers ``n_traj`` valid trajectories.
    """
    if fast_init not in ("equilibrium", "random"):
        raise ValueError("fast_init must be 'equilibrium' or 'random'")
    if config.variant == "hier":
        return _rms_table_hier(model, lifts, config, grid, n_traj, n_steps, seed)
    rng = np.random.default_rng(seed)
    states_parts, v0_parts, u_parts = [], [], []
    have = 0
    while have < n_traj:
        need = n_traj - have
        u1 = np.zeros((need, 1)) if config.variant == "tss" \
            else rng.uniform(-1.0, 1.0, size=(need, 1))
        if fast_init == "equilibrium":
            x0 = rng.uniform(-1.0, 1.0, size=(need, 2)) if config.has_x else None
            v0 = benchmark.fast_equilibrium_state(config, x0, u1[:, 0])
        else:
            v0 = rng.uniform(-1.0, 1.0, size=(need, config.n_state))
        u_seq = np.repeat(u1, n_steps, axis=1)
        traj, ok = integrate_batch(v0, u_seq, grid, n_steps, config,
                                   on_divergence="mask")
        if not ok.all():  # true-dynamics blowups: resample
            log.warning("resampling %d diverged evaluation trajectories",
                        int((~ok).sum()))
        states_parts.append(traj.states[ok])
        v0_parts.append(v0[ok])
        u_parts.append(u_seq[ok])
        have += int(ok.sum())
    states = np.concatenate(states_parts)[:n_traj]
    v0 = np.concatenate(v0_parts)[:n_traj]
    u = np.concatenate(u_parts)[:n_traj]
    x_true = states[:, ::grid.m, config.x_slice]  # (n_traj, n_steps+1, 2)
    y_true = states[:, ::grid.m, config.y_slice]
    w_true = states[:, ::grid.m, config.w_index] if config.has_w else None

    psi_x0 = lifts["x"].lift(v0[:, config.x_slice])
    psi_y0 = lifts["y"].lift(v0[:, config.y_slice])
    out: dict[str, float] = {}
    if config.variant == "tss":
        roll = model.rollout(psi_x0, psi_y0, n_slow=n_steps, m=grid.m)
        x_hat = np.swapaxes(roll["psi_x"][..., :2], 0, 1)
        out["slow_full"] = _rms(x_hat[:, 1:] - x_true[:, 1:])
        limit = model.tss_limit()
    else:
        psi_w0 = lifts["w"].lift(v0[:, config.w_index][:, None])
        u_seq = u[:, 0][:, None]
        psi_x = psi_x0
        xs = [psi_x0]
        psi_y, psi_w = psi_y0, psi_w0
        for t in range(n_steps):
            win_y, win_w = [], []
            for _ in range(grid.m):
                win_y.append(psi_y)
                win_w.append(psi_w)
                psi_y, psi_w = model.step_fast(psi_y, psi_x=psi_x, psi_w=psi_w,
                                               psi_u=u_seq)
            psi_x = model.step_slow(psi_x, np.array(win_y), np.array(win_w))
            xs.append(psi_x)
        x_hat = np.stack(xs, axis=1)[..., :2]
        out["slow_full"] = _rms(x_hat[:, 1:] - x_true[:, 1:])
        limit = model.combined_limit()

    # eps -> 0 collapsed rollout
    psi_x = psi_x0
    xs, ys, ws = [psi_x0], [], []
    for t in range(n_steps):
        pu = u[:, t][:, None] if config.variant != "tss" else None
        y_eq, w_eq = limit.fast_equilibrium(psi_x, pu)
        ys.append(y_eq)
        if w_eq is not None:
            ws.append(w_eq)
        psi_x = limit.step(psi_x, pu)
        xs.append(psi_x)
    x_hat0 = np.stack(xs, axis=1)[..., :2]
    out["slow_limit"] = _rms(x_hat0[:, 1:] - x_true[:, 1:])
    y_hat0 = np.stack(ys, axis=1)[..., :2]
    out["fast_y_limit"] = _rms(y_hat0[:, 1:] - y_true[:, 1:-1]) if n_steps > 1 else \
        _rms(y_hat0 - y_true[:, :-1])
    if ws:
        w_hat0 = np.stack(ws, axis=1)[..., 0]
        out["fast_w_limit"] = _rms(w_hat0[:, 1:] - w_true[:, 1:-1])
    return out
