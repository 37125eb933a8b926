"""Structured discrete-time Koopman model algebra.

Three model forms are supported:

* ``tss``  -- slow/fast blocks (K_xx, K_xy, K_yy, K_yx); the fast lifted
  states evolve m substeps per slow step and the slow update uses the
  window-averaged fast observables.
* ``hier`` -- fast states y plus actuator w driven by an unlifted input u
  (K_yy, K_yw, K_ww, K_wy, K_wu).
* ``comb`` -- both at once, with optional K_xw / K_wx couplings (identically
  zero for the benchmark, where w and x do not appear in each other's
  dynamics).

All updates are affine "pull toward the input-parameterized fixed point"
maps: next = K (current - target) + target.  The module also derives the
scale-collapsed slow limit models (K_comb_xx and the B blocks) by direct
block linear solves.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .costs import CostQuadratic

MODEL_FORMAT_VERSION = 1


class UnstableFastError(ValueError):
    """Fast subsystem is not contracting, so the scale-collapsed limit is invalid."""


class RolloutDivergenceError(RuntimeError):
    """Lifted rollout exceeded the blow-up threshold."""


def spectral_radius(A: np.ndarray) -> float:
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def _check(name: str, M: np.ndarray | None, shape: tuple[int, int]):
    if M is None:
        raise ValueError(f"form requires matrix {name}")
    if M.shape != shape:
        raise ValueError(f"{name} has shape {M.shape}, expected {shape}")


@dataclass
class KoopmanBlocks:
    form: str  # "tss" | "hier" | "comb"
    n_px: int
    n_py: int
    n_pw: int
    n_pu: int
    K_xx: np.ndarray | None = None
    K_xy: np.ndarray | None = None
    K_xw: np.ndarray | None = None
    K_yy: np.ndarray | None = None
    K_yx: np.ndarray | None = None
    K_yw: np.ndarray | None = None
    K_ww: np.ndarray | None = None
    K_wy: np.ndarray | None = None
    K_wx: np.ndarray | None = None
    K_wu: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        px, py, pw, pu = self.n_px, self.n_py, self.n_pw, self.n_pu
        if self.form == "tss":
            _check("K_xx", self.K_xx, (px, px))
            _check("K_xy", self.K_xy, (px, py))
            _check("K_yy", self.K_yy, (py, py))
            _check("K_yx", self.K_yx, (py, px))
        elif self.form == "hier":
            _check("K_yy", self.K_yy, (py, py))
            _check("K_yw", self.K_yw, (py, pw))
            _check("K_ww", self.K_ww, (pw, pw))
            _check("K_wy", self.K_wy, (pw, py))
            _check("K_wu", self.K_wu, (pw, pu))
        elif self.form == "comb":
            _check("K_xx", self.K_xx, (px, px))
            _check("K_xy", self.K_xy, (px, py))
            _check("K_yy", self.K_yy, (py, py))
            _check("K_yx", self.K_yx, (py, px))
            _check("K_yw", self.K_yw, (py, pw))
            _check("K_ww", self.K_ww, (pw, pw))
            _check("K_wy", self.K_wy, (pw, py))
            _check("K_wu", self.K_wu, (pw, pu))
            if self.K_xw is None:
                self.K_xw = np.zeros((px, pw))
            if self.K_wx is None:
                self.K_wx = np.zeros((pw, px))
            _check("K_xw", self.K_xw, (px, pw))
            _check("K_wx", self.K_wx, (pw, px))
        else:
            raise ValueError(f"unknown form {self.form!r}")

    # -- single-step maps ---------------------------------------------------

    def step_fast(self, psi_y: np.ndarray, psi_x: np.ndarray | None = None,
                  psi_w: np.ndarray | None = None, psi_u: np.ndarray | None = None):
        """One fast substep.  Returns psi_y' (tss) or (psi_y', psi_w')."""
        if self.form == "tss":
            a = psi_x @ self.K_yx.T
            return (psi_y - a) @ self.K_yy.T + a
        if self.form == "hier":
            ay = psi_w @ self.K_yw.T
            y_next = (psi_y - ay) @ self.K_yy.T + ay
            aw = psi_y @ self.K_wy.T + psi_u @ self.K_wu.T
            w_next = (psi_w - aw) @ self.K_ww.T + aw
            return y_next, w_next
        ay = psi_x @ self.K_yx.T + psi_w @ self.K_yw.T
        y_next = (psi_y - ay) @ self.K_yy.T + ay
        aw = psi_x @ self.K_wx.T + psi_y @ self.K_wy.T + psi_u @ self.K_wu.T
        w_next = (psi_w - aw) @ self.K_ww.T + aw
        return y_next, w_next

    def step_slow(self, psi_x: np.ndarray, window_y: np.ndarray,
                  window_w: np.ndarray | None = None) -> np.ndarray:
        """One slow step from the m-sample fast window (axis 0 is the window)."""
        if self.form == "hier":
            raise ValueError("hier form has no slow dynamics")
        ybar = np.asarray(window_y).mean(axis=0)
        a = ybar @ self.K_xy.T
        if self.form == "comb":
            if window_w is None:
                raise ValueError("comb form needs the fast actuator window")
            a = a + np.asarray(window_w).mean(axis=0) @ self.K_xw.T
        return (psi_x - a) @ self.K_xx.T + a

    def fast_matrix(self):
        """Joint fast update z' = A z + G_x psi_x + G_u psi_u over z=[psi_y; psi_w].

        For the tss form z is just psi_y and G_u has width 0.
        """
        py, pw = self.n_py, self.n_pw
        Iy = np.eye(py)
        if self.form == "tss":
            A = self.K_yy
            Gx = (Iy - self.K_yy) @ self.K_yx
            return A, Gx, np.zeros((py, 0))
        Iw = np.eye(pw)
        A = np.block([
            [self.K_yy, (Iy - self.K_yy) @ self.K_yw],
            [(Iw - self.K_ww) @ self.K_wy, self.K_ww],
        ])
        if self.form == "comb":
            Gx = np.vstack([(Iy - self.K_yy) @ self.K_yx, (Iw - self.K_ww) @ self.K_wx])
        else:
            Gx = np.zeros((py + pw, self.n_px))
        Gu = np.vstack([np.zeros((py, self.n_pu)), (Iw - self.K_ww) @ self.K_wu])
        return A, Gx, Gu

    # -- rollout ------------------------------------------------------------

    def rollout(self, psi_x0, psi_y0=None, psi_w0=None, u_seq=None,
                n_slow: int = 1, m: int = 100) -> dict[str, np.ndarray]:
        """Multi-rate lifted rollout; states are re-lifted only at t=0.

        ``u_seq`` is (n_slow, n_pu) (ignored for tss).  Returns a dict with
        'psi_x' of shape (n_slow+1, n_px) and 'psi_y' (and 'psi_w') of shape
        (n_slow*m + 1, n_py); leading batch axes on the inputs broadcast
        through (arrays then gain a trailing batch axis before the feature
        axis is not supported -- inputs must be 1-D per trajectory or 2-D
        (batch, dim), with outputs (steps, batch, dim)).
        """
        if self.form == "hier":
            raise ValueError("use rollout_fast for the hier form")
        psi_x = np.asarray(psi_x0, dtype=float)
        psi_y = np.asarray(psi_y0, dtype=float)
        batch = psi_x.shape[:-1]
        xs = np.empty((n_slow + 1,) + batch + (self.n_px,))
        ys = np.empty((n_slow * m + 1,) + batch + (self.n_py,))
        xs[0], ys[0] = psi_x, psi_y
        has_w = self.form == "comb"
        if has_w:
            psi_w = np.asarray(psi_w0, dtype=float)
            ws = np.empty((n_slow * m + 1,) + batch + (self.n_pw,))
            ws[0] = psi_w
            u_seq = np.asarray(u_seq, dtype=float).reshape(n_slow, self.n_pu)
        for t in range(n_slow):
            base = t * m
            for n in range(m):
                if has_w:
                    psi_y, psi_w = self.step_fast(psi_y, psi_x=psi_x, psi_w=psi_w,
                                                  psi_u=u_seq[t])
                    ws[base + n + 1] = psi_w
                else:
                    psi_y = self.step_fast(psi_y, psi_x=psi_x)
                ys[base + n + 1] = psi_y
            win_y = ys[base:base + m]
            win_w = ws[base:base + m] if has_w else None
            psi_x = self.step_slow(psi_x, win_y, win_w)
            xs[t + 1] = psi_x
            if not np.all(np.abs(psi_x) < 1e8):
                raise RolloutDivergenceError(f"lifted rollout diverged at slow step {t + 1}")
        out = {"psi_x": xs, "psi_y": ys}
        if has_w:
            out["psi_w"] = ws
        return out

    def rollout_fast(self, psi_y0, psi_w0, psi_u, n_steps: int) -> dict[str, np.ndarray]:
        """Fast-scale rollout for the hier form with a constant input."""
        psi_y = np.asarray(psi_y0, dtype=float)
        psi_w = np.asarray(psi_w0, dtype=float)
        psi_u = np.asarray(psi_u, dtype=float)
        batch = psi_y.shape[:-1]
        ys = np.empty((n_steps + 1,) + batch + (self.n_py,))
        ws = np.empty((n_steps + 1,) + batch + (self.n_pw,))
        ys[0], ws[0] = psi_y, psi_w
        for n in range(n_steps):
            psi_y, psi_w = self.step_fast(psi_y, psi_w=psi_w, psi_u=psi_u)
            ys[n + 1], ws[n + 1] = psi_y, psi_w
            if not np.all(np.abs(psi_y) < 1e8):
                raise RolloutDivergenceError(f"fast rollout diverged at step {n + 1}")
        return {"psi_y": ys, "psi_w": ws}

    # -- scale-collapsed limits ---------------------------------------------

    def tss_limit(self) -> "LimitModel":
        """Slow dynamics as the scales separate: K_comb_xx = K_xx + (I-K_xx) K_xy K_yx."""
        if self.form != "tss":
            raise ValueError("tss_limit applies to the tss form")
        rho = spectral_radius(self.K_yy)
        if rho >= 1.0:
            raise UnstableFastError(
                f"fast block has spectral radius {rho:.6g} >= 1; the averaged fast "
                "window does not converge, so the collapsed slow map is undefined")
        I = np.eye(self.n_px)
        K_comb = self.K_xx + (I - self.K_xx) @ self.K_xy @ self.K_yx
        return LimitModel(form="tss", provenance="pi", n_px=self.n_px, n_pu=0,
                          slow_A=K_comb, y_from_x=self.K_yx.copy(),
                          y_from_u=np.zeros((self.n_py, 0)), y_const=np.zeros(self.n_py))

    def combined_limit(self, policy=None) -> "LimitModel":
        """Scale-collapsed slow model for the comb form.

        Solves the joint fast fixed point for (psi_y*, psi_w*) as affine maps
        of (psi_x, psi_u); with an LQR ``policy`` the actuator equation is
        replaced by the feedback law psi_w* = -F psi_y* - d(psi_x, psi_u).
        """
        if self.form != "comb":
            raise ValueError("combined_limit applies to the comb form")
        py, pw, px, pu = self.n_py, self.n_pw, self.n_px, self.n_pu
        Iy, Iw = np.eye(py), np.eye(pw)
        if policy is None:
            A_fast, _, _ = self.fast_matrix()
            rho = spectral_radius(A_fast)
            if rho >= 1.0:
                raise UnstableFastError(
                    f"closed fast block has spectral radius {rho:.6g} >= 1")
            S = np.block([[Iy, -self.K_yw], [-self.K_wy, Iw]])
            rhs_x = np.vstack([self.K_yx, self.K_wx])
            rhs_u = np.vstack([np.zeros((py, pu)), self.K_wu])
            rhs_0 = np.zeros(py + pw)
            provenance = "pi"
        else:
            A_cl = self.K_yy - (Iy - self.K_yy) @ self.K_yw @ policy.F
            rho = spectral_radius(A_cl)
            if rho >= 1.0:
                raise UnstableFastError(
                    f"LQR-closed fast block has spectral radius {rho:.6g} >= 1")
            S = np.block([[Iy, -self.K_yw], [policy.F, Iw]])
            rhs_x = np.vstack([self.K_yx, -policy.D_x])
            rhs_u = np.vstack([np.zeros((py, pu)), -policy.D_u])
            rhs_0 = np.concatenate([np.zeros(py), -policy.d_0])
            provenance = "lqr"
        try:
            sol = np.linalg.solve(S, np.column_stack([rhs_x, rhs_u, rhs_0[:, None]]))
        except np.linalg.LinAlgError as e:
            raise UnstableFastError(f"singular fast fixed-point system: {e}") from e
        B_yx, B_wx = sol[:py, :px], sol[py:, :px]
        B_yu, B_wu = sol[:py, px:px + pu], sol[py:, px:px + pu]
        b_y0, b_w0 = sol[:py, -1], sol[py:, -1]
        Ix = np.eye(px)
        fold = self.K_xy @ B_yx + self.K_xw @ B_wx
        B_xx = self.K_xx + (Ix - self.K_xx) @ fold
        B_xu = (Ix - self.K_xx) @ (self.K_xy @ B_yu + self.K_xw @ B_wu)
        b_x0 = (Ix - self.K_xx) @ (self.K_xy @ b_y0 + self.K_xw @ b_w0)
        return LimitModel(form="comb", provenance=provenance, n_px=px, n_pu=pu,
                          slow_A=B_xx, slow_B=B_xu, slow_const=b_x0,
                          y_from_x=B_yx, y_from_u=B_yu, y_const=b_y0,
                          w_from_x=B_wx, w_from_u=B_wu, w_const=b_w0)

    # -- serialization ------------------------------------------------------

    _MATS = ("K_xx", "K_xy", "K_xw", "K_yy", "K_yx", "K_yw",
             "K_ww", "K_wy", "K_wx", "K_wu")

    def save(self, path: str | Path) -> None:
        header = {
            "format_version": MODEL_FORMAT_VERSION,
            "form": self.form,
            "dims": [self.n_px, self.n_py, self.n_pw, self.n_pu],
            "seed": self.seed,
        }
        arrays = {k: getattr(self, k) for k in self._MATS if getattr(self, k) is not None}
        np.savez(path, header=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
                 **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "KoopmanBlocks":
        with np.load(path) as data:
            header = json.loads(bytes(data["header"].tobytes()).decode())
            if header["format_version"] != MODEL_FORMAT_VERSION:
                raise ValueError(f"unsupported model file version {header['format_version']}")
            kw = {k: data[k] for k in cls._MATS if k in data.files}
        px, py, pw, pu = header["dims"]
        return cls(form=header["form"], n_px=px, n_py=py, n_pw=pw, n_pu=pu,
                   seed=header["seed"], **kw)


@dataclass
class LimitModel:
    """Slow-scale limit dynamics plus the fast fixed-point maps.

    slow update: psi_x' = slow_A psi_x + slow_B psi_u + slow_const
    fast equilibria: psi_y* = y_from_x psi_x + y_from_u psi_u + y_const (w alike).
    """

    form: str
    provenance: str  # "pi" | "lqr"
    n_px: int
    n_pu: int
    slow_A: np.ndarray = None
    slow_B: np.ndarray | None = None
    slow_const: np.ndarray | None = None
    y_from_x: np.ndarray | None = None
    y_from_u: np.ndarray | None = None
    y_const: np.ndarray | None = None
    w_from_x: np.ndarray | None = None
    w_from_u: np.ndarray | None = None
    w_const: np.ndarray | None = None

    def __post_init__(self):
        if self.slow_B is None:
            self.slow_B = np.zeros((self.n_px, self.n_pu))
        if self.slow_const is None:
            self.slow_const = np.zeros(self.n_px)

    def step(self, psi_x: np.ndarray, psi_u: np.ndarray | None = None) -> np.ndarray:
        out = psi_x @ self.slow_A.T + self.slow_const
        if self.n_pu:
            out = out + np.asarray(psi_u) @ self.slow_B.T
        return out

    def fast_equilibrium(self, psi_x: np.ndarray, psi_u: np.ndarray | None = None):
        """(psi_y*, psi_w*) at the given slow state and input (psi_w* None for tss)."""
        psi_u = np.zeros(self.n_pu) if psi_u is None else np.asarray(psi_u)
        y = psi_x @ self.y_from_x.T + self.y_const
        if self.n_pu:
            y = y + psi_u @ self.y_from_u.T
        if self.w_from_x is None:
            return y, None
        w = psi_x @ self.w_from_x.T + psi_u @ self.w_from_u.T + self.w_const
        return y, w

    def fixed_point_residual(self, model: KoopmanBlocks, policy=None,
                             n_samples: int = 10, rng=None) -> float:
        """Max residual of the defining fast fixed-point equations at random inputs."""
        rng = rng or np.random.default_rng(0)
        worst = 0.0
        for _ in range(n_samples):
            px = rng.standard_normal(self.n_px)
            pu = rng.standard_normal(self.n_pu)
            y, w = self.fast_equilibrium(px, pu)
            if model.form == "tss":
                res = np.linalg.norm(model.step_fast(y, psi_x=px) - y)
            elif policy is None:
                y2, w2 = model.step_fast(y, psi_x=px, psi_w=w, psi_u=pu)
                res = max(np.linalg.norm(y2 - y), np.linalg.norm(w2 - w))
            else:
                y2, _ = model.step_fast(y, psi_x=px, psi_w=w, psi_u=pu)
                w_fb = policy.feedback(y, psi_x=px, psi_u=pu)
                res = max(np.linalg.norm(y2 - y), np.linalg.norm(w_fb - w))
            worst = max(worst, float(res))
        return worst


def collapse_cost(cost: CostQuadratic, limit: LimitModel) -> CostQuadratic:
    """Rewrite a block-quadratic cost over (u,w,y,x) in terms of (psi_x, psi_u)
    by substituting the fast equilibrium maps."""
    px, pu = limit.n_px, limit.n_pu
    zero_y = np.zeros(limit.y_from_x.shape[0])
    subs = {
        "x": (np.eye(px), np.zeros((px, pu)), np.zeros(px)),
        "u": (np.zeros((pu, px)), np.eye(pu), np.zeros(pu)),
        "y": (limit.y_from_x,
              limit.y_from_u if limit.y_from_u is not None else np.zeros((len(zero_y), pu)),
              limit.y_const if limit.y_const is not None else zero_y),
    }
    if limit.w_from_x is not None:
        subs["w"] = (limit.w_from_x, limit.w_from_u, limit.w_const)
    groups = [g for g in ("u", "w", "y", "x") if cost.dims.get(g, 0)]
    new_dims = {"x": px, "u": pu, "y": 0, "w": 0}
    Qn = {("x", "x"): np.zeros((px, px)), ("x", "u"): np.zeros((px, pu)),
          ("u", "x"): np.zeros((pu, px)), ("u", "u"): np.zeros((pu, pu))}
    cn = {"x": np.zeros(px), "u": np.zeros(pu)}
    c0 = cost.c0
    for i in groups:
        if i not in subs:
            raise ValueError(f"cost involves group {i!r} with no substitution map")
        Ai_x, Ai_u, ai = subs[i]
        ci = cost.lin(i)
        cn["x"] += Ai_x.T @ ci
        cn["u"] += Ai_u.T @ ci
        c0 += float(ci @ ai)
        for j in groups:
            if (i, j) not in cost.Q:
                continue
            Qij = cost.Q[i, j]
            Aj_x, Aj_u, aj = subs[j]
            Qn["x", "x"] += Ai_x.T @ Qij @ Aj_x
            Qn["x", "u"] += Ai_x.T @ Qij @ Aj_u
            Qn["u", "x"] += Ai_u.T @ Qij @ Aj_x
            Qn["u", "u"] += Ai_u.T @ Qij @ Aj_u
            cn["x"] += Ai_x.T @ Qij @ aj + Aj_x.T @ Qij.T @ ai
            cn["u"] += Ai_u.T @ Qij @ aj + Aj_u.T @ Qij.T @ ai
            c0 += float(ai @ Qij @ aj)
    return CostQuadratic(dims=new_dims, Q=Qn, c=cn, c0=c0)
