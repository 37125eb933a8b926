"""Infinite-horizon LQR feedback for the fast/actuator subsystem.

Solves Bellman's equation for the lifted fast dynamics

    psi_y' = K_yy psi_y + (I - K_yy)(K_yx psi_x + K_yw psi_w)

under a block-quadratic stage cost, treating psi_x and psi_u as constants on
the fast scale.  The value function is V(psi_y) = psi_y^T P psi_y + p^T psi_y
and the optimal actuator setting is psi_w = -F psi_y - d, with p and d affine
in (psi_x, psi_u).  P is found by fixed-point iteration; the coupled affine
maps for p and d then follow from one joint linear solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .costs import CostQuadratic
from .models import KoopmanBlocks, spectral_radius


class LqrSolveError(RuntimeError):
    pass


@dataclass
class LqrPolicy:
    P: np.ndarray  # value quadratic (n_py, n_py), symmetric
    F: np.ndarray  # feedback gain (n_pw, n_py)
    P_x: np.ndarray  # p = P_x psi_x + P_u psi_u + p_0
    P_u: np.ndarray
    p_0: np.ndarray
    D_x: np.ndarray  # d = D_x psi_x + D_u psi_u + d_0
    D_u: np.ndarray
    d_0: np.ndarray
    closed_loop_radius: float
    iterations: int
    residual: float

    def p(self, psi_x=None, psi_u=None) -> np.ndarray:
        return self._affine(self.P_x, self.P_u, self.p_0, psi_x, psi_u)

    def d(self, psi_x=None, psi_u=None) -> np.ndarray:
        return self._affine(self.D_x, self.D_u, self.d_0, psi_x, psi_u)

    @staticmethod
    def _affine(Mx, Mu, m0, psi_x, psi_u):
        out = m0
        if Mx.shape[1] and psi_x is not None:
            out = out + np.asarray(psi_x) @ Mx.T
        if Mu.shape[1] and psi_u is not None:
            out = out + np.asarray(psi_u) @ Mu.T
        return out.copy() if out is m0 else out

    def feedback(self, psi_y: np.ndarray, psi_x=None, psi_u=None) -> np.ndarray:
        """Optimal lifted actuator setting psi_w = -F psi_y - d(psi_x, psi_u)."""
        return -(np.asarray(psi_y) @ self.F.T) - self.d(psi_x, psi_u)

    def value(self, psi_y: np.ndarray, psi_x=None, psi_u=None) -> np.ndarray:
        p = self.p(psi_x, psi_u)
        return np.einsum("...i,ij,...j->...", psi_y, self.P, psi_y) + \
            np.sum(np.asarray(psi_y) * p, axis=-1)


def _dyn_matrices(model: KoopmanBlocks):
    py = model.n_py
    Iy = np.eye(py)
    E = Iy - model.K_yy  # (I - K_yy)
    K_yx = model.K_yx if model.K_yx is not None else np.zeros((py, model.n_px))
    return Iy, E, K_yx


def psd_pinv(Q: np.ndarray, rcond: float = 1e-10) -> np.ndarray:
    """Pseudo-inverse of a (numerically) PSD matrix, raising on indefiniteness.

    Eigen-directions with eigenvalue below ``rcond`` times the largest are
    treated as exactly flat and inverted to zero.  This matters for the
    Bellman minimization over psi_w: lifted actuator coordinates that barely
    influence the dynamics would otherwise receive enormous (unrealizable)
    feedback components; the minimum-norm choice sets them to zero.
    """
    Qs = 0.5 * (Q + Q.T)
    evals, V = np.linalg.eigh(Qs)
    scale = float(np.max(np.abs(evals))) if evals.size else 0.0
    if evals.size and evals[0] < -rcond * scale:
        raise LqrSolveError(
            f"Bellman Hessian over psi_w is indefinite "
            f"(smallest eigenvalue {evals[0]:.3e})")
    keep = evals > rcond * scale
    if not keep.any():
        return np.zeros_like(Qs)
    Vk = V[:, keep]
    return (Vk / evals[keep]) @ Vk.T


def assemble_qrq(model: KoopmanBlocks, cost: CostQuadratic, P: np.ndarray,
                 p_affine: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None):
    """Stationarity pieces of the Bellman minimization over psi_w.

    Returns (Q_mat, F, q_affine) where the minimizer is
    psi_w = -F psi_y - Q_mat^+ q and q = C_x psi_x + C_u psi_u + q_0
    (q_affine = (C_x, C_u, q_0), with the p-dependent term folded in when
    ``p_affine`` is given).
    """
    _, E, K_yx = _dyn_matrices(model)
    K_yw = model.K_yw
    G = K_yw.T @ E.T  # K_yw^T (I - K_yy)^T
    Q_mat = 2.0 * cost.q("w", "w") + 2.0 * G @ P @ E @ K_yw
    R_mat = cost.q("w", "y") + cost.q("y", "w").T + 2.0 * G @ P @ model.K_yy
    F = psd_pinv(Q_mat) @ R_mat
    C_x = 2.0 * G @ P @ E @ K_yx + cost.q("w", "x") + cost.q("x", "w").T
    C_u = cost.q("w", "u") + cost.q("u", "w").T
    q_0 = cost.lin("w").copy()
    if p_affine is not None:
        P_x, P_u, p_0 = p_affine
        C_x = C_x + G @ P_x
        C_u = C_u + G @ P_u
        q_0 = q_0 + G @ p_0
    return Q_mat, F, (C_x, C_u, q_0)


def solve_bellman(model: KoopmanBlocks, cost: CostQuadratic,
                  tol: float = 1e-10, max_iter: int = 20_000,
                  P0: np.ndarray | None = None) -> LqrPolicy:
    """Fixed-point iteration on P (initialized at Q_yy, or a warm start P0),
    then a joint linear solve for the coupled affine maps of p and d.

    ``tol`` is relative to the magnitude of P: entries of P scale like
    1/(1 - rho_cl^2) and can reach 1e4-1e5 when the closed fast loop sits
    close to the unit circle, putting an absolute residual of 1e-10 below
    the float64 rounding floor.  Warm-starting from a previous solution
    (e.g. the last training epoch's P) cuts the iteration cost.
    """
    if model.form not in ("hier", "comb"):
        raise ValueError("LQR needs a form with actuator dynamics")
    _, E, K_yx = _dyn_matrices(model)
    K_yy, K_yw = model.K_yy, model.K_yw
    Q_yy = cost.q("y", "y")
    P = Q_yy.copy() if P0 is None else np.array(P0, dtype=float)
    it, delta = 0, np.inf
    for it in range(1, max_iter + 1):
        Q_mat, F, _ = assemble_qrq(model, cost, P)
        P_new = K_yy.T @ P @ K_yy - 0.5 * F.T @ Q_mat @ F + Q_yy
        P_new = 0.5 * (P_new + P_new.T)
        delta = float(np.max(np.abs(P_new - P)))
        P = P_new
        if delta < tol * max(1.0, float(np.max(np.abs(P)))):
            break
    else:
        raise LqrSolveError(f"P iteration did not converge (last residual {delta:.3e})")
    Q_mat, F, (C_x, C_u, q_0) = assemble_qrq(model, cost, P)

    A_cl = K_yy - E @ K_yw @ F
    rho = spectral_radius(A_cl)
    if rho >= 1.0:
        raise LqrSolveError(f"closed fast loop is unstable (rho = {rho:.6g})")

    # p satisfies (I - K_yy)^T p = -F^T q + G_x psi_x + G_u psi_u + c_y where
    # q itself contains K_yw^T (I - K_yy)^T p; fold and solve the joint system.
    G_x = cost.q("y", "x") + cost.q("x", "y").T + 2.0 * K_yy.T @ P @ E @ K_yx
    G_u = cost.q("u", "y").T + cost.q("y", "u")
    M = (np.eye(model.n_py) + F.T @ K_yw.T) @ E.T
    try:
        sol = np.linalg.solve(M, np.column_stack([
            -F.T @ C_x + G_x,
            -F.T @ C_u + G_u,
            (-F.T @ q_0 + cost.lin("y"))[:, None],
        ]))
    except np.linalg.LinAlgError as e:
        raise LqrSolveError(f"singular (I - K_yy)^T system for p: {e}") from e
    px, pu = model.n_px, model.n_pu
    P_x, P_u, p_0 = sol[:, :px], sol[:, px:px + pu], sol[:, -1]
    GT = K_yw.T @ E.T
    Q_pinv = psd_pinv(Q_mat)
    D_x = Q_pinv @ (C_x + GT @ P_x)
    D_u = Q_pinv @ (C_u + GT @ P_u)
    d_0 = Q_pinv @ (q_0 + GT @ p_0)
    return LqrPolicy(P=P, F=F, P_x=P_x, P_u=P_u, p_0=p_0,
                     D_x=D_x, D_u=D_u, d_0=d_0,
                     closed_loop_radius=rho, iterations=it, residual=delta)


def bellman_rhs(model: KoopmanBlocks, cost: CostQuadratic, policy: LqrPolicy,
                psi_y, psi_w, psi_x=None, psi_u=None) -> float:
    """Stage cost plus value of the next fast state -- the quantity the
    feedback law minimizes over psi_w."""
    px = np.zeros(model.n_px) if psi_x is None else np.asarray(psi_x)
    pu = np.zeros(model.n_pu) if psi_u is None else np.asarray(psi_u)
    stage = cost.evaluate({"y": psi_y, "w": psi_w, "x": px, "u": pu})
    if model.form == "hier":
        y_next, _ = model.step_fast(psi_y, psi_w=psi_w, psi_u=pu)
    else:
        y_next, _ = model.step_fast(psi_y, psi_x=px, psi_w=psi_w, psi_u=pu)
    return stage + policy.value(y_next, px, pu)


def bellman_residuals(policy: LqrPolicy, model: KoopmanBlocks, cost: CostQuadratic,
                      samples: list[tuple] | int = 20, rng=None) -> dict:
    """Decompose the Bellman mismatch V(psi_y) - min_w RHS into quadratic,
    linear and constant parts in psi_y at sample points.

    The quadratic and linear parts vanish for a converged policy; the
    constant part is reported as a diagnostic only (the value ansatz carries
    no constant term, so it cannot be matched in general).
    """
    rng = rng or np.random.default_rng(0)
    if isinstance(samples, int):
        samples = [(rng.standard_normal(model.n_px), rng.standard_normal(model.n_pu))
                   for _ in range(samples)]
    py = model.n_py
    quad = lin = const = 0.0
    for psi_x, psi_u in samples:
        def r(psi_y):
            psi_w = policy.feedback(psi_y, psi_x, psi_u)
            return float(bellman_rhs(model, cost, policy, psi_y, psi_w, psi_x, psi_u)
                         - policy.value(psi_y, psi_x, psi_u))
        r0 = r(np.zeros(py))
        const = max(const, abs(r0))
        e = np.eye(py)
        rp = np.array([r(e[i]) for i in range(py)])
        rm = np.array([r(-e[i]) for i in range(py)])
        lin = max(lin, float(np.max(np.abs(0.5 * (rp - rm)))))
        diag = 0.5 * (rp + rm) - r0
        quad = max(quad, float(np.max(np.abs(diag))))
        for i in range(py):
            for j in range(i + 1, py):
                rij = r(e[i] + e[j])
                off = rij - r0 - (0.5 * (rp[i] - rm[i]) + 0.5 * (rp[j] - rm[j])) \
                    - diag[i] - diag[j]
                quad = max(quad, 0.5 * abs(off))
    return {"quadratic": quad, "linear": lin, "constant": const}
