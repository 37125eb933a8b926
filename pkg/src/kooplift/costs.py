"""Block-quadratic running-cost approximations over lifted variables.

A cost is sum_{i,j} psi_i^T Q_ij psi_j + sum_i c_i^T psi_i + c0 with blocks
indexed by the variable groups u, w, y, x.  Costs built from a known running
cost use a Riemann approximation: the squared-state diagonal entries are set
to the sampling step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GROUPS = ("u", "w", "y", "x")


@dataclass
class CostQuadratic:
    dims: dict[str, int]  # lifted dimension per group (0 if absent)
    Q: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    c: dict[str, np.ndarray] = field(default_factory=dict)
    c0: float = 0.0

    def __post_init__(self):
        for g in GROUPS:
            self.dims.setdefault(g, 0)
        for (i, j), M in self.Q.items():
            if M.shape != (self.dims[i], self.dims[j]):
                raise ValueError(f"Q[{i}{j}] has shape {M.shape}, expected "
                                 f"({self.dims[i]}, {self.dims[j]})")
        for i, v in self.c.items():
            if v.shape != (self.dims[i],):
                raise ValueError(f"c[{i}] has wrong length")

    def q(self, i: str, j: str) -> np.ndarray:
        """Block Q_ij (zeros if unset)."""
        return self.Q.get((i, j), np.zeros((self.dims[i], self.dims[j])))

    def lin(self, i: str) -> np.ndarray:
        return self.c.get(i, np.zeros(self.dims[i]))

    def evaluate(self, psi: dict[str, np.ndarray]) -> np.ndarray:
        """Evaluate at lifted values; each psi[g] is (..., dims[g])."""
        total = np.asarray(self.c0, dtype=float)
        for i in GROUPS:
            if self.dims[i] == 0:
                continue
            pi = psi[i]
            total = total + pi @ self.lin(i)
            for j in GROUPS:
                if self.dims[j] == 0:
                    continue
                if (i, j) in self.Q:
                    total = total + np.einsum("...i,ij,...j->...", pi, self.Q[i, j], psi[j])
        return total

    def scaled(self, alpha: float) -> "CostQuadratic":
        return CostQuadratic(
            dims=dict(self.dims),
            Q={k: alpha * M for k, M in self.Q.items()},
            c={k: alpha * v for k, v in self.c.items()},
            c0=alpha * self.c0,
        )


def _diag_block(dim: int, weights: dict[int, float]) -> np.ndarray:
    M = np.zeros((dim, dim))
    for idx, wgt in weights.items():
        M[idx, idx] = wgt
    return M


def benchmark_running_cost(variant: str, dims: dict[str, int], step: float) -> CostQuadratic:
    """Riemann approximation of the system-level running cost.

    comb: y1^2 + y2^2 + x1^2 + x2^2 + w^2; tss drops the w term; hier drops
    the x terms.  ``step`` is the sampling interval carried on the squared
    state-inclusive diagonal entries.
    """
    Q: dict[tuple[str, str], np.ndarray] = {}
    Q["y", "y"] = _diag_block(dims["y"], {0: step, 1: step})
    if variant in ("tss", "comb"):
        Q["x", "x"] = _diag_block(dims["x"], {0: step, 1: step})
    if variant in ("hier", "comb"):
        Q["w", "w"] = _diag_block(dims["w"], {0: step})
    return CostQuadratic(dims=dict(dims), Q=Q)


def lqr_tracking_cost(dims: dict[str, int], step: float = 1.0,
                      w_reg: float = 1e-2) -> CostQuadratic:
    """Local LQR objective (y1 - u)^2 + w^2 mimicking PI set point matching.

    ``w_reg`` puts a small penalty on the nonlinear lifted actuator
    coordinates (relative to the w^2 weight).  Without it the minimization
    over psi_w is degenerate in directions that barely couple into the
    dynamics, and the resulting feedback would request actuator observables
    no lift of a scalar w can realize.
    """
    if dims.get("u", 0) != 1:
        raise ValueError("tracking cost expects a scalar unlifted u")
    Q: dict[tuple[str, str], np.ndarray] = {}
    Q["y", "y"] = _diag_block(dims["y"], {0: step})
    Q["w", "w"] = _diag_block(dims["w"], {i: step if i == 0 else w_reg * step
                                          for i in range(dims["w"])})
    Q["u", "u"] = np.array([[step]])
    Qyu = np.zeros((dims["y"], 1))
    Qyu[0, 0] = -step  # the -2*y1*u cross term, split symmetrically
    Q["y", "u"] = Qyu
    Q["u", "y"] = Qyu.T.copy()
    return CostQuadratic(dims=dict(dims), Q=Q)
