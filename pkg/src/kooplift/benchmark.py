"""Continuous-time benchmark dynamics and a multirate fixed-step integrator.

The benchmark couples a slowly evolving van der Pol oscillator (states x) to a
fast Duffing oscillator (states y), optionally with a PI-controlled actuator w
that tries to match y1 to a supervisory set point u.  Three configurations are
supported:

* ``tss``  -- two-time-scale only: x and y, no actuator, no control.
* ``hier`` -- hierarchical control only: y and w with set point u, no x.
* ``comb`` -- the full system: x, y, w, u.

The fast subsystem evolves ``epsilon_rate`` times faster than the slow one;
its right-hand sides carry the rate multiplier directly, and the fast sampling
step is ``tau = dt_slow / m``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

VARIANTS = ("tss", "hier", "comb")


class DivergenceError(RuntimeError):
    """Raised when an integrated state exceeds the blow-up threshold."""

    def __init__(self, t: float, norm: float):
        super().__init__(f"state diverged at t={t:.6g} (|state|={norm:.3g} > 1e6)")
        self.t = t


@dataclass
class SystemConfig:
    """Benchmark configuration: variant, scale ratio and PI gains."""

    variant: str = "comb"
    epsilon_rate: float = 100.0
    k1: float | None = None  # PI proportional gain; defaults to 1/epsilon_rate
    k2: float = 1.0
    couple_x_to_y: bool = True  # the 0.5*x2^2 forcing on the Duffing
    couple_y_to_x: bool = True  # the y1 forcing on the van der Pol

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.epsilon_rate < 1.0:
            raise ValueError("epsilon_rate must be >= 1")
        if self.k1 is None:
            self.k1 = 1.0 / self.epsilon_rate

    @property
    def has_x(self) -> bool:
        return self.variant in ("tss", "comb")

    @property
    def has_w(self) -> bool:
        return self.variant in ("hier", "comb")

    @property
    def n_state(self) -> int:
        # packed layout: [x1, x2]? + [y1, y2] + [w]?
        return 2 * self.has_x + 2 + self.has_w

    @property
    def x_slice(self) -> slice:
        return slice(0, 2) if self.has_x else slice(0, 0)

    @property
    def y_slice(self) -> slice:
        off = 2 * self.has_x
        return slice(off, off + 2)

    @property
    def w_index(self) -> int | None:
        return self.n_state - 1 if self.has_w else None

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "epsilon_rate": self.epsilon_rate,
            "k1": self.k1,
            "k2": self.k2,
            "couple_x_to_y": self.couple_x_to_y,
            "couple_y_to_x": self.couple_y_to_x,
        }


@dataclass
class TimeGrid:
    """Slow step size and the number of fast substeps per slow step."""

    dt_slow: float = 0.1
    m: int = 100

    def __post_init__(self):
        if self.dt_slow <= 0 or self.m < 1:
            raise ValueError("need dt_slow > 0 and m >= 1")

    @property
    def tau(self) -> float:
        return self.dt_slow / self.m

    def to_dict(self) -> dict:
        return {"dt_slow": self.dt_slow, "m": self.m}


@dataclass
class ScaleState:
    """Partitioned system state at one instant."""

    x: np.ndarray  # slow states, length 2 (empty for hier)
    y: np.ndarray  # fast states, length 2
    w: float | None = None  # actuator (None for tss)
    u: float | None = None  # control set point (None for tss)
    t: float = 0.0

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        vals = [self.x, self.y] + [np.atleast_1d(v) for v in (self.w, self.u) if v is not None]
        if not all(np.all(np.isfinite(v)) for v in vals):
            raise ValueError("non-finite entries in state")

    def pack(self, config: SystemConfig) -> np.ndarray:
        parts = []
        if config.has_x:
            if self.x.shape != (2,):
                raise ValueError("x must have length 2 for this configuration")
            parts.append(self.x)
        elif self.x.size:
            raise ValueError("variant has no slow states")
        if self.y.shape != (2,):
            raise ValueError("y must have length 2")
        parts.append(self.y)
        if config.has_w:
            if self.w is None:
                raise ValueError("variant requires an actuator state w")
            parts.append(np.array([float(self.w)]))
        return np.concatenate(parts)

    @classmethod
    def unpack(cls, v: np.ndarray, config: SystemConfig, u: float | None = None,
               t: float = 0.0) -> "ScaleState":
        v = np.asarray(v, dtype=float)
        w = float(v[config.w_index]) if config.has_w else None
        return cls(x=v[config.x_slice].copy(), y=v[config.y_slice].copy(), w=w, u=u, t=t)


def rhs(state: np.ndarray | ScaleState, config: SystemConfig,
        u: float | np.ndarray = 0.0) -> np.ndarray:
    """Time derivative of the packed benchmark state.

    Accepts a packed array of shape ``(..., n_state)`` (batched) or a
    :class:`ScaleState`.  ``u`` broadcasts over leading dimensions.  Fast
    components (y and the actuator's proportional channel) carry the
    ``epsilon_rate`` multiplier.
    """
    if isinstance(state, ScaleState):
        if state.u is not None:
            u = state.u
        state = state.pack(config)
    v = np.asarray(state, dtype=float)
    if v.shape[-1] != config.n_state:
        raise ValueError(f"state has {v.shape[-1]} entries, expected {config.n_state}")
    rate = config.epsilon_rate
    u = np.asarray(u, dtype=float)

    y1 = v[..., config.y_slice.start]
    y2 = v[..., config.y_slice.start + 1]
    out = np.empty_like(v)

    if config.has_x:
        x1, x2 = v[..., 0], v[..., 1]
        out[..., 0] = x2
        out[..., 1] = -0.5 * (1.0 - x1**2) * x2 - x1 + (y1 if config.couple_y_to_x else 0.0)
        x_force = 0.5 * x2**2 if config.couple_x_to_y else 0.0
    else:
        x_force = 0.0

    w_force = 0.0
    if config.has_w:
        w = v[..., config.w_index]
        w_force = -2.0 * w
        out[..., config.w_index] = rate * config.k1 * y2 + config.k2 * (y1 - u)

    out[..., config.y_slice.start] = rate * y2
    out[..., config.y_slice.start + 1] = rate * (-2.0 * y2 - y1 - y1**3 + x_force + w_force)
    return out


def fast_equilibrium_state(config: SystemConfig, x: np.ndarray | None = None,
                           u: float | np.ndarray = 0.0) -> np.ndarray:
    """Packed states with the fast variables at their algebraic equilibrium.

    Solves rhs = 0 for (y, w) given the slow state ``x`` and input ``u``:
    y2* = 0 everywhere; with an actuator, y1* = u and w* balances the Duffing
    equation; without one, y1* is the real root of y1 + y1^3 = x_force.
    Accepts batched ``x`` of shape (..., 2); returns (..., n_state).
    """
    u = np.asarray(u, dtype=float)
    if config.has_x:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        x_force = 0.5 * x[..., 1] ** 2 if config.couple_x_to_y else np.zeros(x.shape[:-1])
    else:
        x_force = np.zeros(np.shape(u))
    if config.has_w:
        y1 = np.broadcast_to(u, x_force.shape).astype(float)
        w = 0.5 * (-y1 - y1**3 + x_force)
    else:
        # real root of y1 + y1^3 = x_force (Cardano, discriminant > 0)
        q = -x_force
        s = np.sqrt(q**2 / 4.0 + 1.0 / 27.0)
        y1 = np.cbrt(-q / 2.0 + s) + np.cbrt(-q / 2.0 - s)
        w = None
    y = np.stack([y1, np.zeros_like(y1)], axis=-1)
    parts = []
    if config.has_x:
        parts.append(x)
    parts.append(y)
    if config.has_w:
        parts.append(w[..., None])
    return np.concatenate(parts, axis=-1)


def _rk4_step(v: np.ndarray, h: float, config: SystemConfig, u) -> np.ndarray:
    # diverging trajectories may overflow mid-stage; the caller's threshold
    # check turns the resulting non-finite values into a mask or an error
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = rhs(v, config, u)
        k2 = rhs(v + 0.5 * h * k1, config, u)
        k3 = rhs(v + 0.5 * h * k2, config, u)
        k4 = rhs(v + h * k3, config, u)
        return v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class Trajectory:
    """Fast-resolution samples of one or more trajectories.

    ``states`` has shape ``(n_traj, n_slow * m + 1, n_state)`` with samples at
    every tau; slow samples are the rows at multiples of ``m``.
    """

    config: SystemConfig
    grid: TimeGrid
    times: np.ndarray  # (n_slow * m + 1,)
    states: np.ndarray  # (n_traj, n_samples, n_state)
    controls: np.ndarray  # (n_traj, n_slow) piecewise-constant u (zeros for tss)

    @property
    def n_slow(self) -> int:
        return self.controls.shape[1]

    def slow_x(self) -> np.ndarray:
        """Slow-state samples at multiples of dt_slow, shape (n_traj, n_slow+1, 2)."""
        return self.states[:, :: self.grid.m, self.config.x_slice]

    def fast_y(self) -> np.ndarray:
        return self.states[:, :, self.config.y_slice]

    def fast_w(self) -> np.ndarray:
        if not self.config.has_w:
            raise ValueError("variant has no actuator state")
        return self.states[:, :, self.config.w_index]


def integrate_batch(v0: np.ndarray, u_seq: np.ndarray, grid: TimeGrid,
                    n_slow: int, config: SystemConfig, substeps: int = 5,
                    on_divergence: str = "raise") -> tuple[Trajectory, np.ndarray]:
    """Integrate a batch of initial states with classical RK4.

    ``v0``: (n_traj, n_state) packed initial states.  ``u_seq``: (n_traj,
    n_slow) piecewise-constant controls (ignored width-0 for tss).  The
    internal step is ``tau / substeps`` (substeps >= 5 keeps it at or below
    tau/5).  Returns the trajectory and a boolean ok-mask; with
    ``on_divergence="raise"`` a blow-up raises :class:`DivergenceError`
    naming the time of failure.
    """
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    if not np.all(np.isfinite(v0)):
        raise ValueError("non-finite initial state")
    n_traj = v0.shape[0]
    if config.variant == "tss":
        u_seq = np.zeros((n_traj, n_slow))
    else:
        u_seq = np.broadcast_to(np.asarray(u_seq, dtype=float), (n_traj, n_slow)).copy()
    h = grid.tau / substeps
    n_samples = n_slow * grid.m + 1
    states = np.empty((n_traj, n_samples, config.n_state))
    states[:, 0] = v0
    ok = np.ones(n_traj, dtype=bool)
    v = v0.copy()
    for t in range(n_slow):
        u = u_seq[:, t]
        for n in range(grid.m):
            for _ in range(substeps):
                v[ok] = _rk4_step(v[ok], h, config, u[ok])
            with np.errstate(invalid="ignore"):
                bad = ok & ~(np.max(np.abs(v), axis=1) < 1e6)
            if bad.any():
                if on_divergence == "raise":
                    t_fail = t * grid.dt_slow + (n + 1) * grid.tau
                    vals = np.abs(v[bad])
                    finite = vals[np.isfinite(vals)]
                    raise DivergenceError(
                        t_fail, float(finite.max()) if finite.size else np.inf)
                ok &= ~bad
                v[bad] = np.nan
            states[:, t * grid.m + n + 1] = v
    times = np.arange(n_samples) * grid.tau
    return Trajectory(config=config, grid=grid, times=times, states=states,
                      controls=u_seq), ok


def integrate(initial: ScaleState, u_signal: Sequence[float] | float,
              grid: TimeGrid, n_slow_steps: int, config: SystemConfig,
              substeps: int = 5) -> Trajectory:
    """Integrate a single trajectory; thin wrapper over :func:`integrate_batch`."""
    v0 = initial.pack(config)[None, :]
    if np.isscalar(u_signal):
        u_seq = np.full((1, n_slow_steps), float(u_signal))
    else:
        u_seq = np.asarray(u_signal, dtype=float)[None, :]
        if u_seq.shape[1] != n_slow_steps:
            raise ValueError("u_signal must be defined on every slow step")
    traj, _ = integrate_batch(v0, u_seq, grid, n_slow_steps, config, substeps=substeps)
    return traj


def save_trajectories(traj: Trajectory, csv_path: str | Path,
                      seed: int | None = None) -> None:
    """Write trajectories as columnar CSV plus a JSON metadata sidecar."""
    csv_path = Path(csv_path)
    cfg = traj.config
    cols = ["t"]
    if cfg.has_x:
        cols += ["x1", "x2"]
    cols += ["y1", "y2"]
    if cfg.has_w:
        cols += ["w"]
    cols += ["u", "traj_id"]
    m = traj.grid.m
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(cols)
        for i in range(traj.states.shape[0]):
            for k, t in enumerate(traj.times):
                slow_idx = min(k // m, traj.n_slow - 1)
                u = traj.controls[i, slow_idx] if traj.n_slow else 0.0
                row = [repr(float(t))]
                row += [repr(float(s)) for s in traj.states[i, k]]
                row += [repr(float(u)), i]
                wr.writerow(row)
    sidecar = {
        "config": cfg.to_dict(),
        "grid": traj.grid.to_dict(),
        "n_traj": int(traj.states.shape[0]),
        "n_slow": int(traj.n_slow),
        "seed": seed,
    }
    csv_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))
