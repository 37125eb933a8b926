"""State-inclusive observable maps.

A lifting map sends a state vector v to ``[v ; mlp(v)]`` where the nonlinear
part is a one-hidden-layer tanh network.  The first ``input_dim`` outputs are
the state itself, bit-exactly, for every parameter value.  Forward, Jacobian
and parameter gradients are computed by hand (reverse accumulation) so the
training loop stays plain numpy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass
class LiftingMap:
    input_dim: int
    n_nonlinear: int
    W1: np.ndarray  # (hidden, input_dim)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (n_nonlinear, hidden)
    b2: np.ndarray  # (n_nonlinear,)

    @property
    def output_dim(self) -> int:
        return self.input_dim + self.n_nonlinear

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def create(cls, input_dim: int, n_nonlinear: int, hidden: int = 32,
               rng: np.random.Generator | None = None) -> "LiftingMap":
        """Fan-in scaled uniform init; the output layer starts at zero so the
        initial lifted dynamics reduce to the linear (state) part."""
        rng = rng or np.random.default_rng()
        s = 1.0 / np.sqrt(max(input_dim, 1))
        W1 = rng.uniform(-s, s, size=(hidden, input_dim))
        b1 = np.zeros(hidden)
        W2 = np.zeros((n_nonlinear, hidden))
        b2 = np.zeros(n_nonlinear)
        return cls(input_dim, n_nonlinear, W1, b1, W2, b2)

    @classmethod
    def identity(cls, input_dim: int) -> "LiftingMap":
        """Pure state map (no nonlinear observables), e.g. an unlifted u."""
        return cls(input_dim, 0, np.zeros((0, input_dim)), np.zeros(0),
                   np.zeros((0, 0)), np.zeros(0))

    # -- evaluation ---------------------------------------------------------

    def lift(self, v: np.ndarray) -> np.ndarray:
        """Lift one vector or a batch (..., input_dim) -> (..., output_dim)."""
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.input_dim:
            raise ValueError(f"input has {v.shape[-1]} entries, expected {self.input_dim}")
        if self.n_nonlinear == 0:
            return v.copy()
        h = np.tanh(v @ self.W1.T + self.b1)
        z = h @ self.W2.T + self.b2
        return np.concatenate([v, z], axis=-1)

    def forward(self, V: np.ndarray):
        """Batched lift that also returns the cache needed for backprop."""
        V = np.asarray(V, dtype=float)
        if self.n_nonlinear == 0:
            return V.copy(), (V, None)
        H = np.tanh(V @ self.W1.T + self.b1)
        Z = H @ self.W2.T + self.b2
        return np.concatenate([V, Z], axis=-1), (V, H)

    def backward(self, cache, dPsi: np.ndarray):
        """Reverse accumulation through the map.

        ``dPsi`` has shape (..., output_dim).  Returns (param_grads, dV) where
        param_grads maps 'W1','b1','W2','b2' to arrays (summed over the batch).
        """
        V, H = cache
        n = self.input_dim
        dV = dPsi[..., :n].copy()
        if self.n_nonlinear == 0:
            return {}, dV
        dZ = dPsi[..., n:]
        flatV = V.reshape(-1, n)
        flatH = H.reshape(-1, self.hidden_dim)
        flatZ = dZ.reshape(-1, self.n_nonlinear)
        dW2 = flatZ.T @ flatH
        db2 = flatZ.sum(axis=0)
        dH = dZ @ self.W2
        dA = dH * (1.0 - H**2)
        flatA = dA.reshape(-1, self.hidden_dim)
        dW1 = flatA.T @ flatV
        db1 = flatA.sum(axis=0)
        dV += dA @ self.W1
        return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}, dV

    def jacobian(self, v: np.ndarray) -> np.ndarray:
        """Exact Jacobian d psi / d v at a single point, (output_dim, input_dim)."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.input_dim,):
            raise ValueError("jacobian expects a single state vector")
        top = np.eye(self.input_dim)
        if self.n_nonlinear == 0:
            return top
        h = np.tanh(self.W1 @ v + self.b1)
        bottom = self.W2 @ ((1.0 - h**2)[:, None] * self.W1)
        return np.vstack([top, bottom])

    # -- parameters ---------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        if self.n_nonlinear == 0:
            return {}
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "input_dim": self.input_dim,
            "n_nonlinear": self.n_nonlinear,
            "shapes": {k: list(p.shape) for k, p in
                       (("W1", self.W1), ("b1", self.b1), ("W2", self.W2), ("b2", self.b2))},
            "W1": self.W1.tolist(),
            "b1": self.b1.tolist(),
            "W2": self.W2.tolist(),
            "b2": self.b2.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LiftingMap":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported lifting file version {d.get('format_version')}")
        arrs = {}
        for k in ("W1", "b1", "W2", "b2"):
            arrs[k] = np.asarray(d[k], dtype=float).reshape(d["shapes"][k])
        return cls(int(d["input_dim"]), int(d["n_nonlinear"]), **arrs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "LiftingMap":
        return cls.from_dict(json.loads(Path(path).read_text()))
