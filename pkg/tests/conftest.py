"""Shared small-scale fixtures for the unit tests.

The fixtures train tiny models (few hundred trajectories, two epochs) so unit
tests stay fast; the acceptance suite trains the full-scale models itself.
"""

import numpy as np
import pytest

from kooplift import (SystemConfig, TimeGrid, TrainConfig, generate_dataset,
                      train)


@pytest.fixture(scope="session")
def grid():
    return TimeGrid(0.1, 100)


@pytest.fixture(scope="session")
def tiny_tss(grid):
    cfg = SystemConfig(variant="tss")
    ds = generate_dataset(cfg, grid, n_traj=300, seed=0)
    return train("tss", ds, TrainConfig(epochs=2, seed=0)), cfg


@pytest.fixture(scope="session")
def tiny_hier(grid):
    cfg = SystemConfig(variant="hier")
    ds = generate_dataset(cfg, grid, n_traj=300, seed=0)
    return train("hier", ds, TrainConfig(epochs=2, seed=0,
                                         identity_psi_w=True)), cfg


@pytest.fixture(scope="session")
def tiny_comb(grid):
    cfg = SystemConfig(variant="comb")
    ds = generate_dataset(cfg, grid, n_traj=300, seed=0)
    return train("comb", ds, TrainConfig(epochs=2, seed=0,
                                         identity_psi_w=True)), cfg


def random_stable(rng, n, rho=0.8):
    """Random matrix rescaled to the requested spectral radius."""
    A = rng.standard_normal((n, n))
    r = max(np.abs(np.linalg.eigvals(A)))
    return A * (rho / r)
