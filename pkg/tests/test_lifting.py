"""State-inclusion, derivative and serialization tests for the lifting maps."""

import numpy as np
import pytest

from kooplift import LiftingMap


def _random_map(rng, input_dim=2, n_nonlinear=3, hidden=4):
    lf = LiftingMap.create(input_dim, n_nonlinear, hidden, rng)
    lf.W2 += 0.3 * rng.standard_normal(lf.W2.shape)
    lf.b1 += 0.1 * rng.standard_normal(lf.b1.shape)
    lf.b2 += 0.1 * rng.standard_normal(lf.b2.shape)
    return lf


def test_state_inclusion_bit_exact():
    rng = np.random.default_rng(0)
    lf = _random_map(rng)
    V = rng.standard_normal((10, 2))
    out = lf.lift(V)
    assert out.shape == (10, 5)
    assert np.array_equal(out[:, :2], V)  # exact, not approximate
    fwd, _ = lf.forward(V)
    assert np.array_equal(fwd, out)


def test_identity_map():
    lf = LiftingMap.identity(3)
    V = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(lf.lift(V), V)
    assert lf.output_dim == 3
    assert lf.params() == {}
    J = lf.jacobian(V[0])
    assert np.array_equal(J, np.eye(3))


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(1)
    lf = _random_map(rng)
    v = rng.standard_normal(2)
    J = lf.jacobian(v)
    eps = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = eps
        fd = (lf.lift(v + e) - lf.lift(v - e)) / (2 * eps)
        np.testing.assert_allclose(J[:, k], fd, atol=1e-8)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    lf = _random_map(rng)
    V = rng.standard_normal((5, 2))
    weights = rng.standard_normal((5, lf.output_dim))

    def objective(lmap):
        return float(np.sum(weights * lmap.lift(V)))

    out, cache = lf.forward(V)
    grads, dV = lf.backward(cache, weights)
    eps = 1e-6
    for name, arr in lf.params().items():
        g = grads[name]
        idx_iter = list(np.ndindex(arr.shape))[:6]
        for idx in idx_iter:
            orig = arr[idx]
            arr[idx] = orig + eps
            hi = objective(lf)
            arr[idx] = orig - eps
            lo = objective(lf)
            arr[idx] = orig
            assert g[idx] == pytest.approx((hi - lo) / (2 * eps), abs=1e-5)
    # input gradient
    for i in range(2):
        e = np.zeros((5, 2))
        e[0, i] = eps
        fd = (float(np.sum(weights * lf.lift(V + e)))
              - float(np.sum(weights * lf.lift(V - e)))) / (2 * eps)
        assert dV[0, i] == pytest.approx(fd, abs=1e-5)


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    lf = _random_map(rng)
    path = tmp_path / "lift.json"
    lf.save(path)
    back = LiftingMap.load(path)
    V = rng.standard_normal((4, 2))
    np.testing.assert_array_equal(back.lift(V), lf.lift(V))
    for k, p in lf.params().items():
        np.testing.assert_array_equal(back.params()[k], p)


def test_input_dim_validation():
    lf = LiftingMap.identity(2)
    with pytest.raises(ValueError):
        lf.lift(np.zeros(3))
    with pytest.raises(ValueError):
        lf.jacobian(np.zeros((2, 2)))
