import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nfsgate.tensor_core import (
    BCE_EPS,
    MLP,
    DimensionError,
    GradTape,
    Linear,
    Parameters,
    Sigmoid,
    bce_loss,
    bce_with_logits,
    grad_check,
    matmul,
    matmul_backward,
    sigmoid,
)


def central_diff(f, x, h=1e-5):
    x = x.copy()
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(a, np.eye(2)), a)

    def test_hand_checked(self):
        a = np.array([[1.0, 0.0], [0.0, 0.0]])
        b = np.array([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(matmul(a, b), [[0.0, 1.0], [0.0, 0.0]])

    def test_shape_mismatch_message(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.ones((2, 3)), np.ones((2, 2)))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
        r = rng.standard_normal((5, 3))
        da, db = matmul_backward(a, b, r)
        na = central_diff(lambda x: np.sum((x @ b) * r), a)
        nb = central_diff(lambda x: np.sum((a @ x) * r), b)
        for an, nu in ((da, na), (db, nb)):
            rel = np.abs(an - nu) / np.maximum(np.abs(an) + np.abs(nu), 1e-12)
            assert rel.max() <= 1e-6

    @given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)))
    def test_identity_exact(self, x):
        np.testing.assert_array_equal(matmul(x, np.eye(4)), x)


class TestSigmoid:
    def test_values(self):
        assert sigmoid(np.array(0.0)) == 0.5
        assert abs(sigmoid(np.array([40.0]))[0] - 1.0) <= 1e-15
        assert sigmoid(np.array([1.0]))[0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-10)
        assert sigmoid(np.array([1.0]))[0] == pytest.approx(0.7310585786, abs=1e-10)

    def test_large_negative_is_finite(self):
        out = sigmoid(np.array([-1000.0, 1000.0]))
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[1] == 1.0

    def test_grad_check_at_zero(self):
        layer = Sigmoid()
        assert grad_check(layer.forward, layer.backward, np.zeros(1), tol=1e-6)


class TestBCE:
    def test_perfect_prediction(self):
        loss, _ = bce_loss(np.array([1 - BCE_EPS]), np.array([1.0]))
        assert loss == pytest.approx(0.0, abs=1e-11)

    def test_half(self):
        loss, _ = bce_loss(np.array([0.5]), np.array([1.0]))
        assert loss == pytest.approx(math.log(2))

    def test_two_rows(self):
        loss, _ = bce_loss(np.array([0.9, 0.2]), np.array([1.0, 0.0]))
        expected = (-math.log(0.9) - math.log(0.8)) / 2
        assert loss == pytest.approx(expected)
        assert loss == pytest.approx(0.1643, abs=1e-4)

    def test_gradient(self):
        p = np.array([0.3, 0.7, 0.55])
        y = np.array([1.0, 0.0, 1.0])
        _, g = bce_loss(p, y)
        num = central_diff(lambda q: bce_loss(q, y)[0], p)
        np.testing.assert_allclose(g, num, rtol=1e-6)

    def test_clamped_extremes_are_finite(self):
        loss, g = bce_loss(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
        assert np.isfinite(loss) and np.all(np.isfinite(g))

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            bce_loss(np.ones(2) * 0.5, np.ones(3))

    def test_logit_form_agrees(self):
        rng = np.random.default_rng(3)
        z = rng.standard_normal(50) * 3
        y = (rng.random(50) < 0.5).astype(float)
        l1, dz = bce_with_logits(z, y)
        l2, dp = bce_loss(sigmoid(z), y)
        assert l1 == pytest.approx(l2, rel=1e-12)
        p = sigmoid(z)
        np.testing.assert_allclose(dz, dp * p * (1 - p), rtol=1e-9)


class TestGradCheck:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_linear_passes(self, seed):
        rng = np.random.default_rng(seed)
        params = Parameters()
        layer = Linear(params, "lin", 4, 3, rng)
        x = rng.standard_normal((5, 4))
        assert grad_check(layer.forward, layer.backward, x, 1e-4, params=params, seed=seed)

    def test_doubled_backward_fails(self):
        rng = np.random.default_rng(0)
        params = Parameters()
        layer = Linear(params, "lin", 4, 3, rng)
        report = grad_check(layer.forward, lambda dy: 2 * layer.backward(dy),
                            rng.standard_normal((5, 4)), 1e-4)
        assert not report.passed
        assert report.max_rel_error > 0.1

    def test_non_finite_is_diagnosed(self):
        report = grad_check(lambda x: x * np.nan, lambda dy: dy, np.ones(2), 1e-3)
        assert not report.passed

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_mlp_passes(self, seed):
        rng = np.random.default_rng(seed)
        params = Parameters()
        mlp = MLP(params, "mlp", [6, 5, 3], rng)
        x = rng.standard_normal((4, 6))
        assert grad_check(mlp.forward, mlp.backward, x, 1e-3, params=params, seed=seed)


def test_composed_linears_equal_single_linear():
    rng = np.random.default_rng(7)
    params = Parameters()
    l1 = Linear(params, "a", 4, 3, rng)
    l2 = Linear(params, "b", 3, 2, rng)
    params["a.b"][:] = rng.standard_normal(3)
    x = rng.standard_normal((6, 4))
    tape = GradTape()
    h = l1.forward(x)
    tape.record(l1)
    y = l2.forward(h)
    tape.record(l2)
    dy = rng.standard_normal(y.shape)
    dx = tape.backward(dy)

    w = params["a.w"] @ params["b.w"]
    b = params["a.b"] @ params["b.w"] + params["b.b"]
    np.testing.assert_allclose(y, x @ w + b, rtol=1e-12)
    np.testing.assert_allclose(dx, dy @ w.T, rtol=1e-12)


def test_tape_replays_in_reverse():
    order = []

    class Probe:
        def __init__(self, name):
            self.name = name

        def backward(self, dy):
            order.append(self.name)
            return dy

    tape = GradTape()
    for name in "abc":
        tape.record(Probe(name))
    tape.backward(np.zeros(1))
    assert order == ["c", "b", "a"]


def test_zero_grad_and_duplicate_names():
    params = Parameters()
    params.add("w", np.ones(3))
    params.grads["w"] += 5
    params.zero_grad()
    assert np.all(params.grads["w"] == 0)
    with pytest.raises(KeyError):
        params.add("w", np.ones(3))


def test_deterministic_outputs():
    rng = np.random.default_rng(1)
    params = Parameters()
    mlp = MLP(params, "m", [5, 4, 1], rng)
    x = rng.standard_normal((8, 5))
    assert mlp.forward(x).tobytes() == mlp.forward(x).tobytes()
