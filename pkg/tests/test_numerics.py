import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from eendvad import numerics as nx
from eendvad.numerics import DimensionError, NumericError, Tape, Tensor


def central_diff(f, x, h=1e-5):
    """Numeric gradient of a scalar numpy function, one coordinate at a time."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_matmul_identity_and_hand_value():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.matmul(np.eye(2), m).data, m)
    assert nx.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_gradient_against_finite_differences():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    tape = Tape()
    ta = tape.watch(a, "a")
    grads = tape.backward(nx.sum_all(nx.matmul(ta, b)))
    numeric = central_diff(lambda x: np.sum(x @ b), a)
    np.testing.assert_allclose(grads["a"], numeric, rtol=1e-7, atol=1e-8)
    np.testing.assert_allclose(grads["a"], np.ones((5, 3)) @ b.T, rtol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax_rows([[0.0, 0.0, 0.0]]).data, [[1 / 3] * 3], atol=1e-15)
    sat = nx.softmax_rows([[1000.0, 0.0]]).data
    assert abs(sat[0, 0] - 1.0) < 1e-12 and abs(sat[0, 1]) < 1e-12
    mpmath.mp.dps = 40
    exps = [mpmath.e ** k for k in (1, 2, 3)]
    oracle = [float(e / sum(exps)) for e in exps]
    np.testing.assert_allclose(nx.softmax_rows([[1.0, 2.0, 3.0]]).data[0], oracle, rtol=1e-14)


def test_sigmoid_examples():
    assert nx.sigmoid(0.0).item() == 0.5
    with np.errstate(all="raise"):
        assert 0.0 <= nx.sigmoid(-1000.0).item() < 1e-300
    mpmath.mp.dps = 40
    assert nx.sigmoid(1.0).item() == pytest.approx(float(1 / (1 + mpmath.e ** -1)), rel=1e-15)


def lstm_params(rng, d, scale=0.5):
    return (rng.normal(scale=scale, size=(d, 4 * d)), rng.normal(scale=scale, size=(d, 4 * d)),
            rng.normal(scale=scale, size=4 * d))


def test_lstm_zero_everything():
    d = 3
    h, c = nx.lstm_cell(np.zeros(d), np.zeros(d), np.zeros(d),
                        np.zeros((d, 4 * d)), np.zeros((d, 4 * d)), np.zeros(4 * d))
    assert not h.data.any() and not c.data.any()


def test_lstm_forget_gate_saturation():
    rng = np.random.default_rng(2)
    d = 4
    wx, wh, b = lstm_params(rng, d)
    b = b.copy()
    b[d:2 * d] = 1e3
    h0, c0, x = rng.normal(size=d), rng.normal(size=d), rng.normal(size=d)
    _, c = nx.lstm_cell(h0, c0, x, wx, wh, b)
    z = x @ wx + h0 @ wh + b
    i = 1 / (1 + np.exp(-z[:d]))
    g = np.tanh(z[2 * d:3 * d])
    np.testing.assert_allclose(c.data, c0 + i * g, rtol=1e-12)


def test_lstm_gradients():
    rng = np.random.default_rng(3)
    d = 3
    wx, wh, b = lstm_params(rng, d)
    params = {"h": rng.normal(size=d), "c": rng.normal(size=d), "x": rng.normal(size=d),
              "wx": wx, "wh": wh, "b": b}

    def f(p):
        h, c = nx.lstm_cell(p["h"], p["c"], p["x"], p["wx"], p["wh"], p["b"])
        h, c = nx.lstm_cell(h, c, p["x"], p["wx"], p["wh"], p["b"])
        return nx.sum_all(h * h) + nx.sum_all(c * 0.7)

    assert nx.grad_check(f, params) < 1e-4


def test_lstm_dimension_mismatch():
    with pytest.raises(DimensionError):
        nx.lstm_cell(np.zeros(3), np.zeros(2), np.zeros(3),
                     np.zeros((3, 12)), np.zeros((3, 12)), np.zeros(12))


def test_grad_check_trivial_functions():
    rng = np.random.default_rng(4)
    params = {"w": rng.normal(size=(3, 2))}
    assert nx.grad_check(lambda p: nx.sum_all(p["w"] * p["w"]), params) < 1e-8
    tape = Tape()
    tape.watch(params["w"], "w")
    grads = tape.backward(tape.watch(5.0) * 1.0)
    assert not grads["w"].any()
    assert nx.grad_check(lambda p: nx.sum_all(p["w"] * 0.0) + 3.0, params) == 0.0


def test_grad_check_rejects_non_finite():
    with pytest.raises(NumericError):
        nx.grad_check(lambda p: nx.log(p["x"] - p["x"]), {"x": np.ones(1)})


def test_non_finite_is_an_error():
    with pytest.raises(NumericError):
        nx.log(np.array([0.0]))


def test_tensors_are_immutable():
    src = np.ones(3)
    t = Tensor(src)
    src[0] = 5.0
    assert t.data[0] == 1.0
    with pytest.raises(ValueError):
        t.data[0] = 2.0


def test_forward_without_tape_records_nothing():
    t = nx.matmul(np.ones((2, 2)), np.ones((2, 2)))
    assert t.tape is None


def test_backward_visits_ops_in_reverse_order():
    order = []
    tape = Tape()
    x = tape.watch(np.array(2.0), "x")
    y = nx.mul(x, 3.0)
    z = nx.mul(y, y)
    ops = tape.ops
    for n, (ins, outs, back) in enumerate(list(ops)):
        ops[n] = (ins, outs, lambda gs, back=back, n=n: order.append(n) or back(gs))
    assert tape.backward(z)["x"] == pytest.approx(2 * 9 * 2.0)
    assert order == [1, 0]


def test_mixing_tapes_is_rejected():
    a, b = Tape().watch(1.0), Tape().watch(2.0)
    with pytest.raises(ValueError):
        nx.add(a, b)


shapes = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))


@settings(max_examples=30, deadline=None)
@given(shapes, st.integers(0, 2**31))
def test_differentiable_ops_pass_grad_check(dims, seed):
    m, k, n = dims
    rng = np.random.default_rng(seed)
    params = {"a": rng.normal(size=(m, k)), "b": rng.normal(size=(k, n)),
              "g": rng.normal(size=n), "beta": rng.normal(size=n), "w": rng.normal(size=(m, n))}

    def f(p):
        z = nx.matmul(p["a"], p["b"])
        s = nx.softmax_rows(z)
        ln = nx.layer_norm(nx.tanh(z), p["g"], p["beta"]) if n > 1 else z
        return (nx.sum_all(s * p["w"]) + nx.mean_all(nx.sigmoid(ln) * p["w"])
                + nx.sum_all(nx.relu(z + 0.1) * 0.3) + nx.sum_all(nx.log_sigmoid(z)))

    assert nx.grad_check(f, params, h=1e-5) < 1e-4


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
              elements=st.floats(-700, 700)))
def test_softmax_rows_sum_to_one(x):
    y = nx.softmax_rows(x).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
    assert (y >= 0).all()


@given(st.integers(0, 2**31))
def test_matmul_associativity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(2, 5))
    left = nx.matmul(nx.matmul(a, b), c).data
    right = nx.matmul(a, nx.matmul(b, c)).data
    np.testing.assert_allclose(left, right, atol=1e-9)


def test_sigmoid_range():
    x = np.linspace(-30, 30, 101)
    y = nx.sigmoid(x).data
    assert ((y > 0) & (y < 1)).all()
    assert math.isclose(y[50], 0.5)
