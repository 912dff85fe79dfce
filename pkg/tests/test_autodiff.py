import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixednet.autodiff import Graph, check_gradients, relative_error
from mixednet.errors import ConfigError, ContractError, DimensionError, DomainError, NumericError


def fd_grad(f, x, h=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += h
        dn[idx] -= h
        grad[idx] = (f(up) - f(dn)) / (2 * h)
    return grad


def test_relu_definition():
    g = Graph()
    assert np.array_equal(g.relu(g.constant([[-1.0, 2.0]])).values, [[0.0, 2.0]])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(3, 3))
    g = Graph()
    assert np.array_equal(g.matmul(g.constant(np.eye(3)), g.constant(M)).values, M)


def test_row_mean_hand_case():
    g = Graph()
    out = g.row_mean(g.constant([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    assert np.array_equal(out.values, [[2.0], [5.0]])


def test_square_gradient():
    g = Graph()
    w = g.leaf([[3.0]], requires_grad=True)
    g.backward(g.sum(g.square(w)))
    assert np.array_equal(w.grad, [[6.0]])


def test_linear_gradient_is_input():
    x = np.array([[1.0, -2.0, 0.5]])
    g = Graph()
    w = g.leaf(np.ones((1, 3)), requires_grad=True)
    g.backward(g.sum(g.mul(w, g.constant(x))))
    assert np.array_equal(w.grad, x)


def test_fan_out_accumulates():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(2, 3))

    def branch(op):
        g = Graph()
        x = g.leaf(x0, requires_grad=True)
        g.backward(g.sum(op(g, x)))
        return x.grad

    f = lambda g, x: g.tanh(x)
    h = lambda g, x: g.square(x)
    both = branch(lambda g, x: g.add(f(g, x), h(g, x)))
    assert np.allclose(both, branch(f) + branch(h), rtol=0, atol=1e-14)


def test_shape_mismatch_names_op_and_shapes():
    g = Graph()
    with pytest.raises(DimensionError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        g.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 3))))
    with pytest.raises(DimensionError, match="add"):
        g.add(g.constant(np.ones((2, 3))), g.constant(np.ones((3, 2))))


def test_log_domain_error():
    g = Graph()
    with pytest.raises(DomainError):
        g.log(g.constant([[1.0, 0.0]]))


def test_non_scalar_loss_rejected():
    g = Graph()
    x = g.leaf(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        g.backward(g.square(x))


def test_debug_mode_flags_non_finite():
    g = Graph(debug=True)
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        g.exp(g.constant([[1000.0]]))


def test_dropout_contracts():
    rng = np.random.default_rng(0)
    g = Graph()
    x = g.constant(rng.normal(size=(4, 5)))
    assert np.array_equal(g.dropout(x, 0.0, True, rng).values, x.values)
    assert np.array_equal(g.dropout(x, 0.5, False, rng).values, x.values)
    with pytest.raises(ConfigError):
        g.dropout(x, 1.0, True, rng)


def test_dropout_survival_fraction_and_scale():
    rng = np.random.default_rng(123)
    g = Graph()
    out = g.dropout(g.constant(np.ones((1000, 1000))), 0.5, True, rng).values
    survived = out != 0
    assert abs(survived.mean() - 0.5) < 0.005
    assert np.all(out[survived] == 2.0)


UNARY = ["relu", "sigmoid", "tanh", "exp", "square", "row_mean", "log"]
BINARY = ["matmul", "add", "sub", "mul", "div"]


def _unary_loss(op, x):
    g = Graph()
    t = g.leaf(x, requires_grad=True)
    out = getattr(g, op)(t)
    loss = g.sum(g.mul(out, g.constant(np.cos(np.arange(out.values.size)).reshape(out.shape))))
    return g, t, loss


@pytest.mark.parametrize("op", UNARY)
def test_unary_ops_match_finite_differences(op):
    rng = np.random.default_rng(UNARY.index(op))
    for _ in range(20):
        x = rng.normal(size=(3, 4))
        if op == "log":
            x = np.abs(x) + 0.1
        if op == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)
        g, t, loss = _unary_loss(op, x)
        g.backward(loss)
        num = fd_grad(lambda v: float(_unary_loss(op, v)[2].values[0, 0]), x)
        assert relative_error(t.grad, num) < 1e-5


@pytest.mark.parametrize("op", BINARY)
def test_binary_ops_match_finite_differences(op):
    rng = np.random.default_rng(10 + BINARY.index(op))
    for _ in range(20):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2)) if op == "matmul" else rng.normal(size=(1, 4))
        if op == "div":
            b = np.abs(b) + 0.5

        def loss(a, b):
            g = Graph()
            ta, tb = g.leaf(a, requires_grad=True), g.leaf(b, requires_grad=True)
            out = getattr(g, op)(ta, tb)
            return g, ta, tb, g.sum(g.tanh(out))

        g, ta, tb, value = loss(a, b)
        g.backward(value)
        num_a = fd_grad(lambda v: float(loss(v, b)[3].values[0, 0]), a)
        num_b = fd_grad(lambda v: float(loss(a, v)[3].values[0, 0]), b)
        assert relative_error(ta.grad, num_a) < 1e-5
        assert relative_error(tb.grad, num_b) < 1e-5


def test_structural_ops_match_finite_differences():
    rng = np.random.default_rng(7)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 2))}

    def build(g, p):
        cat = g.concat_cols([p["a"], p["b"]])
        left = g.slice_cols(cat, 1, 5)
        top = g.slice_rows(left, 0, 2)
        return g.sum(g.square(g.scalar_mul(top, 1.7)))

    errs = check_gradients(build, params)
    assert max(errs.values()) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_backward_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(2, 3))
    grads = []
    for _ in range(2):
        g = Graph()
        x = g.leaf(x0, requires_grad=True)
        g.backward(g.sum(g.sigmoid(g.matmul(x, g.constant(np.ones((3, 1)))))))
        grads.append(x.grad)
    assert np.array_equal(grads[0], grads[1])


def test_grad_shape_matches_values():
    g = Graph()
    x = g.leaf(np.ones((1, 3)), requires_grad=True)
    y = g.leaf(np.ones((4, 3)), requires_grad=True)
    g.backward(g.sum(g.add(y, x)))
    assert x.grad.shape == x.shape and y.grad.shape == y.shape
    assert np.array_equal(x.grad, [[4.0, 4.0, 4.0]])
