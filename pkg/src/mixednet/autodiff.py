"""Reverse-mode differentiation over dense 2-D float64 matrices.

A :class:`Graph` is a tape: every operation appends a node holding its input
ids and a closure computing the vector-Jacobian product.  Graphs are built
fresh for every forward pass; model parameters live outside the graph as
plain arrays and enter it as leaves::

    g = Graph()
    w = g.leaf(np.array([[3.0]]), requires_grad=True)
    loss = g.sum(g.square(w))
    g.backward(loss)
    w.grad  # [[6.]]

Broadcasting is limited to row vectors, column vectors and 1x1 scalars.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, DomainError, NumericError

__all__ = [
    "Tensor",
    "Graph",
    "Node",
    "numerical_gradient",
    "check_gradients",
    "relative_error",
]


class Tensor:
    """A matrix value living on a :class:`Graph`."""

    __slots__ = ("values", "grad", "graph", "node_id", "requires_grad", "name")

    def __init__(self, values, graph, node_id, requires_grad=False, name=None):
        self.values = values
        self.grad = None
        self.graph = graph
        self.node_id = node_id
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, id={self.node_id})"

    def _other(self, x):
        if isinstance(x, Tensor):
            return x
        return self.graph.constant(x)

    def __add__(self, other):
        return self.graph.add(self, self._other(other))

    def __radd__(self, other):
        return self.graph.add(self._other(other), self)

    def __sub__(self, other):
        return self.graph.sub(self, self._other(other))

    def __rsub__(self, other):
        return self.graph.sub(self._other(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.graph.scalar_mul(self, float(other))
        return self.graph.mul(self, self._other(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return self.graph.scalar_mul(self, 1.0 / float(other))
        return self.graph.div(self, self._other(other))

    def __rtruediv__(self, other):
        return self.graph.div(self._other(other), self)

    def __matmul__(self, other):
        return self.graph.matmul(self, self._other(other))

    def __rmatmul__(self, other):
        return self.graph.matmul(self._other(other), self)

    def __neg__(self):
        return self.graph.scalar_mul(self, -1.0)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: int
    backward: Callable | None


def _as_matrix(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got array with shape {arr.shape}")
    return arr


def _broadcast_shape(op, a, b):
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise DimensionError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


class Graph:
    """Dynamic tape of operations.

    Parameters
    ----------
    debug : bool
        When true every op checks that its output is finite and raises
        :class:`NumericError` otherwise.
    """

    def __init__(self, debug=False):
        self.nodes: list[Node] = []
        self.tensors: list[Tensor] = []
        self.debug = debug

    # -- construction -----------------------------------------------------
    def leaf(self, values, requires_grad=False, name=None) -> Tensor:
        t = Tensor(_as_matrix(values), self, len(self.tensors), requires_grad, name)
        self.tensors.append(t)
        self.nodes.append(Node("leaf", (), t.node_id, None))
        return t

    def constant(self, values) -> Tensor:
        return self.leaf(values, requires_grad=False)

    def _record(self, op, inputs: Sequence[Tensor], values, backward) -> Tensor:
        for t in inputs:
            if t.graph is not self:
                raise ContractError(f"{op}: input {t!r} belongs to another graph")
        if self.debug and not np.all(np.isfinite(values)):
            raise NumericError(f"{op}: non-finite output")
        req = any(t.requires_grad for t in inputs)
        out = Tensor(values, self, len(self.tensors), req)
        self.tensors.append(out)
        self.nodes.append(
            Node(op, tuple(t.node_id for t in inputs), out.node_id, backward if req else None)
        )
        return out

    # -- binary ops -------------------------------------------------------
    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        av, bv = a.values, b.values

        def backward(g, needs):
            return (g @ bv.T if needs[0] else None, av.T @ g if needs[1] else None)

        return self._record("matmul", (a, b), av @ bv, backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _broadcast_shape("add", a.shape, b.shape)
        sa, sb = a.shape, b.shape

        def backward(g, needs):
            return (_unbroadcast(g, sa), _unbroadcast(g, sb))

        return self._record("add", (a, b), a.values + b.values, backward)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        _broadcast_shape("sub", a.shape, b.shape)
        sa, sb = a.shape, b.shape

        def backward(g, needs):
            return (_unbroadcast(g, sa), -_unbroadcast(g, sb) if needs[1] else None)

        return self._record("sub", (a, b), a.values - b.values, backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        _broadcast_shape("mul", a.shape, b.shape)
        av, bv = a.values, b.values

        def backward(g, needs):
            return (
                _unbroadcast(g * bv, av.shape) if needs[0] else None,
                _unbroadcast(g * av, bv.shape) if needs[1] else None,
            )

        return self._record("mul", (a, b), av * bv, backward)

    def div(self, a: Tensor, b: Tensor) -> Tensor:
        _broadcast_shape("div", a.shape, b.shape)
        if np.any(b.values == 0):
            raise DomainError("div: division by zero")
        av, bv = a.values, b.values
        out = av / bv

        def backward(g, needs):
            return (
                _unbroadcast(g / bv, av.shape) if needs[0] else None,
                _unbroadcast(-g * out / bv, bv.shape) if needs[1] else None,
            )

        return self._record("div", (a, b), out, backward)

    def scalar_mul(self, a: Tensor, c: float) -> Tensor:
        return self._record("scalar_mul", (a,), a.values * c, lambda g, needs: (g * c,))

    def concat_cols(self, tensors: Sequence[Tensor]) -> Tensor:
        rows = {t.shape[0] for t in tensors}
        if len(rows) != 1:
            raise DimensionError(
                f"concat_cols: row counts differ {[t.shape for t in tensors]}"
            )
        edges = np.cumsum([0] + [t.shape[1] for t in tensors])

        def backward(g, needs):
            return tuple(g[:, lo:hi] for lo, hi in zip(edges[:-1], edges[1:]))

        return self._record(
            "concat_cols", tuple(tensors), np.hstack([t.values for t in tensors]), backward
        )

    def slice_cols(self, a: Tensor, start: int, stop: int) -> Tensor:
        shape = a.shape
        if not 0 <= start < stop <= shape[1]:
            raise DimensionError(f"slice_cols: bad range [{start}, {stop}) for shape {shape}")

        def backward(g, needs):
            full = np.zeros(shape)
            full[:, start:stop] = g
            return (full,)

        return self._record("slice_cols", (a,), a.values[:, start:stop], backward)

    def slice_rows(self, a: Tensor, start: int, stop: int) -> Tensor:
        shape = a.shape
        if not 0 <= start < stop <= shape[0]:
            raise DimensionError(f"slice_rows: bad range [{start}, {stop}) for shape {shape}")

        def backward(g, needs):
            full = np.zeros(shape)
            full[start:stop] = g
            return (full,)

        return self._record("slice_rows", (a,), a.values[start:stop], backward)

    # -- reductions -------------------------------------------------------
    def row_mean(self, a: Tensor) -> Tensor:
        n = a.shape[1]
        return self._record(
            "row_mean",
            (a,),
            a.values.mean(axis=1, keepdims=True),
            lambda g, needs: (np.repeat(g / n, n, axis=1),),
        )

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape
        return self._record(
            "sum",
            (a,),
            np.array([[a.values.sum()]]),
            lambda g, needs: (np.full(shape, g[0, 0]),),
        )

    # -- elementwise ------------------------------------------------------
    def relu(self, a: Tensor) -> Tensor:
        mask = a.values > 0
        return self._record("relu", (a,), a.values * mask, lambda g, needs: (g * mask,))

    def sigmoid(self, a: Tensor) -> Tensor:
        x = a.values
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return self._record("sigmoid", (a,), out, lambda g, needs: (g * out * (1.0 - out),))

    def tanh(self, a: Tensor) -> Tensor:
        out = np.tanh(a.values)
        return self._record("tanh", (a,), out, lambda g, needs: (g * (1.0 - out * out),))

    def log(self, a: Tensor) -> Tensor:
        x = a.values
        if np.any(x <= 0):
            raise DomainError(f"log: input has non-positive entries (min {x.min():.3g})")
        return self._record("log", (a,), np.log(x), lambda g, needs: (g / x,))

    def exp(self, a: Tensor) -> Tensor:
        out = np.exp(a.values)
        return self._record("exp", (a,), out, lambda g, needs: (g * out,))

    def square(self, a: Tensor) -> Tensor:
        x = a.values
        return self._record("square", (a,), x * x, lambda g, needs: (2.0 * g * x,))

    def dropout(self, a: Tensor, rate: float, training: bool, rng) -> Tensor:
        """Inverted dropout: survivors are scaled by ``1/(1-rate)``."""
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        if not training or rate == 0.0:
            return a
        mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
        return self._record("dropout", (a,), a.values * mask, lambda g, needs: (g * mask,))

    # -- backward ---------------------------------------------------------
    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every tensor that ``loss`` depends on.

        Gradients accumulate into ``.grad`` if it is already set, so a
        parameter shared by several branches receives the sum.
        """
        if loss.graph is not self:
            raise ContractError("loss belongs to another graph")
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a 1x1 loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
        tensors = self.tensors
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(node.output, None)
            if g is None:
                continue
            out = tensors[node.output]
            if node.backward is None:
                if out.requires_grad:
                    out.grad = g if out.grad is None else out.grad + g
                continue
            needs = tuple(tensors[i].requires_grad for i in node.inputs)
            for i, gi, need in zip(node.inputs, node.backward(g, needs), needs):
                if not need or gi is None:
                    continue
                prev = grads.get(i)
                grads[i] = gi if prev is None else prev + gi


def relative_error(analytic, numeric, floor=1e-8):
    """Norm-wise relative difference between two gradient arrays."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def numerical_gradient(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(build_loss, params, h=1e-6):
    """Compare tape gradients against central finite differences.

    Parameters
    ----------
    build_loss : callable
        ``build_loss(graph, leaves) -> Tensor`` where ``leaves`` maps every
        name in ``params`` to a leaf tensor on ``graph``.  Must be a pure
        function of the parameter values (reseed any rng inside it).
    params : dict of str -> ndarray

    Returns
    -------
    dict of str -> float
        Norm-wise relative error per parameter.
    """
    g = Graph()
    leaves = {k: g.leaf(v, requires_grad=True, name=k) for k, v in params.items()}
    loss = build_loss(g, leaves)
    g.backward(loss)
    errors = {}
    for name, value in params.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(leaves[name].values)

        def f(x, name=name):
            gg = Graph()
            lv = {
                k: gg.leaf(x if k == name else v, requires_grad=False)
                for k, v in params.items()
            }
            return float(build_loss(gg, lv).values[0, 0])

        numeric = numerical_gradient(f, _as_matrix(value), h)
        errors[name] = relative_error(analytic, numeric)
    return errors
