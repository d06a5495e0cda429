"""Reverse-mode automatic differentiation over a fixed matrix op set.

Graphs are built define-by-run: creating a node computes its value
immediately, so the node list is always in topological order. A graph can
be re-evaluated after rebinding leaf values (`forward`), which is what the
finite-difference checker uses. `backward` accumulates adjoints in reverse
creation order; nodes never reached from the root keep an exactly-zero
adjoint, which is what makes gradient truncation bitwise rather than
approximately zero.

Op set: leaf, matmul, add, sub, hadamard, scale, transpose, relu, tanh,
exp, log, sqrt, sum-all, mean-columns, mean-rows, row-l2-normalize,
row-broadcast-sub, hinge(gamma), square, softmax-rows, select-off-diagonal.
Everything else (bias add, centering, log-sum-exp) is composed from these.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Matrix, ShapeError

# sqrt adjoints divide by 2*sqrt(x); inputs below this floor are clamped so
# the adjoint stays finite even if a caller skips the usual +1e-7 guard.
SQRT_GRAD_FLOOR = 1e-12

# Norm floor in the row-l2-normalize adjoint; the guarded term vanishes
# quadratically as the row approaches zero, so the floor never distorts it.
_NORM_FLOOR = 1e-30


class Node:
    """One operation in the graph: op kind, input nodes, current value."""

    __slots__ = ("graph", "idx", "op", "inputs", "value", "requires_grad", "payload", "name")

    def __init__(self, graph, idx, op, inputs, value, requires_grad, payload=None, name=None):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.inputs = inputs
        self.value = value
        self.requires_grad = requires_grad
        self.payload = payload
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node#{self.idx}({label}, {self.value.rows}x{self.value.cols})"


class GradientMap:
    """Adjoints of requires-grad leaves, keyed by node."""

    def __init__(self, entries: dict[int, Matrix], nodes: dict[int, Node]):
        self._entries = entries
        self._nodes = nodes

    def __getitem__(self, node: Node) -> Matrix:
        return self._entries[node.idx]

    def __contains__(self, node: Node) -> bool:
        return node.idx in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        for idx, grad in self._entries.items():
            yield self._nodes[idx], grad


def _shape_err(op: str, msg: str, *nodes: Node) -> ShapeError:
    parts = ", ".join(f"{n!r}" for n in nodes)
    return ShapeError(f"{op}: {msg} (inputs: {parts})")


class Graph:
    """A define-by-run computation graph over Matrix values."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- construction ---------------------------------------------------

    def _add(self, op, inputs, value, requires_grad, payload=None, name=None) -> Node:
        node = Node(self, len(self.nodes), op, tuple(inputs), value,
                    requires_grad, payload, name)
        self.nodes.append(node)
        return node

    def leaf(self, value: Matrix, requires_grad: bool = False, name: Optional[str] = None) -> Node:
        return self._add("leaf", (), value, requires_grad, name=name)

    def constant(self, value: Matrix, name: Optional[str] = None) -> Node:
        return self._add("leaf", (), value, False, name=name)

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.cols != b.value.rows:
            raise _shape_err("matmul", f"inner dims differ {a.shape} x {b.shape}", a, b)
        return self._add("matmul", (a, b), Matrix._wrap(a.value.a @ b.value.a),
                         a.requires_grad or b.requires_grad)

    def add(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise _shape_err("add", f"shapes differ {a.shape} vs {b.shape}", a, b)
        return self._add("add", (a, b), Matrix._wrap(a.value.a + b.value.a),
                         a.requires_grad or b.requires_grad)

    def sub(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise _shape_err("sub", f"shapes differ {a.shape} vs {b.shape}", a, b)
        return self._add("sub", (a, b), Matrix._wrap(a.value.a - b.value.a),
                         a.requires_grad or b.requires_grad)

    def hadamard(self, a: Node, b: Node) -> Node:
        if a.shape != b.shape:
            raise _shape_err("hadamard", f"shapes differ {a.shape} vs {b.shape}", a, b)
        return self._add("hadamard", (a, b), Matrix._wrap(a.value.a * b.value.a),
                         a.requires_grad or b.requires_grad)

    def scale(self, a: Node, c: float) -> Node:
        return self._add("scale", (a,), Matrix._wrap(a.value.a * float(c)),
                         a.requires_grad, payload=float(c))

    def transpose(self, a: Node) -> Node:
        return self._add("transpose", (a,), Matrix._wrap(a.value.a.T), a.requires_grad)

    def relu(self, a: Node) -> Node:
        return self._add("relu", (a,), Matrix._wrap(np.maximum(a.value.a, 0.0)),
                         a.requires_grad)

    def tanh(self, a: Node) -> Node:
        return self._add("tanh", (a,), Matrix._wrap(np.tanh(a.value.a)), a.requires_grad)

    def exp(self, a: Node) -> Node:
        return self._add("exp", (a,), Matrix._wrap(np.exp(a.value.a)), a.requires_grad)

    def log(self, a: Node) -> Node:
        return self._add("log", (a,), Matrix._wrap(np.log(a.value.a)), a.requires_grad)

    def sqrt(self, a: Node) -> Node:
        return self._add("sqrt", (a,), Matrix._wrap(np.sqrt(a.value.a)), a.requires_grad)

    def square(self, a: Node) -> Node:
        return self._add("square", (a,), Matrix._wrap(a.value.a * a.value.a), a.requires_grad)

    def sum_all(self, a: Node) -> Node:
        return self._add("sum-all", (a,), Matrix([[float(a.value.a.sum())]]), a.requires_grad)

    def mean_columns(self, a: Node) -> Node:
        """Per-column mean: N x C -> 1 x C."""
        return self._add("mean-columns", (a,),
                         Matrix._wrap(a.value.a.mean(axis=0, keepdims=True)), a.requires_grad)

    def mean_rows(self, a: Node) -> Node:
        """Per-row mean: N x C -> N x 1."""
        return self._add("mean-rows", (a,),
                         Matrix._wrap(a.value.a.mean(axis=1, keepdims=True)), a.requires_grad)

    def row_l2_normalize(self, a: Node, eps: float) -> Node:
        norms = np.linalg.norm(a.value.a, axis=1, keepdims=True)
        value = Matrix._wrap(a.value.a / (norms + eps))
        return self._add("row-l2-normalize", (a,), value, a.requires_grad, payload=float(eps))

    def row_broadcast_sub(self, a: Node, v: Node) -> Node:
        """Subtract the 1 x C row vector v from every row of a (N x C)."""
        if v.value.rows != 1 or v.value.cols != a.value.cols:
            raise _shape_err("row-broadcast-sub",
                             f"expected 1x{a.value.cols} row vector, got {v.shape}", a, v)
        return self._add("row-broadcast-sub", (a, v),
                         Matrix._wrap(a.value.a - v.value.a),
                         a.requires_grad or v.requires_grad)

    def hinge(self, a: Node, gamma: float) -> Node:
        """Elementwise max(0, gamma - x); subgradient 0 at the kink."""
        return self._add("hinge", (a,), Matrix._wrap(np.maximum(gamma - a.value.a, 0.0)),
                         a.requires_grad, payload=float(gamma))

    def softmax_rows(self, a: Node) -> Node:
        z = a.value.a - a.value.a.max(axis=1, keepdims=True)
        e = np.exp(z)
        return self._add("softmax-rows", (a,), Matrix._wrap(e / e.sum(axis=1, keepdims=True)),
                         a.requires_grad)

    def off_diagonal(self, a: Node) -> Node:
        """Select off-diagonal entries: copy with the main diagonal zeroed."""
        if a.value.rows != a.value.cols:
            raise _shape_err("select-off-diagonal", f"matrix must be square, got {a.shape}", a)
        v = a.value.a.copy()
        np.fill_diagonal(v, 0.0)
        return self._add("select-off-diagonal", (a,), Matrix._wrap(v), a.requires_grad)

    # -- composed helpers (no new op kinds) -----------------------------

    def row_broadcast_add(self, a: Node, v: Node) -> Node:
        return self.row_broadcast_sub(a, self.scale(v, -1.0))

    def center_columns(self, a: Node) -> Node:
        return self.row_broadcast_sub(a, self.mean_columns(a))

    def broadcast_row(self, v: Node, rows: int) -> Node:
        """Tile a 1 x C row vector into rows x C via a constant ones column."""
        ones = self.constant(Matrix.ones(rows, 1))
        return self.matmul(ones, v)

    def broadcast_col(self, v: Node, cols: int) -> Node:
        """Tile an N x 1 column vector into N x cols via a constant ones row."""
        ones = self.constant(Matrix.ones(1, cols))
        return self.matmul(v, ones)

    # -- evaluation ------------------------------------------------------

    def set_leaf(self, node: Node, value: Matrix) -> None:
        if node.op != "leaf":
            raise ValueError(f"set_leaf: {node!r} is not a leaf")
        if value.shape != node.value.shape:
            raise _shape_err("set_leaf", f"binding shape {value.shape} != {node.shape}", node)
        node.value = value

    def recompute(self) -> None:
        """Re-evaluate every non-leaf value in topological (creation) order."""
        for n in self.nodes:
            if n.op == "leaf":
                continue
            n.value = _FORWARD[n.op](n)

    # -- backward ---------------------------------------------------------

    def backward(self, root: Node, watch: tuple[Node, ...] = ()) -> GradientMap:
        """Adjoints of every requires-grad leaf with respect to a 1x1 root.

        Leaves not on any path to the root get an exactly-zero matrix.
        `watch` adds the adjoints of chosen internal nodes to the result
        (activations, e.g. an encoder's output). Deterministic: fixed
        reverse creation order, fixed accumulation order, so repeated
        calls are bitwise identical.
        """
        if root.graph is not self:
            raise ValueError("backward: root belongs to a different graph")
        if root.shape != (1, 1):
            raise ValueError(f"backward: root must be 1x1 scalar, got {root.shape}")
        adj: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        adj[root.idx] = np.ones((1, 1))
        for i in range(root.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.op == "leaf":
                continue
            _BACKWARD[node.op](node, g, adj)
        entries: dict[int, Matrix] = {}
        nodes: dict[int, Node] = {}
        for n in self.nodes:
            if n.op == "leaf" and n.requires_grad:
                a = adj[n.idx]
                entries[n.idx] = Matrix._wrap(a) if a is not None else Matrix.zeros(*n.shape)
                nodes[n.idx] = n
        for n in watch:
            a = adj[n.idx]
            entries[n.idx] = Matrix._wrap(a) if a is not None else Matrix.zeros(*n.shape)
            nodes[n.idx] = n
        return GradientMap(entries, nodes)


def forward(graph: Graph, bindings: Optional[dict[Node, Matrix]] = None) -> list[Matrix]:
    """Rebind the given leaves, re-evaluate the graph, return all values."""
    if bindings:
        for node, value in bindings.items():
            graph.set_leaf(node, value)
    graph.recompute()
    return [n.value for n in graph.nodes]


# ---------------------------------------------------------------------------
# forward kernels for recomputation


def _accum(adj: list, node: Node, delta: np.ndarray) -> None:
    # Replacement (never +=) keeps shared adjoint arrays safe to alias.
    i = node.idx
    if adj[i] is None:
        adj[i] = delta
    else:
        adj[i] = adj[i] + delta


_FORWARD = {
    "matmul": lambda n: Matrix._wrap(n.inputs[0].value.a @ n.inputs[1].value.a),
    "add": lambda n: Matrix._wrap(n.inputs[0].value.a + n.inputs[1].value.a),
    "sub": lambda n: Matrix._wrap(n.inputs[0].value.a - n.inputs[1].value.a),
    "hadamard": lambda n: Matrix._wrap(n.inputs[0].value.a * n.inputs[1].value.a),
    "scale": lambda n: Matrix._wrap(n.inputs[0].value.a * n.payload),
    "transpose": lambda n: Matrix._wrap(n.inputs[0].value.a.T),
    "relu": lambda n: Matrix._wrap(np.maximum(n.inputs[0].value.a, 0.0)),
    "tanh": lambda n: Matrix._wrap(np.tanh(n.inputs[0].value.a)),
    "exp": lambda n: Matrix._wrap(np.exp(n.inputs[0].value.a)),
    "log": lambda n: Matrix._wrap(np.log(n.inputs[0].value.a)),
    "sqrt": lambda n: Matrix._wrap(np.sqrt(n.inputs[0].value.a)),
    "square": lambda n: Matrix._wrap(n.inputs[0].value.a * n.inputs[0].value.a),
    "sum-all": lambda n: Matrix([[float(n.inputs[0].value.a.sum())]]),
    "mean-columns": lambda n: Matrix._wrap(n.inputs[0].value.a.mean(axis=0, keepdims=True)),
    "mean-rows": lambda n: Matrix._wrap(n.inputs[0].value.a.mean(axis=1, keepdims=True)),
    "row-l2-normalize": lambda n: Matrix._wrap(
        n.inputs[0].value.a
        / (np.linalg.norm(n.inputs[0].value.a, axis=1, keepdims=True) + n.payload)),
    "row-broadcast-sub": lambda n: Matrix._wrap(n.inputs[0].value.a - n.inputs[1].value.a),
    "hinge": lambda n: Matrix._wrap(np.maximum(n.payload - n.inputs[0].value.a, 0.0)),
    "softmax-rows": lambda n: _softmax(n.inputs[0].value.a),
    "select-off-diagonal": lambda n: _off_diag(n.inputs[0].value.a),
}


def _softmax(x: np.ndarray) -> Matrix:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return Matrix._wrap(e / e.sum(axis=1, keepdims=True))


def _off_diag(x: np.ndarray) -> Matrix:
    v = x.copy()
    np.fill_diagonal(v, 0.0)
    return Matrix._wrap(v)


# ---------------------------------------------------------------------------
# backward kernels: accumulate input adjoints given the output adjoint `g`


def _bw_matmul(n, g, adj):
    a, b = n.inputs
    if a.requires_grad:
        _accum(adj, a, g @ b.value.a.T)
    if b.requires_grad:
        _accum(adj, b, a.value.a.T @ g)


def _bw_add(n, g, adj):
    a, b = n.inputs
    if a.requires_grad:
        _accum(adj, a, g)
    if b.requires_grad:
        _accum(adj, b, g)


def _bw_sub(n, g, adj):
    a, b = n.inputs
    if a.requires_grad:
        _accum(adj, a, g)
    if b.requires_grad:
        _accum(adj, b, -g)


def _bw_hadamard(n, g, adj):
    a, b = n.inputs
    if a.requires_grad:
        _accum(adj, a, g * b.value.a)
    if b.requires_grad:
        _accum(adj, b, g * a.value.a)


def _bw_scale(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        _accum(adj, a, g * n.payload)


def _bw_transpose(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        _accum(adj, a, g.T)


def _bw_relu(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        _accum(adj, a, g * (a.value.a > 0.0))


def _bw_tanh(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        t = n.value.a
        _accum(adj, a, g * (1.0 - t * t))


def _bw_exp(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        _accum(adj, a, g * n.value.a)


def _bw_log(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        _accum(adj, a, g / a.value.a)


def _bw_sqrt(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        _accum(adj, a, g / (2.0 * np.sqrt(np.maximum(a.value.a, SQRT_GRAD_FLOOR))))


def _bw_square(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        _accum(adj, a, 2.0 * g * a.value.a)


def _bw_sum_all(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        _accum(adj, a, np.full(a.value.shape, g[0, 0]))


def _bw_mean_columns(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        rows = a.value.rows
        _accum(adj, a, np.broadcast_to(g / rows, a.value.shape).copy())


def _bw_mean_rows(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        cols = a.value.cols
        _accum(adj, a, np.broadcast_to(g / cols, a.value.shape).copy())


def _bw_row_l2_normalize(n, g, adj):
    (a,) = n.inputs
    if not a.requires_grad:
        return
    eps = n.payload
    x = a.value.a
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    denom = norms + eps
    dot = (g * x).sum(axis=1, keepdims=True)
    _accum(adj, a, g / denom - x * (dot / (np.maximum(norms, _NORM_FLOOR) * denom * denom)))


def _bw_row_broadcast_sub(n, g, adj):
    a, v = n.inputs
    if a.requires_grad:
        _accum(adj, a, g)
    if v.requires_grad:
        _accum(adj, v, -g.sum(axis=0, keepdims=True))


def _bw_hinge(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        _accum(adj, a, -g * (a.value.a < n.payload))


def _bw_softmax_rows(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        p = n.value.a
        _accum(adj, a, p * (g - (g * p).sum(axis=1, keepdims=True)))


def _bw_off_diagonal(n, g, adj):
    (a,) = n.inputs
    if a.requires_grad:
        d = g.copy()
        np.fill_diagonal(d, 0.0)
        _accum(adj, a, d)


_BACKWARD = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sub": _bw_sub,
    "hadamard": _bw_hadamard,
    "scale": _bw_scale,
    "transpose": _bw_transpose,
    "relu": _bw_relu,
    "tanh": _bw_tanh,
    "exp": _bw_exp,
    "log": _bw_log,
    "sqrt": _bw_sqrt,
    "square": _bw_square,
    "sum-all": _bw_sum_all,
    "mean-columns": _bw_mean_columns,
    "mean-rows": _bw_mean_rows,
    "row-l2-normalize": _bw_row_l2_normalize,
    "row-broadcast-sub": _bw_row_broadcast_sub,
    "hinge": _bw_hinge,
    "softmax-rows": _bw_softmax_rows,
    "select-off-diagonal": _bw_off_diagonal,
}


def fd_check(graph: Graph, root: Node, leaf: Node, h: float = 1e-4) -> float:
    """Max relative error between backward's adjoint and central differences.

    Perturbs each entry of `leaf` by +-h, re-evaluates the graph, and
    compares (f(x+h) - f(x-h)) / 2h against the analytic adjoint entry.
    Error metric: |analytic - numeric| / max(1, |numeric|). Restores the
    leaf and recomputes before returning.
    """
    if h <= 0:
        raise ValueError("fd_check: h must be > 0")
    if leaf.op != "leaf" or not leaf.requires_grad:
        raise ValueError("fd_check: target must be a requires-grad leaf")
    analytic = graph.backward(root)[leaf].a
    base = leaf.value.a.copy()
    worst = 0.0
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            plus = base.copy()
            plus[i, j] += h
            forward(graph, {leaf: Matrix._wrap(plus)})
            f_plus = root.value.a[0, 0]
            minus = base.copy()
            minus[i, j] -= h
            forward(graph, {leaf: Matrix._wrap(minus)})
            f_minus = root.value.a[0, 0]
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic[i, j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    forward(graph, {leaf: Matrix._wrap(base)})
    return worst
