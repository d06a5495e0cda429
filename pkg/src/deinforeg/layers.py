"""Parameterized building blocks: dense layers, batch norm, activations.

Layers hold their parameters as named Param slots; per-batch they are bound
into a graph as requires-grad leaves through a ParamLeafBinder, which reuses
one leaf per parameter so gradients from multiple uses (e.g. a projector
applied on both the regularization branch and the classifier branch)
accumulate into a single adjoint.
"""

from __future__ import annotations

import json
from typing import Iterable, Optional

import numpy as np

from .autodiff import Graph, Node
from .tensor import Matrix, RngState, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Param:
    """A named parameter slot; `value` is replaced (never mutated) on update."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: Matrix):
        self.name = name
        self.value = value

    def __repr__(self) -> str:
        return f"Param({self.name}, {self.value.rows}x{self.value.cols})"


class ParamSet:
    """Ordered collection of uniquely named parameters."""

    def __init__(self, params: Iterable[Param] = ()):
        self.params: list[Param] = []
        self._by_name: dict[str, Param] = {}
        for p in params:
            self.add(p)

    def add(self, p: Param) -> Param:
        if p.name in self._by_name:
            raise ValueError(f"duplicate parameter name: {p.name}")
        self.params.append(p)
        self._by_name[p.name] = p
        return p

    def extend(self, params: Iterable[Param]) -> None:
        for p in params:
            self.add(p)

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, name: str) -> Param:
        return self._by_name[name]

    def names(self) -> list[str]:
        return [p.name for p in self.params]


class ParamLeafBinder:
    """Per-graph cache mapping Param objects to requires-grad leaves."""

    def __init__(self, graph: Graph):
        self.graph = graph
        self._leaves: dict[int, Node] = {}

    def leaf(self, param: Param) -> Node:
        key = id(param)
        node = self._leaves.get(key)
        if node is None:
            node = self.graph.leaf(param.value, requires_grad=True, name=param.name)
            self._leaves[key] = node
        return node

    def grad_of(self, grads, param: Param) -> Optional[Matrix]:
        node = self._leaves.get(id(param))
        if node is None:
            return None
        return grads[node]


class DenseLayer:
    """Affine map x @ W + b with a declared init scheme."""

    def __init__(self, name: str, in_size: int, out_size: int, init_scheme: str = "xavier"):
        self.name = name
        self.in_size = in_size
        self.out_size = out_size
        self.init_scheme = init_scheme
        self.w = Param(f"{name}.w", Matrix.zeros(in_size, out_size))
        self.b = Param(f"{name}.b", Matrix.zeros(1, out_size))

    # weight std per scheme: he = sqrt(2/in) ahead of relu, xavier = sqrt(1/in)
    # ahead of tanh, underscaled = sqrt(1/4in) for deliberately damped stacks
    # (tanh chains at xavier/he gain self-stabilize; sub-unit gain is the
    # classic setting where deep backprop signals decay geometrically).
    _INIT_GAIN = {"he": 2.0, "xavier": 1.0, "underscaled": 0.25}

    def init(self, rng: RngState) -> None:
        std = np.sqrt(self._INIT_GAIN[self.init_scheme] / self.in_size)
        self.w.value = rng.normal(self.in_size, self.out_size, 0.0, float(std))
        self.b.value = Matrix.zeros(1, self.out_size)

    def parameters(self) -> list[Param]:
        return [self.w, self.b]

    def forward(self, g: Graph, x: Node, binder: ParamLeafBinder, train: bool = True,
                update_running: bool = True) -> Node:
        if x.value.cols != self.in_size:
            raise ShapeError(
                f"{self.name}: input has {x.value.cols} columns, layer expects {self.in_size}")
        return g.row_broadcast_add(g.matmul(x, binder.leaf(self.w)), binder.leaf(self.b))


class BatchNormLayer:
    """1-D batch normalization over columns.

    Train mode normalizes by batch statistics (population variance) and
    updates running statistics with momentum; eval mode normalizes by the
    stored running statistics only. The running variance update uses the
    unbiased estimate, the normalization the biased one.
    """

    def __init__(self, name: str, size: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.name = name
        self.size = size
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(f"{name}.gamma", Matrix.ones(1, size))
        self.beta = Param(f"{name}.beta", Matrix.zeros(1, size))
        self.running_mean = Matrix.zeros(1, size)
        self.running_var = Matrix.ones(1, size)

    def init(self, rng: RngState) -> None:
        self.gamma.value = Matrix.ones(1, self.size)
        self.beta.value = Matrix.zeros(1, self.size)
        self.running_mean = Matrix.zeros(1, self.size)
        self.running_var = Matrix.ones(1, self.size)

    def parameters(self) -> list[Param]:
        return [self.gamma, self.beta]

    def forward(self, g: Graph, x: Node, binder: ParamLeafBinder, train: bool = True,
                update_running: bool = True) -> Node:
        if x.value.cols != self.size:
            raise ShapeError(f"{self.name}: input has {x.value.cols} columns, expected {self.size}")
        n = x.value.rows
        if train:
            if n < 2:
                raise ValueError(f"{self.name}: train-mode batch must have >= 2 rows, got {n}")
            mu = g.mean_columns(x)
            centered = g.row_broadcast_sub(x, mu)
            var = g.mean_columns(g.square(centered))
            if update_running:
                m = self.momentum
                batch_mean = mu.value.a
                batch_var_unbiased = var.value.a * (n / (n - 1.0))
                self.running_mean = Matrix._wrap(
                    (1.0 - m) * self.running_mean.a + m * batch_mean)
                self.running_var = Matrix._wrap(
                    (1.0 - m) * self.running_var.a + m * batch_var_unbiased)
        else:
            mu = g.constant(self.running_mean, name=f"{self.name}.running_mean")
            var = g.constant(self.running_var, name=f"{self.name}.running_var")
            centered = g.row_broadcast_sub(x, mu)
        # 1/sqrt(var+eps) composed as exp(-0.5*log(var+eps)); the op set has
        # no division, and var+eps >= eps keeps log well away from zero.
        # gamma folds into the row scale before broadcasting: (x-mu)*(s*g).
        eps_row = g.constant(Matrix.full(1, self.size, self.eps))
        inv_std = g.exp(g.scale(g.log(g.add(var, eps_row)), -0.5))
        row_scale = g.hadamard(inv_std, binder.leaf(self.gamma))
        scaled = g.hadamard(centered, g.broadcast_row(row_scale, n))
        return g.row_broadcast_add(scaled, binder.leaf(self.beta))


class Activation:
    """Parameter-free elementwise activation: relu, tanh, or linear."""

    KINDS = ("relu", "tanh", "linear")

    def __init__(self, kind: str):
        if kind not in self.KINDS:
            raise ValueError(f"unknown activation: {kind}")
        self.kind = kind

    def init(self, rng: RngState) -> None:
        pass

    def parameters(self) -> list[Param]:
        return []

    def forward(self, g: Graph, x: Node, binder: ParamLeafBinder, train: bool = True,
                update_running: bool = True) -> Node:
        if self.kind == "relu":
            return g.relu(x)
        if self.kind == "tanh":
            return g.tanh(x)
        return x


def forward_stack(layers, g: Graph, x: Node, binder: ParamLeafBinder, train: bool = True,
                  update_running: bool = True) -> Node:
    """Run x through a list of layers; an empty list is the identity."""
    h = x
    for layer in layers:
        h = layer.forward(g, h, binder, train=train, update_running=update_running)
    return h


def stack_parameters(layers) -> list[Param]:
    out: list[Param] = []
    for layer in layers:
        out.extend(layer.parameters())
    return out


def init_params(layers, rng: RngState) -> ParamSet:
    """Initialize every layer in order and collect the resulting ParamSet."""
    for layer in layers:
        layer.init(rng)
    return ParamSet(stack_parameters(layers))


class SGD:
    """SGD with momentum and weight decay, one velocity slot per parameter.

    Update rule: v <- momentum*v + grad + weight_decay*param;
    param <- param - lr*v.
    """

    def __init__(self, params: Iterable[Param], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, np.ndarray] = {
            id(p): np.zeros(p.value.shape) for p in self.params}

    def step(self, grads: dict[int, Matrix]) -> None:
        """Apply one update; `grads` maps id(param) to its gradient."""
        for p in self.params:
            grad = grads.get(id(p))
            if grad is None:
                continue
            if grad.shape != p.value.shape:
                raise ShapeError(
                    f"sgd: grad shape {grad.shape} != param {p.name} shape {p.value.shape}")
            v = self.momentum * self._velocity[id(p)] + grad.a
            if self.weight_decay:
                v = v + self.weight_decay * p.value.a
            self._velocity[id(p)] = v
            p.value = Matrix._wrap(p.value.a - self.lr * v)


def sgd_step(params: ParamSet, grads: dict[str, Matrix], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocity: Optional[dict[str, np.ndarray]] = None
             ) -> dict[str, np.ndarray]:
    """One functional SGD update over a ParamSet; returns the velocity state.

    `grads` maps parameter names to gradients; pass the returned velocity
    back in to continue the momentum recursion.
    """
    if lr <= 0:
        raise ValueError("lr must be > 0")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must be in [0, 1)")
    velocity = velocity if velocity is not None else {}
    for p in params:
        grad = grads.get(p.name)
        if grad is None:
            continue
        if grad.shape != p.value.shape:
            raise ShapeError(f"sgd: grad shape {grad.shape} != param {p.name} {p.value.shape}")
        v = momentum * velocity.get(p.name, np.zeros(p.value.shape)) + grad.a
        if weight_decay:
            v = v + weight_decay * p.value.a
        velocity[p.name] = v
        p.value = Matrix._wrap(p.value.a - lr * v)
    return velocity


def save_params(params: ParamSet, path: str) -> None:
    """Write parameters as a JSON map name -> {shape, data} (lossless)."""
    doc = {p.name: {"shape": list(p.value.shape), "data": p.value.a.ravel().tolist()}
           for p in params}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_params(params: ParamSet, path: str) -> None:
    """Load values saved by save_params into an existing ParamSet in place."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    for p in params:
        entry = doc[p.name]
        rows, cols = entry["shape"]
        p.value = Matrix(np.array(entry["data"], dtype=np.float64).reshape(rows, cols))
