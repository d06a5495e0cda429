"""Stacks of decoupled encoder-projector-classifier modules.

In decoupled mode every module trains against its own objective: the local
(variance + invariance + covariance) loss drives the encoder and projector,
and the alpha-weighted cross-entropy of the module's classifier drives the
classifier and projector but is cut off before the encoder. Module
boundaries insert detach leaves, so a later module's loss has an exactly
zero adjoint on any earlier module's parameters.

The backprop baseline runs the identical encoder stack end to end with a
single cross-entropy at the final module's classifier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .autodiff import Graph, Node
from .layers import (Activation, BatchNormLayer, DenseLayer, ParamLeafBinder, ParamSet, SGD,
                     forward_stack, stack_parameters)
from .losses import (LossBreakdown, LossConfig, LossNodes, cross_entropy_loss, local_loss,
                     module_total)
from .tensor import Matrix, RngState

MODES = ("deinforeg", "bp")


class NetworkBuildError(ValueError):
    """A NetworkSpec is internally inconsistent."""


@dataclass(frozen=True)
class EncoderSpec:
    """One MLP encoder block: dense -> [batchnorm] -> activation."""

    width: int
    activation: str = "tanh"
    batchnorm: bool = False
    in_width: Optional[int] = None  # validated against the chain when given
    init: str = "auto"  # auto picks he before relu, xavier otherwise


@dataclass(frozen=True)
class ProjectorSpec:
    """Identity, or a 3-layer MLP whose first two layers get BN + relu."""

    kind: str = "identity"
    hidden: int = 0
    out: int = 0


@dataclass(frozen=True)
class ClassifierSpec:
    """Activation (tanh | bn_relu | linear) followed by one dense layer."""

    activation: str = "tanh"


@dataclass(frozen=True)
class ModuleSpec:
    encoder: EncoderSpec
    projector: ProjectorSpec = ProjectorSpec()
    classifier: ClassifierSpec = ClassifierSpec()
    loss: LossConfig = field(default_factory=LossConfig)

    def embedding_width(self) -> int:
        return self.projector.out if self.projector.kind == "mlp" else self.encoder.width


@dataclass(frozen=True)
class NetworkSpec:
    modules: tuple[ModuleSpec, ...]
    input_width: int
    class_count: int
    training_mode: str = "deinforeg"

    def __post_init__(self):
        if len(self.modules) < 1:
            raise NetworkBuildError("network needs at least one module")
        if self.training_mode not in MODES:
            raise NetworkBuildError(f"training_mode must be one of {MODES}")
        if self.class_count < 2:
            raise NetworkBuildError("class_count must be >= 2")
        prev = self.input_width
        for l, m in enumerate(self.modules):
            if m.encoder.in_width is not None and m.encoder.in_width != prev:
                raise NetworkBuildError(
                    f"module {l}: encoder expects in_width={m.encoder.in_width} "
                    f"but the boundary from module {l - 1} provides {prev}")
            prev = m.encoder.width


def uniform_spec(depth: int, input_width: int, class_count: int, width: int = 64,
                 activation: str = "tanh", batchnorm: bool = False,
                 projector: str = "identity", projector_hidden: int = 0,
                 embedding_dim: int = 0, classifier_activation: str = "tanh",
                 loss: Optional[LossConfig] = None, mode: str = "deinforeg") -> NetworkSpec:
    """Convenience builder: `depth` identical modules of the given width."""
    loss = loss if loss is not None else LossConfig()
    proj = (ProjectorSpec("mlp", projector_hidden or width, embedding_dim or width)
            if projector == "mlp" else ProjectorSpec())
    mods = tuple(
        ModuleSpec(EncoderSpec(width, activation, batchnorm), proj,
                   ClassifierSpec(classifier_activation), loss)
        for _ in range(depth))
    return NetworkSpec(mods, input_width, class_count, mode)


class ModuleNet:
    """Instantiated layers, parameters, and optimizer state for one module."""

    def __init__(self, index: int, spec: ModuleSpec, in_width: int, class_count: int):
        self.index = index
        self.spec = spec
        name = f"m{index}"
        act = spec.encoder.activation
        if spec.encoder.init == "auto":
            scheme = "he" if act == "relu" else "xavier"
        else:
            scheme = spec.encoder.init
        self.encoder_layers = [DenseLayer(f"{name}.enc", in_width, spec.encoder.width, scheme)]
        if spec.encoder.batchnorm:
            self.encoder_layers.append(BatchNormLayer(f"{name}.enc.bn", spec.encoder.width))
        self.encoder_layers.append(Activation(act))

        if spec.projector.kind == "mlp":
            h, out = spec.projector.hidden, spec.projector.out
            w = spec.encoder.width
            self.projector_layers = [
                DenseLayer(f"{name}.proj0", w, h, "he"),
                BatchNormLayer(f"{name}.proj0.bn", h), Activation("relu"),
                DenseLayer(f"{name}.proj1", h, h, "he"),
                BatchNormLayer(f"{name}.proj1.bn", h), Activation("relu"),
                DenseLayer(f"{name}.proj2", h, out, "xavier"),
            ]
        else:
            self.projector_layers = []

        emb = spec.projector.out if spec.projector.kind == "mlp" else spec.encoder.width
        cact = spec.classifier.activation
        if cact == "tanh":
            self.classifier_layers = [Activation("tanh"),
                                      DenseLayer(f"{name}.cls", emb, class_count, "xavier")]
        elif cact == "bn_relu":
            self.classifier_layers = [BatchNormLayer(f"{name}.cls.bn", emb), Activation("relu"),
                                      DenseLayer(f"{name}.cls", emb, class_count, "xavier")]
        elif cact == "linear":
            self.classifier_layers = [DenseLayer(f"{name}.cls", emb, class_count, "xavier")]
        else:
            raise NetworkBuildError(f"unknown classifier activation: {cact}")

        self.encoder_params = stack_parameters(self.encoder_layers)
        self.projector_params = stack_parameters(self.projector_layers)
        self.classifier_params = stack_parameters(self.classifier_layers)
        self.opt: Optional[SGD] = None

    def all_layers(self):
        return self.encoder_layers + self.projector_layers + self.classifier_layers

    def all_params(self) -> list:
        return self.encoder_params + self.projector_params + self.classifier_params

    def init(self, rng: RngState) -> None:
        for layer in self.all_layers():
            layer.init(rng)


@dataclass(frozen=True)
class TrainStepReport:
    """Per-batch outcome of one optimization step.

    Two gradient-magnitude views per module: the mean absolute adjoint at
    the encoder's output activation (what the depth studies track; forward
    and backward scale effects do not cancel there) and the mean absolute
    gradient over the encoder's parameters.
    """

    per_module: list[LossBreakdown]
    encoder_grad_magnitude: list[float]
    encoder_param_grad_magnitude: list[float]
    per_module_accuracy: list[float]
    batch_accuracy: float


class ModuleStep(NamedTuple):
    binder: ParamLeafBinder
    nodes: LossNodes
    encoder_out: Node
    embedding: Node
    logits: Node


class Network:
    """A stack of decoupled modules plus per-module (or joint) optimizers."""

    def __init__(self, spec: NetworkSpec, modules: list[ModuleNet]):
        self.spec = spec
        self.modules = modules
        self.mode = spec.training_mode
        self.bp_opt: Optional[SGD] = None

    @property
    def depth(self) -> int:
        return len(self.modules)

    def configure_optimizers(self, lr: float, momentum: float = 0.9,
                             weight_decay: float = 0.0) -> None:
        for m in self.modules:
            m.opt = SGD(m.all_params(), lr, momentum, weight_decay)
        bp_params = []
        for m in self.modules:
            bp_params.extend(m.encoder_params)
        bp_params.extend(self.modules[-1].projector_params)
        bp_params.extend(self.modules[-1].classifier_params)
        self.bp_opt = SGD(bp_params, lr, momentum, weight_decay)

    def param_set(self) -> ParamSet:
        ps = ParamSet()
        for m in self.modules:
            ps.extend(m.all_params())
        return ps

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Ordered (name, array) pairs of all parameters and BN statistics."""
        out = []
        for m in self.modules:
            for p in m.all_params():
                out.append((p.name, p.value.a))
            for layer in m.all_layers():
                if isinstance(layer, BatchNormLayer):
                    out.append((f"{layer.name}.running_mean", layer.running_mean.a))
                    out.append((f"{layer.name}.running_var", layer.running_var.a))
        return out


def build(spec: NetworkSpec, rng: RngState) -> Network:
    """Instantiate and initialize a network; same seed gives identical
    parameters in both training modes."""
    modules = []
    prev = spec.input_width
    for l, mspec in enumerate(spec.modules):
        modules.append(ModuleNet(l, mspec, prev, spec.class_count))
        prev = mspec.encoder.width
    net = Network(spec, modules)
    for m in net.modules:
        m.init(rng)
    return net


def build_module_step(g: Graph, module: ModuleNet, x_value: Matrix, y: Matrix,
                      include: tuple[bool, bool, bool] = (True, True, True),
                      train: bool = True, update_running: Optional[bool] = None) -> ModuleStep:
    """One module's forward and loss subgraph on a detached input value.

    The classifier branch re-runs the projector from a detached copy of the
    encoder output, so cross-entropy gradients reach the projector and
    classifier but are exactly zero on the encoder.
    """
    if update_running is None:
        update_running = train
    x_in = g.leaf(x_value, requires_grad=False, name=f"m{module.index}.input")
    binder = ParamLeafBinder(g)
    h = forward_stack(module.encoder_layers, g, x_in, binder, train, update_running)
    e_ll = forward_stack(module.projector_layers, g, h, binder, train, update_running)
    h_det = g.leaf(h.value, requires_grad=False, name=f"m{module.index}.detach")
    e_ce = forward_stack(module.projector_layers, g, h_det, binder, train, update_running=False)
    logits = forward_stack(module.classifier_layers, g, e_ce, binder, train, update_running)
    v, i, c, total = local_loss(g, e_ll, y, module.spec.loss, include)
    ce = cross_entropy_loss(g, logits, y)
    mt = module_total(g, total, ce, module.spec.loss)
    return ModuleStep(binder, LossNodes(v, i, c, total, ce, mt), h, e_ll, logits)


def _accuracy_from_logits(logits: np.ndarray, y: Matrix) -> float:
    pred = logits.argmax(axis=1)
    truth = y.a.argmax(axis=1)
    return float((pred == truth).mean())


def _encoder_grad_mean(module: ModuleNet, binder: ParamLeafBinder, grads) -> float:
    total, count = 0.0, 0
    for p in module.encoder_params:
        grad = binder.grad_of(grads, p)
        if grad is None:
            continue
        total += float(np.abs(grad.a).sum())
        count += grad.a.size
    return total / count if count else 0.0


def _module_grads(module: ModuleNet, binder: ParamLeafBinder, grads) -> dict:
    return {id(p): binder.grad_of(grads, p) for p in module.all_params()}


def train_step_deinforeg(net: Network, x: Matrix, y: Matrix,
                         include: tuple[bool, bool, bool] = (True, True, True)
                         ) -> TrainStepReport:
    """One decoupled step: every module forwards, backwards, and updates
    against its own objective; inputs cross module boundaries detached."""
    if net.mode != "deinforeg":
        raise ValueError(f"network is in {net.mode} mode")
    g = Graph()
    steps = []
    h_val = x
    for module in net.modules:
        step = build_module_step(g, module, h_val, y, include)
        steps.append(step)
        h_val = step.encoder_out.value
    breakdowns, out_mags, param_mags, accs = [], [], [], []
    for module, step in zip(net.modules, steps):
        grads = g.backward(step.nodes.module_total, watch=(step.encoder_out,))
        out_mags.append(float(np.abs(grads[step.encoder_out].a).mean()))
        param_mags.append(_encoder_grad_mean(module, step.binder, grads))
        module.opt.step(_module_grads(module, step.binder, grads))
        breakdowns.append(step.nodes.breakdown())
        accs.append(_accuracy_from_logits(step.logits.value.a, y))
    return TrainStepReport(breakdowns, out_mags, param_mags, accs, accs[-1])


def _build_bp_graph(net: Network, x: Matrix, y: Matrix, train: bool = True,
                    update_running: Optional[bool] = None):
    if update_running is None:
        update_running = train
    g = Graph()
    binder = ParamLeafBinder(g)
    h = g.leaf(x, requires_grad=False, name="input")
    h_nodes = []
    for module in net.modules:
        h = forward_stack(module.encoder_layers, g, h, binder, train, update_running)
        h_nodes.append(h)
    last = net.modules[-1]
    e = forward_stack(last.projector_layers, g, h, binder, train, update_running)
    logits = forward_stack(last.classifier_layers, g, e, binder, train, update_running)
    ce = cross_entropy_loss(g, logits, y)
    return g, binder, logits, ce, h_nodes


def train_step_bp(net: Network, x: Matrix, y: Matrix) -> TrainStepReport:
    """One end-to-end step: a single cross-entropy at the final classifier
    backpropagates through every encoder."""
    if net.mode != "bp":
        raise ValueError(f"network is in {net.mode} mode")
    g, binder, logits, ce, h_nodes = _build_bp_graph(net, x, y)
    grads = g.backward(ce, watch=tuple(h_nodes))
    out_mags = [float(np.abs(grads[h].a).mean()) for h in h_nodes]
    param_mags = [_encoder_grad_mean(m, binder, grads) for m in net.modules]
    all_grads = {}
    for m in net.modules:
        all_grads.update(_module_grads(m, binder, grads))
    net.bp_opt.step(all_grads)
    ce_val = float(ce.value.a[0, 0])
    acc = _accuracy_from_logits(logits.value.a, y)
    breakdowns = []
    for l in range(net.depth):
        if l == net.depth - 1:
            breakdowns.append(LossBreakdown(0.0, 0.0, 0.0, 0.0, ce_val, ce_val))
        else:
            breakdowns.append(LossBreakdown.zero())
    accs = [acc if l == net.depth - 1 else 0.0 for l in range(net.depth)]
    return TrainStepReport(breakdowns, out_mags, param_mags, accs, acc)


def forward_logits(net: Network, x: Matrix, train: bool = False) -> Matrix:
    """Logits of the final module's classifier on the full encoder chain.

    Inference path is identical in both modes: BN layers use running
    statistics and nothing is recorded for backward.
    """
    g = Graph()
    binder = ParamLeafBinder(g)
    h = g.leaf(x, requires_grad=False)
    for module in net.modules:
        h = forward_stack(module.encoder_layers, g, h, binder, train, update_running=False)
    last = net.modules[-1]
    e = forward_stack(last.projector_layers, g, h, binder, train, update_running=False)
    logits = forward_stack(last.classifier_layers, g, e, binder, train, update_running=False)
    return logits.value


def predict(net: Network, x: Matrix) -> np.ndarray:
    """Class indices from the final classifier; ties go to the lowest index."""
    return forward_logits(net, x).a.argmax(axis=1)


def accuracy(net: Network, x: Matrix, labels: np.ndarray) -> float:
    return float((predict(net, x) == np.asarray(labels)).mean())


def module_embeddings(net: Network, x: Matrix, module_index: int = -1) -> Matrix:
    """Eval-mode projector output of one module over the given inputs."""
    g = Graph()
    binder = ParamLeafBinder(g)
    h = g.leaf(x, requires_grad=False)
    idx = module_index % net.depth
    for module in net.modules[: idx + 1]:
        h = forward_stack(module.encoder_layers, g, h, binder, False, update_running=False)
    target = net.modules[idx]
    e = forward_stack(target.projector_layers, g, h, binder, False, update_running=False)
    return e.value


def encoder_gradient_profile(net: Network, batches: Sequence[tuple[Matrix, Matrix]]
                             ) -> list[float]:
    """Mean absolute adjoint at each module's encoder output, averaged over
    the given batches; projector and classifier internals are excluded.
    Pure measurement: no parameter or BN-stat updates."""
    sums = np.zeros(net.depth)
    for x, y in batches:
        if net.mode == "deinforeg":
            g = Graph()
            h_val = x
            for l, module in enumerate(net.modules):
                step = build_module_step(g, module, h_val, y, train=True, update_running=False)
                grads = g.backward(step.nodes.module_total, watch=(step.encoder_out,))
                sums[l] += float(np.abs(grads[step.encoder_out].a).mean())
                h_val = step.encoder_out.value
        else:
            g, binder, _, ce, h_nodes = _build_bp_graph(net, x, y, train=True,
                                                        update_running=False)
            grads = g.backward(ce, watch=tuple(h_nodes))
            for l, h in enumerate(h_nodes):
                sums[l] += float(np.abs(grads[h].a).mean())
    return list(sums / max(1, len(batches)))


# ---------------------------------------------------------------------------
# checkpointing


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "input_width": spec.input_width,
        "class_count": spec.class_count,
        "training_mode": spec.training_mode,
        "modules": [
            {
                "encoder": {"width": m.encoder.width, "activation": m.encoder.activation,
                            "batchnorm": m.encoder.batchnorm},
                "projector": {"kind": m.projector.kind, "hidden": m.projector.hidden,
                              "out": m.projector.out},
                "classifier": {"activation": m.classifier.activation},
                "loss": {"gamma": m.loss.gamma, "eps_norm": m.loss.eps_norm,
                         "alpha": m.loss.alpha, "variance_divisor": m.loss.variance_divisor,
                         "invariance_divisor": m.loss.invariance_divisor,
                         "center_before_sim": m.loss.center_before_sim},
            }
            for m in spec.modules
        ],
    }


def spec_from_dict(doc: dict) -> NetworkSpec:
    mods = tuple(
        ModuleSpec(
            EncoderSpec(**m["encoder"]),
            ProjectorSpec(**m["projector"]),
            ClassifierSpec(**m["classifier"]),
            LossConfig(**m["loss"]),
        )
        for m in doc["modules"])
    return NetworkSpec(mods, doc["input_width"], doc["class_count"], doc["training_mode"])


def save_network(net: Network, path: str) -> None:
    """Checkpoint: the spec plus per-module parameter and BN-stat blocks."""
    modules = []
    for m in net.modules:
        block = {"params": {p.name: {"shape": list(p.value.shape),
                                     "data": p.value.a.ravel().tolist()}
                            for p in m.all_params()},
                 "batchnorm": {}}
        for layer in m.all_layers():
            if isinstance(layer, BatchNormLayer):
                block["batchnorm"][layer.name] = {
                    "running_mean": layer.running_mean.a.ravel().tolist(),
                    "running_var": layer.running_var.a.ravel().tolist(),
                }
        modules.append(block)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"spec": spec_to_dict(net.spec), "modules": modules}, f)


def load_network(path: str) -> Network:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    spec = spec_from_dict(doc["spec"])
    net = build(spec, RngState(0))
    for m, block in zip(net.modules, doc["modules"]):
        for p in m.all_params():
            entry = block["params"][p.name]
            rows, cols = entry["shape"]
            p.value = Matrix(np.array(entry["data"]).reshape(rows, cols))
        for layer in m.all_layers():
            if isinstance(layer, BatchNormLayer):
                entry = block["batchnorm"][layer.name]
                layer.running_mean = Matrix(np.array(entry["running_mean"]).reshape(1, -1))
                layer.running_var = Matrix(np.array(entry["running_var"]).reshape(1, -1))
    return net
