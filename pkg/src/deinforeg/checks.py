"""Finite-difference sweeps over every graph op and composed loss.

Used both by the `gradcheck` CLI command and by the verification suite:
each op gets a micro-graph whose root is a random weighted sum of its
output, and each loss is checked end to end against central differences.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Graph, fd_check
from .losses import (LossConfig, covariance_loss, cross_entropy_loss, invariance_loss,
                     local_loss, module_total, variance_loss)
from .tensor import Matrix, RngState

FD_TOLERANCE = 1e-4


def _weighted_sum(g: Graph, node, rng: RngState):
    w = g.constant(rng.normal(*node.value.shape))
    return g.sum_all(g.hadamard(node, w))


def _away_from(x: np.ndarray, kink: float, margin: float = 0.05) -> np.ndarray:
    # fd steps across a kink produce bogus mismatches; nudge clear of it
    return np.where(np.abs(x - kink) < margin, x + 2 * margin, x)


def _positive(x: np.ndarray) -> np.ndarray:
    return np.abs(x) + 0.5


def op_fd_errors(n_seeds: int = 20, h: float = 1e-4) -> dict[str, float]:
    """Worst fd_check error per op kind over random shapes and values."""
    worst: dict[str, float] = {}

    def record(op: str, err: float) -> None:
        worst[op] = max(worst.get(op, 0.0), err)

    for seed in range(n_seeds):
        rng = RngState(seed, "op-fd")
        n = 2 + seed % 7
        c = 2 + (seed * 3) % 7
        x_val = rng.normal(n, c)
        y_val = rng.normal(n, c)

        def unary(op_name, build, value=None):
            g = Graph()
            x = g.leaf(value if value is not None else x_val, requires_grad=True)
            record(op_name, fd_check(g, _weighted_sum(g, build(g, x), rng), x, h))

        unary("relu", lambda g, x: g.relu(x),
              Matrix._wrap(_away_from(x_val.a, 0.0)))
        unary("tanh", lambda g, x: g.tanh(x))
        unary("exp", lambda g, x: g.exp(x))
        unary("log", lambda g, x: g.log(x), Matrix._wrap(_positive(x_val.a)))
        unary("sqrt", lambda g, x: g.sqrt(x), Matrix._wrap(_positive(x_val.a)))
        unary("square", lambda g, x: g.square(x))
        unary("scale", lambda g, x: g.scale(x, -1.7))
        unary("transpose", lambda g, x: g.transpose(x))
        unary("mean-columns", lambda g, x: g.mean_columns(x))
        unary("mean-rows", lambda g, x: g.mean_rows(x))
        unary("row-l2-normalize", lambda g, x: g.row_l2_normalize(x, 1e-8))
        unary("hinge", lambda g, x: g.hinge(x, 1.0),
              Matrix._wrap(_away_from(x_val.a, 1.0)))
        unary("softmax-rows", lambda g, x: g.softmax_rows(x))

        g = Graph()
        x = g.leaf(x_val, requires_grad=True)
        record("sum-all", fd_check(g, g.scale(g.sum_all(x), 0.3), x, h))

        sq = Matrix._wrap(rng.normal(n, n).a)
        g = Graph()
        x = g.leaf(sq, requires_grad=True)
        record("select-off-diagonal",
               fd_check(g, _weighted_sum(g, g.off_diagonal(x), rng), x, h))

        for op_name, build in (("add", lambda g, a, b: g.add(a, b)),
                               ("sub", lambda g, a, b: g.sub(a, b)),
                               ("hadamard", lambda g, a, b: g.hadamard(a, b))):
            g = Graph()
            a = g.leaf(x_val, requires_grad=True)
            b = g.leaf(y_val, requires_grad=True)
            root = _weighted_sum(g, build(g, a, b), rng)
            record(op_name, max(fd_check(g, root, a, h), fd_check(g, root, b, h)))

        g = Graph()
        a = g.leaf(rng.normal(n, c), requires_grad=True)
        b = g.leaf(rng.normal(c, n), requires_grad=True)
        root = _weighted_sum(g, g.matmul(a, b), rng)
        record("matmul", max(fd_check(g, root, a, h), fd_check(g, root, b, h)))

        g = Graph()
        a = g.leaf(x_val, requires_grad=True)
        v = g.leaf(rng.normal(1, c), requires_grad=True)
        root = _weighted_sum(g, g.row_broadcast_sub(a, v), rng)
        record("row-broadcast-sub", max(fd_check(g, root, a, h), fd_check(g, root, v, h)))
    return worst


def _random_one_hot(rng: RngState, n: int, k: int) -> Matrix:
    labels = rng.integers(0, k, n)
    eye = np.zeros((n, k))
    eye[np.arange(n), labels] = 1.0
    return Matrix._wrap(eye)


def loss_fd_errors(n_seeds: int = 20, h: float = 1e-4) -> dict[str, float]:
    """Worst fd_check error for each composed loss graph."""
    worst: dict[str, float] = {}

    def record(name: str, err: float) -> None:
        worst[name] = max(worst.get(name, 0.0), err)

    for seed in range(n_seeds):
        rng = RngState(seed, "loss-fd")
        n = 2 + seed % 7
        c = 2 + (seed * 5) % 7
        k = 2 + seed % 4
        cfg = LossConfig()
        emb = rng.normal(n, c)
        labels = _random_one_hot(rng, n, k)

        g = Graph()
        x = g.leaf(emb, requires_grad=True)
        record("variance", fd_check(g, variance_loss(g, x, cfg), x, h))

        g = Graph()
        x = g.leaf(emb, requires_grad=True)
        record("invariance", fd_check(g, invariance_loss(g, x, labels, cfg), x, h))

        g = Graph()
        x = g.leaf(emb, requires_grad=True)
        record("covariance", fd_check(g, covariance_loss(g, x), x, h))

        g = Graph()
        x = g.leaf(emb, requires_grad=True)
        _, _, _, total = local_loss(g, x, labels, cfg)
        record("local", fd_check(g, total, x, h))

        logits = rng.normal(n, k)
        g = Graph()
        z = g.leaf(logits, requires_grad=True)
        record("cross_entropy", fd_check(g, cross_entropy_loss(g, z, labels), z, h))

        g = Graph()
        x = g.leaf(emb, requires_grad=True)
        z = g.leaf(logits, requires_grad=True)
        _, _, _, total = local_loss(g, x, labels, cfg)
        root = module_total(g, total, cross_entropy_loss(g, z, labels), cfg)
        record("module_total",
               max(fd_check(g, root, x, h), fd_check(g, root, z, h)))
    return worst


def run_gradcheck(n_seeds: int = 20) -> tuple[bool, list[str]]:
    """Full sweep; returns (all_passed, report lines)."""
    lines = []
    ok = True
    for name, err in sorted(op_fd_errors(n_seeds).items()):
        passed = err < FD_TOLERANCE
        ok = ok and passed
        lines.append(f"op {name:<22} max_rel_err={err:.3e}  "
                     f"{'ok' if passed else 'FAIL'}")
    for name, err in sorted(loss_fd_errors(n_seeds).items()):
        passed = err < FD_TOLERANCE
        ok = ok and passed
        lines.append(f"loss {name:<20} max_rel_err={err:.3e}  "
                     f"{'ok' if passed else 'FAIL'}")
    return ok, lines
