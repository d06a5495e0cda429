"""Local training objectives built as autodiff graphs.

A module's embedding batch is judged by three complementary terms:

* variance  — hinge penalty on per-column standard deviations below a
  threshold gamma, keeping dimensions from collapsing;
* invariance — squared difference between the label similarity matrix
  Y Y^T and the cosine-similarity matrix of the embeddings;
* covariance — squared off-diagonal entries of the embedding covariance
  matrix, de-correlating dimensions.

Their sum is the local loss; the module objective adds alpha times the
classifier's cross-entropy. Divisor-mode flags select between the two
published normalization conventions for the variance and invariance terms.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .autodiff import Graph, Node
from .tensor import Matrix, VAR_EPS

VARIANCE_DIVISORS = ("eq4", "algorithm1")
INVARIANCE_DIVISORS = ("eq5", "mse_all_entries")


@dataclass(frozen=True)
class LossConfig:
    """Hyperparameters for the local objective.

    gamma: variance hinge threshold (0 disables the term through the hinge).
    eps_norm: added to row norms before dividing, guards zero rows.
    alpha: weight of the cross-entropy term in the module total.
    variance_divisor: "eq4" divides the hinge sum by C only; "algorithm1"
        additionally divides by the batch size.
    invariance_divisor: "eq5" scales the squared similarity gap by 1/N;
        "mse_all_entries" averages over all N^2 entries.
    center_before_sim: row-center embeddings before L2-normalizing them
        for the similarity matrix.
    """

    gamma: float = 1.0
    eps_norm: float = 1e-8
    alpha: float = 0.001
    variance_divisor: str = "algorithm1"
    invariance_divisor: str = "mse_all_entries"
    center_before_sim: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.eps_norm <= 0:
            raise ValueError("eps_norm must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.variance_divisor not in VARIANCE_DIVISORS:
            raise ValueError(f"variance_divisor must be one of {VARIANCE_DIVISORS}")
        if self.invariance_divisor not in INVARIANCE_DIVISORS:
            raise ValueError(f"invariance_divisor must be one of {INVARIANCE_DIVISORS}")

    def with_alpha(self, alpha: float) -> "LossConfig":
        return replace(self, alpha=alpha)


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar values of each objective term for one module and batch."""

    variance: float
    invariance: float
    covariance: float
    local_total: float
    cross_entropy: float
    module_total: float

    @staticmethod
    def zero() -> "LossBreakdown":
        return LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


class LossNodes(NamedTuple):
    """Graph nodes for each term; values are read off after the forward."""

    variance: Node
    invariance: Node
    covariance: Node
    local_total: Node
    cross_entropy: Node
    module_total: Node

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(
            variance=float(self.variance.value.a[0, 0]),
            invariance=float(self.invariance.value.a[0, 0]),
            covariance=float(self.covariance.value.a[0, 0]),
            local_total=float(self.local_total.value.a[0, 0]),
            cross_entropy=float(self.cross_entropy.value.a[0, 0]),
            module_total=float(self.module_total.value.a[0, 0]),
        )


def _require_one_hot(labels: Matrix) -> None:
    a = labels.a
    if not np.all((a == 0.0) | (a == 1.0)) or not np.all(a.sum(axis=1) == 1.0):
        raise ValueError("labels must be one-hot rows (exactly one 1 per row)")


def variance_loss(g: Graph, embeddings: Node, cfg: LossConfig) -> Node:
    """Hinge penalty on per-column stds below gamma.

    std_j = sqrt(population var_j + 1e-7). Mode "eq4" returns the mean
    hinge over columns; "algorithm1" divides that mean by the batch size.
    """
    n, c = embeddings.value.shape
    centered = g.center_columns(embeddings)
    var = g.mean_columns(g.square(centered))
    std = g.sqrt(g.add(var, g.constant(Matrix.full(1, c, VAR_EPS))))
    hinge_sum = g.sum_all(g.hinge(std, cfg.gamma))
    if cfg.variance_divisor == "eq4":
        return g.scale(hinge_sum, 1.0 / c)
    return g.scale(hinge_sum, 1.0 / (c * n))


def invariance_loss(g: Graph, embeddings: Node, labels: Matrix, cfg: LossConfig) -> Node:
    """Squared gap between label similarity Y Y^T and embedding cosine sims.

    Embeddings are row-L2-normalized (optionally row-centered first) so
    X X^T holds cosine similarities; one-hot labels already have unit rows.
    Mode "eq5" scales the squared Frobenius gap by 1/N, "mse_all_entries"
    by 1/N^2.
    """
    _require_one_hot(labels)
    n = embeddings.value.rows
    if labels.rows != n:
        raise ValueError(f"labels have {labels.rows} rows, embeddings {n}")
    x = embeddings
    if cfg.center_before_sim:
        row_means = g.mean_rows(x)
        x = g.sub(x, g.broadcast_col(row_means, x.value.cols))
    xt = g.row_l2_normalize(x, cfg.eps_norm)
    sim = g.matmul(xt, g.transpose(xt))
    target = g.constant(Matrix._wrap(labels.a @ labels.a.T), name="label_similarity")
    gap = g.sum_all(g.square(g.sub(target, sim)))
    if cfg.invariance_divisor == "eq5":
        return g.scale(gap, 1.0 / n)
    return g.scale(gap, 1.0 / (n * n))


def covariance_loss(g: Graph, embeddings: Node) -> Node:
    """Mean squared off-diagonal covariance: decorrelates embedding dims."""
    n, c = embeddings.value.shape
    if n < 2:
        raise ValueError(f"covariance_loss: needs at least 2 rows, got {n}")
    centered = g.center_columns(embeddings)
    cov = g.scale(g.matmul(g.transpose(centered), centered), 1.0 / n)
    off = g.off_diagonal(cov)
    return g.scale(g.sum_all(g.square(off)), 1.0 / c)


def cross_entropy_loss(g: Graph, logits: Node, labels: Matrix) -> Node:
    """Mean softmax cross-entropy in the stable log-sum-exp form.

    The per-row max enters as a constant shift, which leaves the value
    exact and makes the gradient through the composition come out as
    (softmax - Y) / N.
    """
    _require_one_hot(labels)
    n, k = logits.value.shape
    if labels.shape != (n, k):
        raise ValueError(f"labels shape {labels.shape} != logits shape {logits.shape}")
    row_max = g.constant(Matrix._wrap(logits.value.a.max(axis=1, keepdims=True)),
                         name="logit_row_max")
    shifted = g.sub(logits, g.broadcast_col(row_max, k))
    sum_exp = g.scale(g.mean_rows(g.exp(shifted)), float(k))
    lse = g.add(row_max, g.log(sum_exp))
    picked = g.sum_all(g.hadamard(g.constant(labels, name="onehot_labels"), logits))
    return g.scale(g.sub(g.sum_all(lse), picked), 1.0 / n)


def local_loss(g: Graph, projected: Node, labels: Matrix, cfg: LossConfig,
               include: tuple[bool, bool, bool] = (True, True, True)
               ) -> tuple[Node, Node, Node, Node]:
    """Variance + invariance + covariance on the shared normalized embedding.

    Returns (variance, invariance, covariance, total) nodes. `include`
    toggles terms for ablations; an excluded term contributes an exact
    scalar zero so the total is still the same-order sum of all three.
    """
    nor = g.row_l2_normalize(projected, cfg.eps_norm)
    zero = lambda: g.constant(Matrix.zeros(1, 1))
    v = variance_loss(g, nor, cfg) if include[0] else zero()
    i = invariance_loss(g, nor, labels, cfg) if include[1] else zero()
    c = covariance_loss(g, nor) if include[2] else zero()
    total = g.add(g.add(v, i), c)
    return v, i, c, total


def module_total(g: Graph, local: Node, ce: Node, cfg: LossConfig) -> Node:
    """Module objective: local + alpha * cross-entropy."""
    return g.add(local, g.scale(ce, cfg.alpha))
