import math

import numpy as np
import pytest

from deinforeg.autodiff import Graph, fd_check
from deinforeg.data import one_hot
from deinforeg.losses import (LossConfig, covariance_loss, cross_entropy_loss,
                              invariance_loss, local_loss, module_total, variance_loss)
from deinforeg.tensor import Matrix, RngState

from loss_oracles import (oracle_covariance, oracle_cross_entropy, oracle_invariance,
                          oracle_local, oracle_variance)


def _scalar(node):
    return float(node.value.a[0, 0])


def _graph_with_leaf(value):
    g = Graph()
    return g, g.leaf(value, requires_grad=True)


def _random_labels(rng, n, k):
    return one_hot(rng.integers(0, k, n), k)


# -- variance ----------------------------------------------------------------


def test_variance_zero_when_stds_exceed_gamma():
    m = Matrix([[10.0, -10.0], [-10.0, 10.0], [10.0, 10.0], [-10.0, -10.0]])
    g, x = _graph_with_leaf(m)
    assert _scalar(variance_loss(g, x, LossConfig(gamma=1.0, variance_divisor="eq4"))) == 0.0


def test_variance_collapsed_batch_eq4():
    g, x = _graph_with_leaf(Matrix([[0.3, -0.7]] * 5))
    got = _scalar(variance_loss(g, x, LossConfig(gamma=1.0, variance_divisor="eq4")))
    assert got == pytest.approx(1.0 - math.sqrt(1e-7), abs=1e-12)


def test_variance_algorithm1_divides_by_batch():
    m = RngState(1).normal(5, 3)
    g, x = _graph_with_leaf(m)
    eq4 = _scalar(variance_loss(g, x, LossConfig(variance_divisor="eq4")))
    g, x = _graph_with_leaf(m)
    alg1 = _scalar(variance_loss(g, x, LossConfig(variance_divisor="algorithm1")))
    assert alg1 == pytest.approx(eq4 / 5, abs=1e-15)


def test_variance_matches_oracle_and_fd():
    rng = RngState(2)
    for mode in ("eq4", "algorithm1"):
        cfg = LossConfig(variance_divisor=mode)
        m = rng.normal(4, 3)
        g, x = _graph_with_leaf(m)
        node = variance_loss(g, x, cfg)
        assert _scalar(node) == pytest.approx(
            oracle_variance(m.tolist(), cfg.gamma, mode), abs=1e-12)
        assert fd_check(g, node, x) < 1e-4


def test_variance_invariant_to_row_permutation():
    rng = RngState(3)
    m = rng.normal(6, 4)
    perm = RngState(4).permutation(6)
    cfg = LossConfig()
    g, x = _graph_with_leaf(m)
    a = _scalar(variance_loss(g, x, cfg))
    g, x = _graph_with_leaf(Matrix(m.a[perm]))
    b = _scalar(variance_loss(g, x, cfg))
    assert abs(a - b) <= 1e-12


# -- invariance ----------------------------------------------------------------


def test_invariance_zero_for_identical_same_class_rows():
    labels = one_hot(np.zeros(3, dtype=int), 2)
    g, x = _graph_with_leaf(Matrix([[0.6, 0.8]] * 3))
    got = _scalar(invariance_loss(g, x, labels, LossConfig(eps_norm=1e-12)))
    assert got <= 1e-12


def test_invariance_zero_for_orthogonal_distinct_classes():
    labels = one_hot(np.array([0, 1]), 2)
    g, x = _graph_with_leaf(Matrix([[2.0, 0.0], [0.0, 3.0]]))
    got = _scalar(invariance_loss(g, x, labels, LossConfig(eps_norm=1e-12)))
    assert got <= 1e-12


def test_invariance_matches_oracle_all_modes_and_fd():
    rng = RngState(5)
    for div in ("eq5", "mse_all_entries"):
        for center in (False, True):
            cfg = LossConfig(invariance_divisor=div, center_before_sim=center)
            m = rng.normal(5, 4)
            labels = _random_labels(rng, 5, 3)
            g, x = _graph_with_leaf(m)
            node = invariance_loss(g, x, labels, cfg)
            expected = oracle_invariance(m.tolist(), labels.tolist(), cfg.eps_norm,
                                         center, div)
            assert _scalar(node) == pytest.approx(expected, abs=1e-12)
            assert fd_check(g, node, x) < 1e-4


def test_invariance_rejects_non_one_hot():
    g, x = _graph_with_leaf(RngState(6).normal(2, 2))
    with pytest.raises(ValueError, match="one-hot"):
        invariance_loss(g, x, Matrix([[0.5, 0.5], [1.0, 0.0]]), LossConfig())


def test_invariance_row_rescaling_absorbed():
    rng = RngState(7)
    cfg = LossConfig(eps_norm=1e-12)
    m = rng.normal(5, 4)
    labels = _random_labels(rng, 5, 3)
    scales = rng.uniform(5, 1, 0.5, 2.0).a
    g, x = _graph_with_leaf(m)
    a = _scalar(invariance_loss(g, x, labels, cfg))
    g, x = _graph_with_leaf(Matrix(m.a * scales))
    b = _scalar(invariance_loss(g, x, labels, cfg))
    assert abs(a - b) <= 1e-9


def test_invariance_permutation_equivariance():
    rng = RngState(8)
    m = rng.normal(6, 3)
    labels = _random_labels(rng, 6, 3)
    perm = RngState(9).permutation(6)
    cfg = LossConfig()
    g, x = _graph_with_leaf(m)
    a = _scalar(invariance_loss(g, x, labels, cfg))
    g, x = _graph_with_leaf(Matrix(m.a[perm]))
    b = _scalar(invariance_loss(g, x, Matrix(labels.a[perm]), cfg))
    assert abs(a - b) <= 1e-12


# -- covariance ----------------------------------------------------------------


def test_covariance_single_column_is_zero():
    g, x = _graph_with_leaf(Matrix([[1.0], [2.0], [3.0]]))
    assert _scalar(covariance_loss(g, x)) == 0.0


def test_covariance_two_equal_columns_hand_case():
    g, x = _graph_with_leaf(Matrix([[-1.0, -1.0], [1.0, 1.0]]))
    got = _scalar(covariance_loss(g, x))
    assert got == pytest.approx(1.0, abs=1e-12)
    assert got == pytest.approx(oracle_covariance([[-1.0, -1.0], [1.0, 1.0]]), abs=1e-15)


def test_covariance_diagonal_structure_is_zero():
    # centered orthogonal columns: empirical cross-covariance exactly zero
    m = Matrix([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    g, x = _graph_with_leaf(m)
    assert _scalar(covariance_loss(g, x)) <= 1e-12


def test_covariance_needs_two_rows():
    g, x = _graph_with_leaf(Matrix([[1.0, 2.0]]))
    with pytest.raises(ValueError, match="2 rows"):
        covariance_loss(g, x)


def test_covariance_matches_oracle_and_fd():
    rng = RngState(10)
    m = rng.normal(5, 4)
    g, x = _graph_with_leaf(m)
    node = covariance_loss(g, x)
    assert _scalar(node) == pytest.approx(oracle_covariance(m.tolist()), abs=1e-12)
    assert fd_check(g, node, x) < 1e-4


def test_covariance_invariant_to_constant_row_shift():
    rng = RngState(11)
    m = rng.normal(6, 3)
    shift = rng.normal(1, 3).a
    g, x = _graph_with_leaf(m)
    a = _scalar(covariance_loss(g, x))
    g, x = _graph_with_leaf(Matrix(m.a + shift))
    b = _scalar(covariance_loss(g, x))
    assert abs(a - b) <= 1e-9


# -- cross-entropy ---------------------------------------------------------------


def test_cross_entropy_saturated_softmax():
    labels = one_hot(np.array([0, 1]), 2)
    g, z = _graph_with_leaf(Matrix([[25.0, 0.0], [0.0, 25.0]]))
    assert _scalar(cross_entropy_loss(g, z, labels)) < 1e-6


def test_cross_entropy_uniform_prediction_is_log_k():
    for k in (2, 3, 7):
        labels = one_hot(np.arange(4) % k, k)
        g, z = _graph_with_leaf(Matrix.zeros(4, k))
        assert _scalar(cross_entropy_loss(g, z, labels)) == pytest.approx(
            math.log(k), abs=1e-9)


def test_cross_entropy_matches_oracle_and_gradient_identity():
    rng = RngState(12)
    logits = rng.normal(6, 4)
    labels = _random_labels(rng, 6, 4)
    g, z = _graph_with_leaf(logits)
    node = cross_entropy_loss(g, z, labels)
    assert _scalar(node) == pytest.approx(
        oracle_cross_entropy(logits.tolist(), labels.tolist()), abs=1e-12)
    grads = g.backward(node)
    shifted = logits.a - logits.a.max(axis=1, keepdims=True)
    softmax = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    expected = (softmax - labels.a) / 6
    assert np.abs(grads[z].a - expected).max() <= 1e-9


# -- local loss and module total ---------------------------------------------


def test_local_loss_engineered_zero():
    # scaled Hadamard rows: orthogonal unit rows, zero off-diagonal covariance,
    # and per-column std above a small threshold
    h = 0.5 * np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]],
                       dtype=float)
    labels = one_hot(np.arange(4), 4)
    cfg = LossConfig(gamma=1e-4, eps_norm=1e-12)
    g, x = _graph_with_leaf(Matrix(h))
    v, i, c, total = local_loss(g, x, labels, cfg)
    assert _scalar(v) == 0.0
    assert _scalar(i) <= 1e-12
    assert _scalar(c) <= 1e-12
    assert _scalar(total) <= 1e-12


def test_local_loss_total_is_same_order_sum():
    rng = RngState(13)
    g, x = _graph_with_leaf(rng.normal(5, 4))
    labels = _random_labels(rng, 5, 3)
    v, i, c, total = local_loss(g, x, labels, LossConfig())
    assert _scalar(total) == (_scalar(v) + _scalar(i)) + _scalar(c)


def test_local_loss_matches_oracle_under_every_mode_combination():
    rng = RngState(14)
    for vdiv in ("eq4", "algorithm1"):
        for idiv in ("eq5", "mse_all_entries"):
            for center in (False, True):
                cfg = LossConfig(variance_divisor=vdiv, invariance_divisor=idiv,
                                 center_before_sim=center)
                for _ in range(4):
                    n = int(rng.integers(2, 8, 1)[0])
                    c = int(rng.integers(2, 8, 1)[0])
                    k = int(rng.integers(2, 5, 1)[0])
                    m = rng.normal(n, c)
                    labels = _random_labels(rng, n, k)
                    g, x = _graph_with_leaf(m)
                    v, i, cc, total = local_loss(g, x, labels, cfg)
                    ov, oi, oc, ot = oracle_local(
                        m.tolist(), labels.tolist(), cfg.gamma, cfg.eps_norm,
                        vdiv, idiv, center)
                    assert _scalar(v) == pytest.approx(ov, abs=1e-9)
                    assert _scalar(i) == pytest.approx(oi, abs=1e-9)
                    assert _scalar(cc) == pytest.approx(oc, abs=1e-9)
                    assert _scalar(total) == pytest.approx(ot, abs=1e-9)


def test_local_loss_gradient_fd():
    rng = RngState(15)
    g, x = _graph_with_leaf(rng.normal(8, 5))
    labels = _random_labels(rng, 8, 3)
    _, _, _, total = local_loss(g, x, labels, LossConfig())
    assert fd_check(g, total, x) < 1e-4


def test_all_terms_nonnegative():
    rng = RngState(16)
    for _ in range(20):
        n = int(rng.integers(2, 9, 1)[0])
        c = int(rng.integers(1, 9, 1)[0])
        m = rng.normal(n, c)
        labels = _random_labels(rng, n, 2)
        g, x = _graph_with_leaf(m)
        v, i, cc, total = local_loss(g, x, labels, LossConfig())
        for node in (v, i, cc, total):
            val = _scalar(node)
            assert val >= 0.0 and np.isfinite(val)


def test_module_total_alpha_zero_and_arithmetic():
    g = Graph()
    local = g.constant(Matrix([[1.0]]))
    ce = g.constant(Matrix([[2.0]]))
    assert _scalar(module_total(g, local, ce, LossConfig(alpha=0.0))) == 1.0
    assert _scalar(module_total(g, local, ce, LossConfig(alpha=0.001))) == pytest.approx(
        1.002, abs=1e-15)


def test_module_total_gradient_scales_linearly_in_alpha():
    rng = RngState(17)
    logits_val = rng.normal(4, 3)
    emb_val = rng.normal(4, 5)
    labels = _random_labels(rng, 4, 3)

    def classifier_grad(alpha):
        g = Graph()
        emb = g.leaf(emb_val, requires_grad=True)
        w = g.leaf(rng.derive("w").normal(3, 3), requires_grad=True)
        logits = g.matmul(g.leaf(logits_val), w)
        _, _, _, total = local_loss(g, emb, labels, LossConfig())
        ce = cross_entropy_loss(g, logits, labels)
        root = module_total(g, total, ce, LossConfig(alpha=alpha))
        return g.backward(root)[w].a

    g1 = classifier_grad(0.002)
    g2 = classifier_grad(0.004)
    assert np.abs(g2 - 2.0 * g1).max() <= 1e-9


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(gamma=-1.0)
    with pytest.raises(ValueError):
        LossConfig(eps_norm=0.0)
    with pytest.raises(ValueError):
        LossConfig(alpha=-0.1)
    with pytest.raises(ValueError):
        LossConfig(variance_divisor="bogus")
    LossConfig(gamma=0.0)  # hinge threshold zero disables the variance term
