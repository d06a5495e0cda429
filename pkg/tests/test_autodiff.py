import numpy as np
import pytest

from deinforeg.autodiff import Graph, fd_check, forward
from deinforeg.checks import FD_TOLERANCE, loss_fd_errors, op_fd_errors
from deinforeg.tensor import Matrix, RngState, ShapeError


def test_forward_single_leaf_returns_binding():
    g = Graph()
    x = g.leaf(Matrix([[1.0, 2.0]]))
    forward(g, {x: Matrix([[3.0, 4.0]])})
    assert x.value.tolist() == [[3.0, 4.0]]


def test_relu_definition():
    g = Graph()
    x = g.leaf(Matrix([[-1.0, 2.0]]))
    assert g.relu(x).value.tolist() == [[0.0, 2.0]]


def test_nested_matmul_add_matches_direct_computation():
    rng = RngState(2)
    a, b, c = rng.normal(3, 3), rng.normal(3, 3), rng.normal(3, 3)
    g = Graph()
    out = g.add(g.matmul(g.leaf(a), g.leaf(b)), g.leaf(c))
    assert np.array_equal(out.value.a, a.a @ b.a + c.a)


def test_recompute_after_rebinding():
    g = Graph()
    x = g.leaf(Matrix([[2.0]]), requires_grad=True)
    y = g.sum_all(g.square(x))
    assert y.value.a[0, 0] == 4.0
    forward(g, {x: Matrix([[3.0]])})
    assert y.value.a[0, 0] == 9.0


def test_backward_sum_all_gives_ones():
    g = Graph()
    x = g.leaf(RngState(1).normal(2, 2), requires_grad=True)
    grads = g.backward(g.sum_all(x))
    assert grads[x].tolist() == [[1.0, 1.0], [1.0, 1.0]]


def test_backward_square_via_hadamard():
    g = Graph()
    x = g.leaf(Matrix([[3.0]]), requires_grad=True)
    grads = g.backward(g.sum_all(g.hadamard(x, x)))
    assert grads[x].tolist() == [[6.0]]


def test_backward_requires_scalar_root():
    g = Graph()
    x = g.leaf(Matrix([[1.0, 2.0]]), requires_grad=True)
    with pytest.raises(ValueError, match="1x1"):
        g.backward(g.relu(x))


def test_shape_violation_names_op():
    g = Graph()
    a = g.leaf(Matrix.zeros(2, 3))
    b = g.leaf(Matrix.zeros(2, 2))
    with pytest.raises(ShapeError, match="matmul"):
        g.matmul(a, b)


def test_unused_leaf_gets_exact_zero_matrix():
    g = Graph()
    x = g.leaf(RngState(0).normal(2, 3), requires_grad=True)
    unused = g.leaf(RngState(1).normal(4, 4), requires_grad=True)
    g.relu(unused)  # present in the graph, but not on the path to the root
    grads = g.backward(g.sum_all(x))
    assert np.array_equal(grads[unused].a, np.zeros((4, 4)))


def test_backward_deterministic_bitwise():
    rng = RngState(8)
    g = Graph()
    x = g.leaf(rng.normal(5, 4), requires_grad=True)
    w = g.leaf(rng.normal(4, 3), requires_grad=True)
    root = g.sum_all(g.tanh(g.matmul(x, w)))
    g1 = g.backward(root)
    g2 = g.backward(root)
    assert np.array_equal(g1[x].a, g2[x].a)
    assert np.array_equal(g1[w].a, g2[w].a)


def test_fd_check_linear_map_is_exact():
    g = Graph()
    x = g.leaf(RngState(4).normal(3, 3), requires_grad=True)
    root = g.sum_all(g.scale(x, 3.0))
    assert fd_check(g, root, x) <= 1e-10


def test_fd_check_tanh_chain():
    rng = RngState(6)
    g = Graph()
    x = g.leaf(rng.normal(3, 4), requires_grad=True)
    w = g.constant(rng.normal(4, 2))
    root = g.sum_all(g.tanh(g.matmul(g.tanh(x), w)))
    assert fd_check(g, root, x) < 1e-4


def test_every_op_fd_error_under_tolerance():
    errors = op_fd_errors(n_seeds=20)
    expected_ops = {"matmul", "add", "sub", "hadamard", "scale", "transpose", "relu",
                    "tanh", "exp", "log", "sqrt", "sum-all", "mean-columns", "mean-rows",
                    "row-l2-normalize", "row-broadcast-sub", "hinge", "square",
                    "softmax-rows", "select-off-diagonal"}
    assert set(errors) == expected_ops
    for op, err in errors.items():
        assert err < FD_TOLERANCE, f"{op}: {err}"


def test_full_local_loss_graph_fd_error_under_tolerance():
    errors = loss_fd_errors(n_seeds=5)
    for name, err in errors.items():
        assert err < FD_TOLERANCE, f"{name}: {err}"


def test_rebinding_wrong_shape_rejected():
    g = Graph()
    x = g.leaf(Matrix.zeros(2, 2))
    with pytest.raises(ShapeError):
        g.set_leaf(x, Matrix.zeros(3, 3))
