import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import finite_diff_check, rand_tensor
from ragcap.autodiff import (GraphError, ShapeError, Tensor, as_tensor,
                             layer_norm, take_rows)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = Tensor(np.eye(2)) @ a
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_hand_example():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_matches_triple_loop(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    out = (Tensor(a) @ Tensor(b)).data
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) @ Tensor(np.ones((3, 2)))


def test_matmul_batched_gradcheck(rng):
    a = rand_tensor(rng, (2, 3, 4))
    b = rand_tensor(rng, (2, 4, 5))
    finite_diff_check(lambda: ((a @ b) ** 2.0).sum(), [a, b])


def test_matmul_broadcast_batch(rng):
    a = rand_tensor(rng, (2, 3, 4))
    b = rand_tensor(rng, (4, 5))
    out = a @ b
    assert out.shape == (2, 3, 5)
    finite_diff_check(lambda: (a @ b).sum(), [a, b])


# ---------------------------------------------------------------------------
# softmax / log_softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform():
    out = Tensor([0.0, 0.0, 0.0]).softmax()
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_logits_stable():
    out = Tensor([1000.0, 1000.0]).softmax()
    np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)
    assert np.all(np.isfinite(out.data))


def test_softmax_matches_exp_oracle():
    x = np.array([1.0, 2.0, 3.0])
    out = Tensor(x).softmax().data
    ref = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2,
                max_size=8),
       st.integers(min_value=1, max_value=4))
def test_softmax_rows_sum_to_one(row, reps):
    x = Tensor(np.tile(row, (reps, 1)))
    out = x.softmax(axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


def test_log_softmax_consistent(rng):
    x = rand_tensor(rng, (3, 5))
    np.testing.assert_allclose(x.log_softmax().data,
                               np.log(x.softmax().data), atol=1e-12)
    finite_diff_check(lambda: (x.log_softmax() * x.log_softmax()).sum(), [x])


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def test_grad_of_sum_is_ones(rng):
    x = rand_tensor(rng, (3, 4))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_grad_of_dot_is_2x(rng):
    x = rand_tensor(rng, (5,))
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)


def test_composite_graph_matches_finite_differences(rng):
    w = rand_tensor(rng, (4, 3))
    x = Tensor(rng.normal(size=(2, 4)))
    targets = np.array([0, 2])

    def loss_fn():
        logits = x @ w
        logp = logits.log_softmax(axis=-1)
        onehot = np.zeros((2, 3))
        onehot[np.arange(2), targets] = 1.0
        return -(logp * Tensor(onehot)).sum()

    finite_diff_check(loss_fn, [w])


def test_repeated_backward_accumulates(rng):
    x = rand_tensor(rng, (3,))
    loss = (x * x).sum()
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * first, atol=1e-12)


def test_diamond_graph_grad(rng):
    # y appears twice in the graph; gradient contributions must add
    y = rand_tensor(rng, (3,))
    ((y + y) * y).sum().backward()
    np.testing.assert_allclose(y.grad, 4 * y.data, atol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        (x * 2).backward()


def test_backward_requires_grad():
    x = Tensor(np.ones(1))
    with pytest.raises(GraphError):
        x.sum().backward()


def test_broadcast_add_grad(rng):
    a = rand_tensor(rng, (3, 4))
    b = rand_tensor(rng, (4,))
    (a + b).sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones((3, 4)))
    np.testing.assert_array_equal(b.grad, 3 * np.ones(4))


def test_elementwise_ops_gradcheck(rng):
    x = rand_tensor(rng, (2, 3), scale=0.5)
    y = rand_tensor(rng, (2, 3), scale=0.5)
    finite_diff_check(
        lambda: ((x * y + x / (y * y + 2.0) - y) ** 3.0).sum(), [x, y])


def test_exp_log_relu_gelu_gradcheck(rng):
    x = rand_tensor(rng, (7,), scale=0.8)
    finite_diff_check(lambda: (x.exp() + (x * x + 0.5).log()).sum(), [x])
    finite_diff_check(lambda: x.gelu().sum(), [x])
    # relu gradient away from the kink
    y = Tensor(np.array([-2.0, -0.5, 0.7, 1.5]), requires_grad=True)
    y.relu().sum().backward()
    np.testing.assert_array_equal(y.grad, [0.0, 0.0, 1.0, 1.0])


def test_getitem_and_take_rows_grad(rng):
    x = rand_tensor(rng, (4, 3))
    x[1].sum().backward()
    expected = np.zeros((4, 3))
    expected[1] = 1.0
    np.testing.assert_array_equal(x.grad, expected)

    table = rand_tensor(rng, (5, 2))
    take_rows(table, [1, 1, 3]).sum().backward()
    expected = np.zeros((5, 2))
    expected[1] = 2.0  # row gathered twice accumulates
    expected[3] = 1.0
    np.testing.assert_array_equal(table.grad, expected)


def test_reshape_swapaxes_mean_gradcheck(rng):
    x = rand_tensor(rng, (2, 3, 4))
    finite_diff_check(
        lambda: (x.swapaxes(0, 2).reshape((4, 6)).mean(axis=0) ** 2.0).sum(),
        [x])


def test_layer_norm_output_and_grad(rng):
    x = rand_tensor(rng, (3, 6))
    out = layer_norm(x)
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-4)
    finite_diff_check(lambda: (layer_norm(x) ** 3.0).sum(), [x])


def test_as_tensor_passthrough():
    t = Tensor([1.0])
    assert as_tensor(t) is t
    assert isinstance(as_tensor([1.0, 2.0]), Tensor)


def test_detach_breaks_graph(rng):
    x = rand_tensor(rng, (3,))
    d = x.detach()
    assert not d.requires_grad
    np.testing.assert_array_equal(d.data, x.data)
