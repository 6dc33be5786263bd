"""Gradient and contract tests for the array autodiff engine.

Every primitive's analytic gradient is checked against central finite
differences on random 64-bit inputs."""

import numpy as np
import pytest
from scipy.stats import norm

from flowdistill import autodiff as ad
from flowdistill.autodiff import ShapeError, Tensor

from helpers import max_rel_err, numeric_gradient

RNG = np.random.default_rng(1234)


def t64(*shape, requires_grad=True):
    return Tensor(RNG.standard_normal(shape), requires_grad=requires_grad)


def check_grads(build, tensors, rtol=1e-6, atol=1e-8):
    """build() -> scalar Tensor; compares backward against the FD oracle."""
    loss = build()
    grads = ad.backward(loss, leaves=tensors)
    for t in tensors:
        fd = numeric_gradient(lambda: build().item(), t.data)
        np.testing.assert_allclose(grads[t], fd, rtol=rtol, atol=atol)


def weighted(out: Tensor) -> Tensor:
    w = Tensor(np.linspace(0.5, 1.5, out.data.size).reshape(out.shape))
    return (out * w).sum()


# ---------------------------------------------------------------------------
# trivial value contracts


def test_matmul_identity():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = ad.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, a.data)


def test_softmax_symmetry():
    out = ad.softmax(Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_layer_norm_constant_row_is_bias():
    x = Tensor(np.full((3, 4), 7.0))
    g = Tensor(np.ones(4))
    b = Tensor(np.zeros(4))
    out = ad.layer_norm(x, g, b)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)
    b2 = Tensor(np.array([1.0, -2.0, 3.0, 0.5]))
    out2 = ad.layer_norm(x, g, b2)
    np.testing.assert_allclose(out2.data, np.tile(b2.data, (3, 1)), atol=1e-12)


def test_gelu_matches_normal_cdf():
    x = np.linspace(-3, 3, 13)
    out = ad.gelu(Tensor(x))
    np.testing.assert_allclose(out.data, x * norm.cdf(x), rtol=1e-12)
    assert ad.gelu(Tensor(np.zeros(3))).data.tolist() == [0.0, 0.0, 0.0]


def test_sum_of_squares_gradient_analytic():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    grads = ad.backward(ad.sumsq(x))
    np.testing.assert_array_equal(grads[x], [2.0, 4.0])


def test_take_rows_unselected_entries_get_zero_grad():
    x = t64(5, 3)
    loss = ad.sumsq(ad.take_rows(x, [1, 3]))
    grads = ad.backward(loss)
    assert np.all(grads[x][[0, 2, 4]] == 0.0)
    assert np.all(grads[x][[1, 3]] != 0.0)


def test_non_contributing_leaf_gets_zeros():
    x, y = t64(3), t64(3)
    grads = ad.backward(ad.sumsq(x), leaves=[x, y])
    np.testing.assert_array_equal(grads[y], np.zeros(3))


def test_backward_requires_scalar_loss():
    x = t64(3)
    with pytest.raises(ShapeError, match="scalar"):
        ad.backward(x * 2.0)


def test_backward_is_pure():
    x, y = t64(4, 4), t64(4, 4)
    loss = ad.sumsq(ad.matmul(ad.gelu(x), ad.softmax(y)))
    g1 = ad.backward(loss)
    g2 = ad.backward(loss)
    np.testing.assert_array_equal(g1[x], g2[x])
    np.testing.assert_array_equal(g1[y], g2[y])


def test_diamond_graph_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x + x
    grads = ad.backward(ad.sumsq(y))  # (2x)^2 -> d/dx = 8x
    np.testing.assert_allclose(grads[x], [24.0])


def test_no_grad_blocks_recording():
    x = t64(3)
    with ad.no_grad():
        y = x * 2.0
    assert y._parents == () and not y.requires_grad


# ---------------------------------------------------------------------------
# broadcasting rules: combine deterministically or fail loudly


def test_broadcast_add_and_reduce_grad():
    a = t64(3, 1)
    b = t64(1, 4)
    check_grads(lambda: weighted(a + b), [a, b])


def test_broadcast_mul_row_vector():
    a = t64(5, 3)
    b = t64(3)
    check_grads(lambda: weighted(a * b), [a, b])


def test_incompatible_shapes_fail_loudly():
    with pytest.raises(ShapeError, match="add.*broadcast"):
        Tensor(np.zeros((3, 2))) + Tensor(np.zeros(4))
    with pytest.raises(ShapeError, match="matmul.*inner"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError, match="concat"):
        ad.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)
    with pytest.raises(ShapeError, match="layer_norm"):
        ad.layer_norm(t64(2, 4), Tensor(np.ones(3)), Tensor(np.zeros(3)))


# ---------------------------------------------------------------------------
# per-primitive finite-difference checks (64-bit)


def test_grad_add_sub_mul():
    a, b = t64(3, 4), t64(3, 4)
    check_grads(lambda: weighted(a + b), [a, b])
    check_grads(lambda: weighted(a - b), [a, b])
    check_grads(lambda: weighted(a * b), [a, b])


def test_grad_matmul_2d():
    a, b = t64(3, 5), t64(5, 2)
    check_grads(lambda: weighted(ad.matmul(a, b)), [a, b])


def test_grad_matmul_batched():
    a, b = t64(2, 3, 4), t64(2, 4, 3)
    check_grads(lambda: weighted(ad.matmul(a, b)), [a, b])


def test_grad_matmul_broadcast_batch():
    a, b = t64(2, 3, 4), t64(4, 5)
    check_grads(lambda: weighted(ad.matmul(a, b)), [a, b])


def test_grad_reshape_transpose_concat():
    a, b = t64(2, 6), t64(3, 4)
    check_grads(
        lambda: weighted(
            ad.concat([ad.reshape(a, (3, 4)), ad.transpose(b, (0, 1))], axis=0)
        ),
        [a, b],
    )
    c = t64(2, 3, 4)
    check_grads(lambda: weighted(ad.transpose(c, (2, 0, 1))), [c])


def test_grad_take_rows_and_gather():
    x = t64(6, 4)
    check_grads(lambda: weighted(ad.take_rows(x, [5, 0, 2, 2])), [x])
    y = t64(5, 7)
    idx = RNG.integers(0, 7, size=5)
    check_grads(lambda: weighted(ad.gather(y, idx)), [y])


def test_grad_reductions():
    x = t64(4, 5)
    check_grads(lambda: x.sum() * 0.7, [x])
    check_grads(lambda: weighted(x.sum(axis=0)), [x])
    check_grads(lambda: weighted(x.mean(axis=1)), [x])
    check_grads(lambda: x.mean() * 2.0, [x])
    check_grads(lambda: ad.sumsq(x) * 0.3, [x])


def test_grad_softmax_logsoftmax():
    x = t64(4, 6)
    check_grads(lambda: weighted(ad.softmax(x)), [x])
    check_grads(lambda: weighted(ad.log_softmax(x)), [x])


def test_grad_gelu():
    x = t64(5, 3)
    check_grads(lambda: weighted(ad.gelu(x)), [x])


def test_grad_layer_norm():
    x, g, b = t64(4, 6), t64(6), t64(6)
    check_grads(lambda: weighted(ad.layer_norm(x, g, b)), [x, g, b], rtol=1e-5, atol=1e-7)


def test_grad_conv1d_grouped():
    x = t64(9, 8)
    w = t64(3, 2, 4, 4)
    check_grads(lambda: weighted(ad.conv1d_grouped(x, w, groups=2)), [x, w])


def test_conv1d_shape_errors():
    with pytest.raises(ShapeError, match="odd"):
        ad.conv1d_grouped(t64(5, 4), t64(4, 2, 2, 2), groups=2)
    with pytest.raises(ShapeError, match="divide"):
        ad.conv1d_grouped(t64(5, 5), t64(3, 2, 2, 2), groups=2)
