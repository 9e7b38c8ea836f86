"""Gradient and contract tests for the reverse-mode tape."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from littrace.autodiff import (
    ContractError,
    DimensionError,
    MaskError,
    Tape,
    Tensor,
    add,
    backward,
    broadcast_last,
    clip,
    concat,
    div,
    gather_rows,
    grad_check,
    log,
    matmul,
    mean_last,
    mul,
    relu,
    reshape,
    scale,
    select_last,
    shift,
    sigmoid,
    softmax_masked,
    sqrt,
    sub,
    sum_all,
    take_step,
    tanh,
    transpose,
)

RNG = np.random.default_rng(20240817)


def rand(*shape, lo=-2.0, hi=2.0):
    return Tensor(RNG.uniform(lo, hi, size=shape), requires_grad=True)


# ---------------------------------------------------------------------------
# tape mechanics


def test_backward_requires_tape():
    x = rand(3)
    with pytest.raises(ContractError):
        backward(sum_all(x))


def test_backward_requires_scalar():
    x = rand(3)
    with Tape():
        y = mul(x, x)
        with pytest.raises(ContractError):
            backward(y)


def test_fanout_accumulates_gradient():
    x = rand(4)
    with Tape():
        y = add(mul(x, x), mul(x, x))  # 2x^2, x used twice per product
        backward(sum_all(y))
    np.testing.assert_allclose(x.grad, 4.0 * x.data, rtol=1e-12)


def test_constant_inputs_get_no_gradient():
    x = Tensor(np.ones(3))
    w = rand(3)
    with Tape():
        backward(sum_all(mul(x, w)))
    assert x.grad is None
    np.testing.assert_allclose(w.grad, np.ones(3))


def test_gradients_do_not_leak_across_tapes():
    x = rand(3)
    with Tape():
        backward(sum_all(mul(x, x)))
    first = x.grad.copy()
    x.grad = None
    with Tape():
        backward(sum_all(mul(x, x)))
    np.testing.assert_allclose(x.grad, first)


# ---------------------------------------------------------------------------
# elementwise ops: values and finite-difference gradients


def numeric_vs_analytic(f, x0: np.ndarray, h=1e-6):
    point = Tensor(x0.copy(), requires_grad=True)
    return grad_check(lambda t: sum_all(f(t)), point, h=h)


@pytest.mark.parametrize(
    "f",
    [
        sigmoid,
        tanh,
        relu,
        lambda x: log(shift(x, 3.0)),
        lambda x: sqrt(shift(x, 3.0)),
        lambda x: scale(x, -1.7),
        lambda x: shift(x, 0.3),
        lambda x: clip(x, -0.5, 0.5),
        lambda x: mul(x, x),
        lambda x: add(x, mul(x, x)),
        lambda x: sub(x, mul(x, x)),
        lambda x: div(x, shift(mul(x, x), 1.0)),
    ],
)
def test_elementwise_gradients(f):
    x0 = RNG.uniform(-2.0, 2.0, size=(3, 4))
    x0 = x0 + 0.6 * np.sign(x0)  # stay clear of relu/clip kinks
    assert numeric_vs_analytic(f, x0) < 1e-5


def test_sigmoid_values_stable_at_extremes():
    x = Tensor(np.array([-800.0, -30.0, 0.0, 30.0, 800.0]))
    out = sigmoid(x)
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == 0.0 or out.data[0] < 1e-300
    assert out.data[2] == 0.5
    assert out.data[-1] == 1.0 or out.data[-1] > 1.0 - 1e-12


def test_clip_zeroes_gradient_outside_range():
    x = Tensor(np.array([-2.0, 0.0, 2.0]), requires_grad=True)
    with Tape():
        backward(sum_all(clip(x, -1.0, 1.0)))
    np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])


def test_relu_zero_negative_side():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    with Tape():
        backward(sum_all(relu(x)))
    np.testing.assert_allclose(x.grad, [0.0, 1.0])


# ---------------------------------------------------------------------------
# broadcasting contract


def test_trailing_vector_broadcast_forward_and_backward():
    x = rand(2, 3, 4)
    b = rand(4)
    with Tape():
        y = add(x, b)
        backward(sum_all(y))
    np.testing.assert_allclose(y.data, x.data + b.data)
    np.testing.assert_allclose(b.grad, np.full(4, 6.0))


def test_mismatched_shapes_rejected():
    with pytest.raises(DimensionError):
        add(rand(2, 3), rand(3, 2))
    with pytest.raises(DimensionError):
        mul(rand(2, 3), rand(2))  # trailing dim 3 != 2


def test_broadcast_last_requires_singleton():
    with pytest.raises(DimensionError):
        broadcast_last(rand(2, 3), 4)


def test_broadcast_last_gradient_sums():
    x = rand(2, 1)
    with Tape():
        backward(sum_all(broadcast_last(x, 5)))
    np.testing.assert_allclose(x.grad, np.full((2, 1), 5.0))


# ---------------------------------------------------------------------------
# matmul


def test_matmul_2d_forward_backward():
    a, b = rand(3, 4), rand(4, 2)
    with Tape():
        y = matmul(a, b)
        backward(sum_all(y))
    np.testing.assert_allclose(y.data, a.data @ b.data)
    g = np.ones((3, 2))
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_matmul_batched_with_2d_rhs_sums_gradient():
    a, w = rand(2, 3, 4), rand(4, 5)
    with Tape():
        y = matmul(a, w)
        backward(sum_all(y))
    np.testing.assert_allclose(y.data, a.data @ w.data)
    expect_w = np.einsum("bij,bik->jk", a.data, np.ones((2, 3, 5)))
    np.testing.assert_allclose(w.grad, expect_w)


def test_matmul_inner_dim_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(3, 2\)"):
        matmul(rand(3, 4), rand(3, 2))


def test_matmul_gradient_check_batched():
    a0 = RNG.uniform(-1, 1, size=(2, 3, 4))
    w = Tensor(RNG.uniform(-1, 1, size=(4, 4)))
    assert numeric_vs_analytic(lambda t: matmul(t, w), a0) < 1e-6


# ---------------------------------------------------------------------------
# softmax with mask


def test_softmax_masked_rows_sum_to_one_over_allowed():
    for _ in range(100):
        logits = rand(2, 5)
        mask = RNG.random((2, 5)) < 0.6
        mask[:, 0] = True  # keep every row feasible
        p = softmax_masked(logits, mask)
        np.testing.assert_allclose(p.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(p.data[~mask] == 0.0)


def test_softmax_masked_fully_masked_row_raises():
    logits = rand(2, 4)
    mask = np.ones((2, 4), dtype=bool)
    mask[1] = False
    with pytest.raises(MaskError, match="1"):
        softmax_masked(logits, mask)


def test_softmax_masked_gradient():
    mask = np.array([[True, True, False, True], [True, False, True, True]])
    x0 = RNG.uniform(-2, 2, size=(2, 4))
    v = Tensor(RNG.uniform(0, 1, (2, 4)))
    point = Tensor(x0, requires_grad=True)
    err = grad_check(lambda t: sum_all(mul(softmax_masked(t, mask), v)), point)
    assert err < 1e-6


def test_softmax_masked_handles_extreme_logits():
    logits = Tensor(np.array([[1000.0, -1000.0, 999.0]]))
    mask = np.array([[True, True, True]])
    p = softmax_masked(logits, mask)
    assert np.all(np.isfinite(p.data))
    np.testing.assert_allclose(p.data.sum(), 1.0)


# ---------------------------------------------------------------------------
# structural ops


def test_concat_splits_gradient():
    a, b = rand(2, 3), rand(2, 2)
    with Tape():
        y = concat([a, b], axis=1)
        backward(sum_all(mul(y, y)))
    np.testing.assert_allclose(a.grad, 2 * a.data)
    np.testing.assert_allclose(b.grad, 2 * b.data)


def test_concat_shape_mismatch():
    with pytest.raises(DimensionError):
        concat([rand(2, 3), rand(3, 3)], axis=1)


def test_gather_rows_scatter_gradient():
    table = rand(5, 3)
    ids = np.array([[1, 1], [4, 0]])
    with Tape():
        backward(sum_all(gather_rows(table, ids)))
    counts = np.zeros((5, 3))
    for i in ids.ravel():
        counts[i] += 1.0
    np.testing.assert_allclose(table.grad, counts)


def test_gather_rows_range_error():
    with pytest.raises(IndexError, match="7"):
        gather_rows(rand(5, 3), np.array([7]))


def test_select_last_forward_backward():
    x = rand(2, 3, 4)
    ids = np.array([[0, 3, 1], [2, 2, 0]])
    with Tape():
        y = select_last(x, ids)
        backward(sum_all(y))
    expect = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]
    np.testing.assert_allclose(y.data, expect)
    assert x.grad.sum() == pytest.approx(6.0)
    assert x.grad[0, 1, 3] == 1.0 and x.grad[0, 1, 0] == 0.0


def test_take_step_slices_and_accumulates():
    x = rand(2, 4, 3)
    with Tape():
        y = take_step(x, 2, axis=1)
        backward(sum_all(y))
    np.testing.assert_allclose(y.data, x.data[:, 2, :])
    assert x.grad[:, 2, :].sum() == pytest.approx(6.0)
    assert x.grad[:, (0, 1, 3), :].sum() == 0.0


def test_reshape_transpose_roundtrip_gradient():
    x = rand(2, 3, 4)
    with Tape():
        y = transpose(reshape(x, (2, 12, 1)), (1, 0, 2))
        backward(sum_all(mul(y, y)))
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_mean_last_keeps_singleton():
    x = rand(2, 3, 4)
    y = mean_last(x)
    assert y.shape == (2, 3, 1)
    np.testing.assert_allclose(y.data[..., 0], x.data.mean(axis=-1))


# ---------------------------------------------------------------------------
# property-based gradient checks


@settings(max_examples=25, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 2**31 - 1),
)
def test_composite_expression_gradients(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1.5, 1.5, size=(rows, cols))
    w = Tensor(rng.uniform(-1.0, 1.0, size=(cols, cols)))

    def f(t):
        h = tanh(matmul(t, w))
        return sum_all(mul(sigmoid(h), shift(h, 0.5)))

    assert grad_check(f, Tensor(x0, requires_grad=True)) < 1e-5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_softmax_chain_gradient(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-2, 2, size=(3, 5))
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    v = Tensor(rng.uniform(-1, 1, size=(3, 5)))

    def f(t):
        return sum_all(mul(softmax_masked(t, mask), v))

    assert grad_check(f, Tensor(x0, requires_grad=True)) < 1e-5
