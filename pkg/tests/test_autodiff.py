import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madapt.autodiff import (
    NonFiniteError,
    ShapeError,
    Tensor,
    clip,
    concat,
    exp,
    fixed_reduction_order,
    gather_rows,
    grad_check,
    grl,
    log,
    log_softmax,
    matmul,
    no_grad,
    sigmoid,
    softmax,
    sqdist,
    tanh,
    tensor_mean,
    tensor_sum,
)

from oracles import log_softmax as np_log_softmax
from oracles import numeric_grad


def _check_against_numpy(op, np_op, shapes, rng, positive=False, tol=1e-6):
    """Backward of sum(w * op(*xs)) versus central differences of the numpy twin."""
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    out_shape = np.shape(np_op(*xs))
    w = rng.normal(size=out_shape)
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    loss = tensor_sum(op(*ts) * Tensor(w))
    loss.backward()
    for i, t in enumerate(ts):

        def f(xi, i=i):
            args = [x if j != i else xi for j, x in enumerate(xs)]
            return float(np.sum(w * np_op(*args)))

        ref = numeric_grad(f, xs[i])
        np.testing.assert_allclose(t.grad, ref, rtol=tol, atol=tol)


CASES = [
    ("add", lambda a, b: a + b, lambda a, b: a + b, [(3, 4), (3, 4)], False),
    ("add_broadcast", lambda a, b: a + b, lambda a, b: a + b, [(3, 4), (4,)], False),
    ("sub", lambda a, b: a - b, lambda a, b: a - b, [(2, 5), (2, 5)], False),
    ("mul", lambda a, b: a * b, lambda a, b: a * b, [(3, 4), (3, 4)], False),
    ("mul_broadcast", lambda a, b: a * b, lambda a, b: a * b, [(2, 3, 4), (3, 1)], False),
    ("matmul", matmul, lambda a, b: a @ b, [(3, 4), (4, 2)], False),
    ("matmul_batched", matmul, lambda a, b: a @ b, [(2, 3, 4), (4, 5)], False),
    ("matvec", matmul, lambda a, b: a @ b, [(3, 4), (4,)], False),
    ("exp", exp, np.exp, [(3, 3)], False),
    ("log", log, np.log, [(3, 3)], True),
    ("tanh", tanh, np.tanh, [(4, 2)], False),
    ("sigmoid", sigmoid, lambda x: 1 / (1 + np.exp(-x)), [(4, 2)], False),
    ("softmax", lambda x: softmax(x, axis=1), lambda x: np.exp(np_log_softmax(x)), [(3, 5)], False),
    ("log_softmax", lambda x: log_softmax(x, axis=1), np_log_softmax, [(3, 5)], False),
    ("sum_axis", lambda x: tensor_sum(x, axis=0), lambda x: x.sum(axis=0), [(3, 4)], False),
    ("mean", lambda x: tensor_mean(x, axis=1), lambda x: x.mean(axis=1), [(3, 4)], False),
    ("transpose", lambda x: x.T, lambda x: x.T, [(2, 5)], False),
    ("reshape", lambda x: x.reshape(6, 2), lambda x: x.reshape(6, 2), [(3, 4)], False),
    ("concat", lambda a, b: concat([a, b], axis=1), lambda a, b: np.concatenate([a, b], axis=1), [(2, 3), (2, 2)], False),
    ("slice", lambda x: x[1:, ::2], lambda x: x[1:, ::2], [(4, 5)], False),
    (
        "sqdist",
        sqdist,
        lambda a, b: ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1),
        [(4, 3), (5, 3)],
        False,
    ),
]


@pytest.mark.parametrize("name,op,np_op,shapes,positive", CASES, ids=[c[0] for c in CASES])
def test_primitive_gradients_at_ten_points(name, op, np_op, shapes, positive):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        _check_against_numpy(op, np_op, shapes, rng, positive)


def test_gather_rows_gradient_accumulates_repeats_and_skips_padding():
    table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    idx = np.array([[1, 1], [0, 3]])
    out = gather_rows(table, idx, padding_idx=0)
    np.testing.assert_array_equal(out.data[0, 0], table.data[1])
    tensor_sum(out).backward()
    np.testing.assert_array_equal(table.grad, np.array([[0, 0, 0], [2, 2, 2], [0, 0, 0], [1, 1, 1]], dtype=float))


def test_clip_gradient_is_masked():
    x = Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
    tensor_sum(clip(x, 0.0, 1.0)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_fan_out_accumulates():
    x = Tensor(np.array([1.5, -0.3]), requires_grad=True)
    y = x * x + x * 3.0 + x
    tensor_sum(y).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 4.0)


def test_diamond_graph_visits_shared_node_once():
    x = Tensor(np.array(0.7), requires_grad=True)
    a = tanh(x)
    b = a * a + exp(a)
    b.backward()
    t = math.tanh(0.7)
    assert x.grad == pytest.approx((2 * t + math.exp(t)) * (1 - t * t), rel=1e-12)


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array(1.0), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.backward()
    assert x.grad == 1.0


def test_grl_forward_identity_backward_reversed():
    rng = np.random.default_rng(0)
    xv = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    x = Tensor(xv, requires_grad=True)
    y = grl(x, 0.25)
    np.testing.assert_array_equal(y.data, xv)
    tensor_sum(y * Tensor(w)).backward()
    np.testing.assert_array_equal(x.grad, -0.25 * w)


def test_grl_rejects_negative_coefficient():
    with pytest.raises(ValueError):
        grl(Tensor(np.ones(2)), -1.0)


def test_grl_zero_coefficient_blocks_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    tensor_sum(grl(x, 0.0) * 5.0).backward()
    np.testing.assert_array_equal(x.grad, np.zeros(3) * -1.0)


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)|\(4, 5\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        log(Tensor(np.array([0.0])))
    with pytest.raises(NonFiniteError):
        exp(Tensor(np.array([1000.0])))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_grad_check_on_composite():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    err = grad_check(lambda a, b: tensor_sum(tanh(matmul(a, b)).sigmoid()), [a, b])
    assert err < 1e-7


def test_softmax_rows_sum_to_one_and_are_shift_invariant():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 6)) * 50
    p = softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(softmax(Tensor(x + 123.0), axis=1).data, p, rtol=1e-12, atol=1e-15)


def test_fixed_order_sum_is_sequential():
    vals = np.array([1e16, 1.0, -1e16, 1.0])
    with fixed_reduction_order():
        s = tensor_sum(Tensor(vals)).item()
    acc = 0.0
    for v in vals:
        acc += v
    assert s == acc


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_sigmoid_matches_definition(values):
    x = np.array(values)
    np.testing.assert_allclose(sigmoid(Tensor(x)).data, 1 / (1 + np.exp(-x)), rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_sqdist_matches_loops(n, m, d, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, d)), rng.normal(size=(m, d))
    ref = np.array([[np.sum((a[i] - b[j]) ** 2) for j in range(m)] for i in range(n)])
    np.testing.assert_allclose(sqdist(Tensor(a), Tensor(b)).data, ref, rtol=1e-10, atol=1e-12)
