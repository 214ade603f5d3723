from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskbench import tensor as T
from maskbench.tensor import BLOCKED, Tape, Tensor


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    assert np.array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand_product():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert np.array_equal(out.data, [[17], [39]])


def test_matmul_zero_annihilates(rng):
    out = T.matmul(Tensor(np.zeros((2, 2))), Tensor(rng.normal(size=(2, 5))))
    assert np.array_equal(out.data, np.zeros((2, 5)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.TensorError) as e:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)


def test_matmul_backward_formulas(rng):
    A, B = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    G = rng.normal(size=(3, 2))
    with Tape():
        loss = T.sum_(T.mul(T.matmul(A, B), G))
        T.backward(loss)
    assert np.allclose(A.grad, G @ B.data.T, rtol=0, atol=1e-14)
    assert np.allclose(B.grad, A.data.T @ G, rtol=0, atol=1e-14)


# --------------------------------------------------------------- softmax


def test_masked_softmax_uniform():
    p = T.masked_softmax(Tensor(np.zeros((3, 3))), np.zeros((3, 3))).data
    assert np.allclose(p, 1 / 3, atol=1e-15)


def test_masked_softmax_closed_form():
    p = T.masked_softmax(Tensor([[0.0, math.log(2.0)]]), np.zeros((1, 2))).data
    assert np.allclose(p, [[1 / 3, 2 / 3]], atol=1e-15)


def test_masked_softmax_blocked_entry_is_exact_zero():
    p = T.masked_softmax(Tensor([[9.0, 9.0]]), np.array([[0.0, BLOCKED]])).data
    assert p[0, 0] == 1.0 and p[0, 1] == 0.0


def test_masked_softmax_fully_blocked_row_errors():
    with pytest.raises(T.DegenerateError):
        T.masked_softmax(Tensor(np.zeros((2, 2))), np.array([[0.0, BLOCKED], [BLOCKED, BLOCKED]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**31 - 1))
def test_masked_softmax_rows_sum_to_one(L, seed):
    r = np.random.default_rng(seed)
    bias = np.where(r.random((L, L)) < 0.4, BLOCKED, -r.random((L, L)) * 3)
    bias[np.arange(L), np.arange(L)] = 0.0
    p = T.masked_softmax(Tensor(r.normal(size=(L, L)) * 5), bias).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(p[bias == BLOCKED] == 0.0)


# ------------------------------------------------------------ layer norm


def _ln(row, gain, bias, eps=1e-5):
    x = Tensor(np.atleast_2d(row))
    return T.layer_norm(x, Tensor(np.asarray(gain, float)), Tensor(np.asarray(bias, float)), eps).data[0]


def test_layer_norm_constant_row():
    assert np.array_equal(_ln([5.0, 5.0, 5.0], np.ones(3), np.zeros(3)), np.zeros(3))


def test_layer_norm_already_standard():
    assert np.allclose(_ln([1.0, -1.0], np.ones(2), np.zeros(2), eps=1e-12), [1, -1], atol=1e-10)


def test_layer_norm_affine():
    assert np.allclose(_ln([0.0, 2.0], [2.0, 2.0], [1.0, 1.0], eps=1e-12), [-1, 3], atol=1e-10)


# --------------------------------------------------------------- backward


def test_backward_sum_is_ones():
    x = leaf([1.0, 2.0, 3.0])
    with Tape():
        T.backward(T.sum_(x))
    assert np.array_equal(x.grad, [1, 1, 1])


def test_backward_quadratic():
    x = leaf([3.0])
    with Tape():
        T.backward(T.sum_(T.mul(x, x)) * 0.5)
    assert np.array_equal(x.grad, [3.0])


def test_backward_two_logit_cross_entropy_matches_fd():
    z = leaf([0.3, -1.2])

    def f():
        lse = T.masked_logsumexp(z, np.ones(2, dtype=bool))
        return lse - z[0]

    assert T.finite_diff_check(f, z, h=1e-6) <= 1e-6


def test_second_backward_on_consumed_tape_errors():
    x = leaf([1.0, 2.0])
    with Tape():
        loss = T.sum_(T.mul(x, x))
        T.backward(loss)
        with pytest.raises(T.TapeError):
            T.backward(loss)


def test_tape_reset_allows_new_pass():
    x = leaf([2.0])
    with Tape() as tape:
        T.backward(T.sum_(T.mul(x, x)))
        tape.reset()
        x.grad = None
        T.backward(T.sum_(T.mul(x, x)))
    assert np.array_equal(x.grad, [4.0])


def test_node_id_present_only_on_tape():
    x = leaf([1.0])
    with Tape():
        y = T.mul(x, x)
        assert y.node_id is not None
        T.backward(T.sum_(y))
    assert y.node_id is None


def test_intermediate_gradients_dropped_unless_retained():
    x = leaf([1.0, 2.0])
    with Tape():
        h = T.mul(x, 3.0).retain_grad()
        other = T.mul(x, 2.0)
        T.backward(T.sum_(T.mul(h, other)))
    assert h.grad is not None and other.grad is None
    assert np.allclose(h.grad, 2.0 * x.data)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with Tape() as tape, T.no_grad():
        y = T.mul(x, x)
    assert len(tape) == 0 and not y.requires_grad


def test_backward_deterministic(rng):
    W = rng.normal(size=(5, 4))
    grads = []
    for _ in range(2):
        w = leaf(W.copy())
        with Tape():
            T.backward(T.sum_(T.gelu(T.matmul(w, Tensor(np.ones((4, 3)))))))
        grads.append(w.grad)
    assert np.array_equal(grads[0], grads[1])


# ------------------------------------------------------- hidden grad norms


def test_hidden_grad_norms_examples():
    h = leaf(np.zeros((2, 2)))
    h.grad = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert np.array_equal(T.hidden_grad_norms(h), [0.0, 5.0])


def test_hidden_grad_norms_equal_hand_loop(rng):
    h = leaf(np.zeros((4, 8)))
    h.grad = rng.normal(size=(4, 8))
    out = T.hidden_grad_norms(h)
    for j in range(4):
        acc = 0.0
        for k in range(8):
            acc += h.grad[j, k] * h.grad[j, k]
        assert out[j] == math.sqrt(acc)


def test_hidden_grad_norms_requires_retained_grad():
    with pytest.raises(T.TapeError):
        T.hidden_grad_norms(leaf(np.zeros((2, 2))))


# ------------------------------------------------------ finite differences


def test_fd_sum_of_squares(rng):
    p = leaf(rng.normal(size=(3, 4)))
    assert T.finite_diff_check(lambda: T.sum_(T.mul(p, p)), p, h=1e-5) <= 1e-8


def test_fd_constant_function():
    p = leaf([1.0, 2.0])
    assert T.finite_diff_check(lambda: Tensor(3.0), p, h=1e-5) == 0.0


def test_fd_rejects_bad_step():
    p = leaf([1.0])
    with pytest.raises(ValueError):
        T.finite_diff_check(lambda: T.sum_(p), p, h=1e-2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_non_finite_is_numeric_error():
    p = leaf([-1.0])
    with pytest.raises(T.NumericError):
        T.finite_diff_check(lambda: T.sum_(T.log(p)), p, h=1e-6)


# Every differentiable op against central differences, on random small shapes.

def _ops(r, shape):
    d = shape[-1]
    c = Tensor(r.normal(size=shape))
    gain, shift = Tensor(r.normal(size=d)), Tensor(r.normal(size=d))
    W, b = Tensor(r.normal(size=(d, 3))), Tensor(r.normal(size=3))
    keep = (r.random(shape) < 0.7) | (np.arange(d) == 0)
    return {
        "add": lambda x: T.add(x, c),
        "mul": lambda x: T.mul(x, x),
        "exp": lambda x: T.exp(T.mul(x, 0.3)),
        "log": lambda x: T.log(T.add(T.mul(x, x), 1.0)),
        "sigmoid": T.sigmoid,
        "log_sigmoid": T.log_sigmoid,
        "gelu": T.gelu,
        "mean": lambda x: T.mean(x, axis=-1),
        "transpose": lambda x: T.transpose(T.reshape(x, (-1, d))),
        "layer_norm": lambda x: T.layer_norm(x, gain, shift),
        "l2_normalize": T.l2_normalize,
        "linear": lambda x: T.linear(x, W, b),
        "softmax": lambda x: T.masked_softmax(x, np.zeros(shape)),
        "logsumexp": lambda x: T.masked_logsumexp(x, keep),
        "concat": lambda x: T.concat([x, T.mul(x, 2.0)], axis=-1),
        "stack": lambda x: T.stack([x, T.exp(T.mul(x, 0.1))], axis=0),
        "take": lambda x: T.take(T.reshape(x, (-1,)), np.array([0, 0, d - 1])),
    }


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_every_op_matches_central_differences(rows, d, seed):
    r = np.random.default_rng(seed)
    shape = (rows, d)
    for name, op in _ops(r, shape).items():
        x = leaf(r.normal(size=shape))
        proj = r.normal(size=op(Tensor(x.data)).shape)

        def f():
            return T.sum_(T.mul(op(x), proj))

        err = T.finite_diff_check(f, x, h=1e-6)
        assert err <= 1e-5, name


def test_embedding_gradient_accumulates_repeats(rng):
    table = leaf(rng.normal(size=(5, 3)))
    ids = np.array([[1, 1, 4], [0, 1, 4]])
    G = rng.normal(size=(2, 3, 3))
    with Tape():
        T.backward(T.sum_(T.mul(T.embedding(table, ids), G)))
    expect = np.zeros((5, 3))
    for b in range(2):
        for i in range(3):
            expect[ids[b, i]] += G[b, i]
    assert np.allclose(table.grad, expect, atol=1e-14)


def test_softmax_bias_tensor_gradient(rng):
    logits = leaf(rng.normal(size=(3, 3)))
    bias = leaf(-rng.random((3, 3)))
    proj = rng.normal(size=(3, 3))
    err = T.finite_diff_check(lambda: T.sum_(T.mul(T.masked_softmax(logits, bias), proj)), [logits, bias], h=1e-6)
    assert err <= 1e-6
