import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from pvcast.tensor import (
    NotOnTapeError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat,
    einsum,
    elementwise,
    grad_check,
    matmul,
    no_grad,
    softmax,
    softmax_rows,
    stack,
)

finite = st.floats(-2, 2, allow_nan=False, allow_infinity=False)


def test_leaf_rejects_nonfinite_and_empty():
    with pytest.raises(ValueError):
        Tensor([1.0, math.nan])
    with pytest.raises(ValueError):
        Tensor([math.inf])
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_matmul_examples():
    B = [[3.0, 4.0], [5.0, 6.0]]
    assert np.array_equal(matmul(np.eye(2), B).data, B)
    out = matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_identity_exact_and_associative(rng):
    A = rng.normal(size=(4, 4))
    assert np.array_equal(matmul(A, np.eye(4)).data, A)
    B, C = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    left = matmul(matmul(A, B), C).data
    right = matmul(A, matmul(B, C)).data
    assert np.max(np.abs(left - right)) < 1e-10


def test_matmul_backward_rule(rng):
    A = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    B = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    G = rng.normal(size=(3, 2))
    g = backward((matmul(A, B) * G).sum())
    np.testing.assert_allclose(g[A], G @ B.data.T, rtol=1e-14)
    np.testing.assert_allclose(g[B], A.data.T @ G, rtol=1e-14)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows([[2.0, 2.0, 2.0]]).data, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(softmax_rows([[0.0, math.log(2.0)]]).data, [[1 / 3, 2 / 3]], atol=1e-15)
    big = softmax_rows([[1000.0, 1001.0]]).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, softmax_rows([[0.0, 1.0]]).data, atol=1e-15)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_rows_stochastic_and_shift_invariant(x, c):
    s = softmax_rows(x).data
    assert np.all(s >= 0)
    assert np.max(np.abs(s.sum(axis=1) - 1.0)) < 1e-12
    assert np.max(np.abs(softmax_rows(x + c).data - s)) < 1e-12


def test_elementwise_examples():
    assert elementwise("sigmoid", [0.0]).data[0] == 0.5
    assert elementwise("tanh", [0.0]).data[0] == 0.0
    assert np.array_equal(elementwise("mul", [1.0, 2.0], [3.0, 4.0]).data, [3.0, 8.0])
    assert np.array_equal(elementwise("scale", [1.0, -2.0], factor=3.0).data, [3.0, -6.0])


def test_broadcast_rules():
    x = Tensor(np.ones((3, 4)))
    assert (x + 2.0).shape == (3, 4)
    assert (x + np.ones(4)).shape == (3, 4)
    with pytest.raises(ShapeError):
        x + np.ones(3)
    with pytest.raises(ShapeError):
        elementwise("add", np.ones((2, 2)), np.ones((3, 3)))


def test_backward_examples():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    assert np.array_equal(backward((x * x).sum())[x], [2.0, 4.0, 6.0])
    z = Tensor([0.0], requires_grad=True)
    assert backward(z.sigmoid().sum())[z][0] == 0.25


def test_backward_sum_of_product_matches_finite_differences(rng):
    B = rng.normal(size=(3, 3))
    rep = grad_check(lambda A: (A * B).sum(), rng.normal(size=(3, 3)))
    assert rep.max_relative_error < 1e-6


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)
    y = Tensor([3.0], requires_grad=True)
    g = backward((x * x).sum())
    with pytest.raises(NotOnTapeError):
        g[y]


def test_backward_deterministic(rng):
    W = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    x = rng.normal(size=(2, 4))
    loss = lambda: ((matmul(x, W).tanh() @ W).sigmoid()).sum()
    assert np.array_equal(backward(loss())[W], backward(loss())[W])


def test_tape_is_topological_and_visits_once(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    y = x * x
    loss = (y + y.exp() + x).sum()
    tape = Tape(loss)
    assert len({id(n) for n in tape.nodes}) == len(tape.nodes)
    for entry in tape.entries:
        assert all(i < entry.output for i in entry.inputs)
    assert tape.nodes[-1] is loss and x in tape


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert len(backward(y.sum())) == 0


def test_grad_check_examples(rng):
    assert grad_check(lambda x: (x * x).sum(), rng.normal(size=5)).max_relative_error < 1e-8
    rep = grad_check(lambda x: Tensor(3.0), rng.normal(size=4))
    assert rep.max_relative_error == 0.0
    assert rep.analytic == 0.0 and rep.numeric == 0.0
    with pytest.raises(ValueError):
        grad_check(lambda x: x.sum(), [1.0], step=0.0)
    with pytest.raises(ValueError):
        grad_check(lambda x: x.sum(), [1.0], step=0.1)
    with pytest.raises(ShapeError):
        grad_check(lambda x: x * 2.0, [1.0, 2.0])


UNARY = {
    "exp": lambda t: t.exp(),
    "log": lambda t: (t * t + 1.0).log(),
    "tanh": lambda t: t.tanh(),
    "sigmoid": lambda t: t.sigmoid(),
    "relu": lambda t: t.relu(),
    "silu": lambda t: t.silu(),
    "gelu": lambda t: t.gelu(),
    "square": lambda t: t**2,
    "cube": lambda t: t**3,
    "neg": lambda t: -t,
    "div": lambda t: 1.0 / (t * t + 0.5),
    "mean": lambda t: t.mean(axis=0),
    "transpose": lambda t: t.transpose(1, 0),
    "reshape": lambda t: t.reshape(6),
    "index": lambda t: t[1:, ::2],
    "fancy": lambda t: t[[0, 0, 1]],
    "softmax": lambda t: softmax(t, axis=-1),
    "concat": lambda t: concat([t, t * 2.0], axis=0),
    "stack": lambda t: stack([t, t.tanh()], axis=1),
    "einsum": lambda t: einsum("ij,kj->ik", t, t),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_op_gradients(name, rng):
    x = rng.uniform(-2, 2, size=(2, 3))
    if name == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    w = rng.normal(size=np.shape(UNARY[name](Tensor(x)).data))
    rep = grad_check(lambda t: (UNARY[name](t) * w).sum(), x)
    assert rep.max_relative_error < 1e-6, rep


@given(hnp.arrays(np.float64, (2, 3), elements=finite), hnp.arrays(np.float64, (2, 3), elements=finite))
def test_binary_gradients_property(a, b):
    B = Tensor(b)
    for f in (lambda t: t + B, lambda t: t - B, lambda t: t * B, lambda t: t / (B * B + 1.0)):
        assert grad_check(lambda t: (f(t) ** 2).sum(), a).max_relative_error < 1e-6


def test_batched_matmul_gradient(rng):
    W = rng.normal(size=(4, 3))
    rep = grad_check(lambda t: (matmul(t, W) ** 2).sum(), rng.uniform(-2, 2, size=(2, 5, 4)))
    assert rep.max_relative_error < 1e-6
    x = rng.normal(size=(2, 5, 4))
    rep = grad_check(lambda w: (matmul(x, w).tanh()).sum(), W)
    assert rep.max_relative_error < 1e-6
