"""Tape engine tests. Analytic gradients are checked against closed forms
computed with math/numpy directly (not through the tape), plus central
differences via grad_check."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from surfelflow.errors import DomainError, ShapeError, ValidationError
from surfelflow.optim import AdamState, adam_step
from surfelflow import tensor as T
from surfelflow.tensor import Tape, Tensor, grad_check


def test_add_forward_and_grad():
    with Tape() as tape:
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = Tensor([3.0, 4.0], requires_grad=True)
        y = T.sum(a + b)
    out = (a + b).data
    assert_allclose(out, [4.0, 6.0])
    grads = tape.backward(y)
    assert_allclose(grads[a.node_id], [1.0, 1.0])
    assert_allclose(grads[b.node_id], [1.0, 1.0])


def test_mean_grad_is_uniform():
    with Tape() as tape:
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        y = T.mean(a)
    grads = tape.backward(y)
    assert_allclose(grads[a.node_id], np.full((2, 3), 1.0 / 6.0))


def test_sigmoid_at_zero():
    with Tape() as tape:
        x = Tensor(0.0, requires_grad=True)
        y = T.sigmoid(x)
    assert_allclose(y.data, 0.5)
    grads = tape.backward(y)
    assert_allclose(grads[x.node_id], 0.25)


def test_chain_rule_against_closed_form():
    # d/dx tanh(x^2 + 1) = 2x (1 - tanh(x^2+1)^2)
    x0 = 0.5
    with Tape() as tape:
        x = Tensor(x0, requires_grad=True)
        y = T.tanh(x * x + Tensor(1.0))
    grads = tape.backward(y)
    expected = 2 * x0 * (1 - math.tanh(x0 * x0 + 1) ** 2)
    assert_allclose(grads[x.node_id], expected, rtol=1e-12)


def test_fanout_accumulates():
    # y = x*x + 3x uses x twice; dy/dx = 2x + 3
    with Tape() as tape:
        x = Tensor(2.0, requires_grad=True)
        y = x * x + Tensor(3.0) * x
    grads = tape.backward(y)
    assert_allclose(grads[x.node_id], 7.0)


def test_leading_broadcast_add():
    with Tape() as tape:
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor([10.0, 20.0, 30.0], requires_grad=True)
        y = T.sum(a + b)
    grads = tape.backward(y)
    assert_allclose(grads[a.node_id], np.ones((2, 3)))
    # gradient for the broadcast operand sums over the expanded leading dim
    assert_allclose(grads[b.node_id], [2.0, 2.0, 2.0])


def test_scalar_broadcasts_everywhere():
    with Tape() as tape:
        a = Tensor(np.ones((2, 2, 2)), requires_grad=True)
        s = Tensor(2.0, requires_grad=True)
        y = T.sum(a * s)
    grads = tape.backward(y)
    assert_allclose(grads[s.node_id], 8.0)


def test_mismatched_shapes_raise_with_both_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((2,)))
    with pytest.raises(ShapeError) as exc:
        _ = a + b
    msg = str(exc.value)
    assert "(2, 3)" in msg and "(2,)" in msg


def test_matmul_grads_match_closed_form():
    rng = np.random.default_rng(0)
    a0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal((4, 2))
    g = rng.standard_normal((3, 2))
    with Tape() as tape:
        a = Tensor(a0, requires_grad=True)
        b = Tensor(b0, requires_grad=True)
        y = T.sum(T.matmul(a, b) * Tensor(g))
    grads = tape.backward(y)
    assert_allclose(grads[a.node_id], g @ b0.T, rtol=1e-12)
    assert_allclose(grads[b.node_id], a0.T @ g, rtol=1e-12)


def test_batched_matmul_with_shared_rhs():
    rng = np.random.default_rng(1)
    a0 = rng.standard_normal((5, 3, 4))
    w0 = rng.standard_normal((4, 2))
    with Tape() as tape:
        a = Tensor(a0, requires_grad=True)
        w = Tensor(w0, requires_grad=True)
        y = T.sum(T.matmul(a, w))
    assert T.matmul(a, w).data.shape == (5, 3, 2)
    grads = tape.backward(y)
    g = np.ones((5, 3, 2))
    assert_allclose(grads[a.node_id], g @ w0.T, rtol=1e-12)
    # shared weight gradient sums over the batch
    assert_allclose(grads[w.node_id], np.einsum("bik,bij->kj", a0, g), rtol=1e-12)


def test_exp_is_range_guarded():
    with Tape() as tape:
        x = Tensor([0.0, 100.0, -100.0], requires_grad=True)
        y = T.sum(T.exp(x))
    out = T.exp(Tensor([100.0])).data
    assert np.isfinite(out).all()
    assert_allclose(out, math.exp(60.0))
    grads = tape.backward(y)
    # identity-gradient inside the clamp range, zero outside
    assert_allclose(grads[x.node_id], [1.0, 0.0, 0.0])


def test_log_sqrt_domain_errors():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.sqrt(Tensor([-1.0]))


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 7))
    y = T.softmax(Tensor(x)).data
    assert_allclose(y.sum(axis=-1), np.ones(4), atol=1e-12)
    y2 = T.softmax(Tensor(x + 1000.0)).data
    assert_allclose(y, y2, atol=1e-12)


def test_layer_norm_moments():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 16)) * 3 + 2
    y = T.layer_norm(Tensor(x)).data
    assert_allclose(y.mean(axis=-1), np.zeros(5), atol=1e-10)
    assert_allclose(y.var(axis=-1), np.ones(5), atol=1e-4)


OPS_FOR_GRADCHECK = [
    ("exp", lambda x: T.sum(T.exp(x)), (3, 4)),
    ("tanh", lambda x: T.sum(T.tanh(x)), (3, 4)),
    ("sigmoid", lambda x: T.sum(T.sigmoid(x)), (3, 4)),
    ("mul_self", lambda x: T.sum(x * x), (3, 4)),
    ("div", lambda x: T.sum(x / Tensor(np.arange(1.0, 5.0))), (3, 4)),
    ("mean_axis0", lambda x: T.sum(T.mean(x, axis=0)), (3, 4)),
    ("sum_axis1", lambda x: T.sum(T.sum(x, axis=1) * T.sum(x, axis=1)), (3, 4)),
    ("transpose", lambda x: T.sum(T.transpose(x, (1, 0)) * Tensor(np.arange(12.0).reshape(4, 3))), (3, 4)),
    ("reshape", lambda x: T.sum(T.reshape(x, (12,)) * Tensor(np.arange(12.0))), (3, 4)),
    ("softmax", lambda x: T.sum(T.softmax(x) * Tensor(np.arange(12.0).reshape(3, 4))), (3, 4)),
    ("layer_norm", lambda x: T.sum(T.layer_norm(x) * Tensor(np.arange(12.0).reshape(3, 4))), (3, 4)),
    ("l2_normalize", lambda x: T.sum(T.l2_normalize(x) * Tensor(np.arange(12.0).reshape(3, 4))), (3, 4)),
    ("narrow", lambda x: T.sum(T.narrow(x, 1, 1, 2) * T.narrow(x, 1, 0, 2)), (3, 4)),
    ("concat", lambda x: T.sum(T.concat([x, x * x], axis=1) * Tensor(np.arange(24.0).reshape(3, 8))), (3, 4)),
    ("matmul", lambda x: T.sum(T.matmul(x, T.transpose(x, (1, 0)))), (3, 4)),
    ("log_shifted", lambda x: T.sum(T.log(T.sigmoid(x) + Tensor(0.5))), (3, 4)),
    ("sqrt_shifted", lambda x: T.sum(T.sqrt(x * x + Tensor(1.0))), (3, 4)),
]


@pytest.mark.parametrize("name,fn,shape", OPS_FOR_GRADCHECK, ids=[o[0] for o in OPS_FOR_GRADCHECK])
def test_gradcheck_per_op(name, fn, shape):
    rng = np.random.default_rng(hash(name) % 2**31)
    for seed in range(3):
        x = Tensor(np.random.default_rng(seed).standard_normal(shape) * 0.8)
        err = grad_check(fn, x, eps=1e-5)
        assert err < 1e-4, f"{name}: rel error {err:.3e}"


def test_gradcheck_eps_validated():
    f = lambda x: T.sum(x * x)
    with pytest.raises(ValidationError):
        grad_check(f, Tensor([1.0]), eps=1e-8)
    with pytest.raises(ValidationError):
        grad_check(f, Tensor([1.0]), eps=1e-2)


def test_gradcheck_quadratic_is_exact():
    # central differences are exact for quadratics, so rel err ~ rounding only
    err = grad_check(lambda x: T.sum(x * x), Tensor([3.0, -1.0]), eps=1e-4)
    assert err < 1e-10


def test_backward_requires_scalar_on_tape():
    with Tape() as tape:
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x * x
    with pytest.raises(ValidationError):
        tape.backward(y)


def test_ops_finite_on_finite_inputs():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.standard_normal((4, 4)) * 50
        outs = [
            T.exp(Tensor(x)).data,
            T.tanh(Tensor(x)).data,
            T.sigmoid(Tensor(x)).data,
            T.softmax(Tensor(x)).data,
            T.layer_norm(Tensor(x)).data,
            T.l2_normalize(Tensor(x)).data,
        ]
        for o in outs:
            assert np.isfinite(o).all()


def test_no_grads_recorded_without_tape():
    x = Tensor([1.0], requires_grad=True)
    y = x * x
    assert y.node_id is None


def test_adam_zero_grad_noop():
    params = {"w": np.array([1.0, 2.0]), "b": np.array([0.5])}
    grads = {"w": np.zeros(2), "b": np.zeros(1)}
    state = AdamState.init(params)
    new_params, new_state = adam_step(params, grads, state, lr=1e-2)
    assert_allclose(new_params["w"], params["w"])
    assert_allclose(new_params["b"], params["b"])
    assert new_state.step == state.step + 1


def test_adam_zero_betas_is_signed_step():
    # with beta1 = beta2 = 0 the update is lr * g / (|g| + eps)
    params = {"w": np.array([1.0, -1.0])}
    grads = {"w": np.array([10.0, -0.1])}
    state = AdamState.init(params)
    new_params, _ = adam_step(params, grads, state, lr=1e-3, beta1=0.0, beta2=0.0)
    expected = params["w"] - 1e-3 * grads["w"] / (np.abs(grads["w"]) + 1e-8)
    assert_allclose(new_params["w"], expected, rtol=1e-12)


def test_adam_decreases_quadratic():
    params = {"w": np.array([5.0, -3.0])}
    state = AdamState.init(params)
    for _ in range(500):
        g = {"w": 2 * params["w"]}
        params, state = adam_step(params, g, state, lr=5e-2)
    assert np.abs(params["w"]).max() < 1e-2
