import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dbr import autodiff as ad
from dbr.autodiff import NonFiniteError, ShapeError, Tensor, UnknownPrimitiveError, backward
from dbr.gradcheck import finite_diff_check, relative_error
from dbr.gradsuite import check_primitives
from dbr.optim import AdamState, adam_step


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(a)).data, a)


def test_softmax_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([1.0, 1.0, 1.0, 1.0])).data, [0.25] * 4)


def test_layer_norm_constant_row_is_zero():
    assert np.array_equal(ad.layer_norm(Tensor([[2.5, 2.5, 2.5, 2.5]])).data, np.zeros((1, 4)))


def test_layer_norm_matches_direct_formula():
    x = np.random.default_rng(1).normal(size=(3, 5))
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    np.testing.assert_allclose(ad.layer_norm(Tensor(x)).data, (x - mu) / np.sqrt(var + 1e-5), rtol=1e-12)


def test_masked_softmax_zeroes_masked_entries():
    mask = np.array([[True, False, True]])
    out = ad.softmax(Tensor([[0.3, 5.0, -0.2]]), mask=mask).data
    assert out[0, 1] == 0.0
    assert out.sum() == pytest.approx(1.0, abs=1e-15)


def test_conv1d_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 4, 3))
    w = rng.normal(size=(3, 3, 2))
    dil = 2
    got = ad.conv1d(Tensor(x), Tensor(w), dilation=dil).data
    want = np.zeros((1, 4, 2))
    k = w.shape[0]
    for t in range(4):
        for j in range(k):
            src = t - (k - 1 - j) * dil  # causal: last tap sits on t
            if src >= 0:
                want[0, t] += x[0, src] @ w[j]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-14)


def test_dot_product_gradients():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    y = Tensor([4.0, -1.0, 0.5], requires_grad=True)
    grads = backward((x * y).sum())
    np.testing.assert_array_equal(grads[x], y.data)
    np.testing.assert_array_equal(grads[y], x.data)


def test_sum_gradient_is_ones():
    x = Tensor(np.zeros((2, 3)), requires_grad=True)
    assert np.array_equal(backward(x.sum())[x], np.ones((2, 3)))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_unreached_leaf_gets_zero_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    loss = (x * x).sum() + (y * 0.0).sum()
    assert np.array_equal(backward(loss)[y], np.zeros(2))


def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_unknown_primitive():
    with pytest.raises(UnknownPrimitiveError):
        ad.apply_primitive("no-such-op", [Tensor(1.0)])


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 3.0
    assert y.node is None and not y.requires_grad


def test_numpy_left_operand_defers_to_tensor():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = np.array([3.0, 4.0]) * x
    assert isinstance(y, Tensor)
    assert np.array_equal(backward(y.sum())[x], [3.0, 4.0])


def test_concat_then_slice_round_trip_gradient():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    picked = ad.slice_axis(ad.concat([a, b], axis=1), 1, 0, 3)
    grads = backward(picked.sum())
    assert np.array_equal(grads[a], np.ones((2, 3)))
    assert np.array_equal(grads[b], np.zeros((2, 2)))


def test_tape_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(2, 4)))
        loss = ad.tanh(x @ w).sum()
        return loss.item(), backward(loss)[w]

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and np.array_equal(g1, g2)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-30, 30)))
def test_softmax_is_a_distribution(x):
    out = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# finite differences


def test_quadratic_is_exact_under_central_differences():
    x = Tensor([3.0])
    assert finite_diff_check(lambda: (x * x).sum(), [x]) < 1e-9


def test_tanh_oracle():
    x = Tensor([0.5])
    assert finite_diff_check(lambda: ad.tanh(x).sum(), [x]) < 1e-8


def test_softmax_pick_component_oracle():
    x = Tensor([0.2, -0.4, 1.1])
    pick = np.array([0.0, 1.0, 0.0])
    assert finite_diff_check(lambda: (ad.softmax(x) * pick).sum(), [x]) < 1e-6


def test_relative_error_denominator():
    assert relative_error(np.array([0.0]), np.array([1e-6]))[0] == pytest.approx(1e-6)
    assert relative_error(np.array([100.0]), np.array([101.0]))[0] == pytest.approx(1 / 101)


def test_finite_diff_rejects_bad_eps():
    x = Tensor([1.0])
    with pytest.raises(ValueError):
        finite_diff_check(lambda: x.sum(), [x], eps=0.0)


def test_every_primitive_passes_gradient_check():
    results = check_primitives(seed=3)
    assert {r.name for r in results} == set(ad.PRIMITIVES)
    for r in results:
        assert r.error < 1e-4, r


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_elementwise_chain_gradients_random_inputs(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1, 1, size=(3, 4)))
    w = Tensor(rng.uniform(-1, 1, size=(4, 2)))

    def f():
        h = ad.sigmoid(x @ w) * ad.exp(ad.scale(x.sum(axis=1, keepdims=True), 0.3))
        return ad.log_softmax(h, axis=-1).mean()

    assert finite_diff_check(f, [x, w]) < 1e-4


# ---------------------------------------------------------------------------
# Adam


def test_first_adam_step_closed_form():
    p = Tensor(np.zeros(3), requires_grad=True)
    adam_step([p], [np.ones(3)], AdamState(), lr=1e-3)
    # after bias correction m_hat = 1 and v_hat = 1, so the step is lr / (1 + eps)
    np.testing.assert_allclose(p.data, -1e-3 / (1.0 + 1e-8), rtol=1e-15)


def test_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    adam_step([p], [np.zeros(2)], AdamState(), lr=1e-2)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_coupled_weight_decay_matches_oracle():
    start = np.array([0.5, -1.5, 2.0])
    p = Tensor(start.copy(), requires_grad=True)
    q = Tensor(start.copy(), requires_grad=True)
    adam_step([p], [np.zeros(3)], AdamState(), lr=1e-3, weight_decay=1e-4)
    adam_step([q], [1e-4 * start], AdamState(), lr=1e-3)
    assert np.array_equal(p.data, q.data)


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(2)], AdamState())


def test_adam_step_counter():
    p = Tensor(np.zeros(2), requires_grad=True)
    state = AdamState()
    for _ in range(3):
        adam_step([p], [np.ones(2)], state)
    assert state.t == 3
    assert math.isclose(float(p.data[0]), -3e-3, rel_tol=1e-6)
