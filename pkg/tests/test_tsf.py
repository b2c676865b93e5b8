import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbr import autodiff as ad
from dbr.autodiff import Tensor
from dbr.tsf import (
    LSTM,
    CrossStreamGate,
    StructuralEncoder,
    TemporalEncoder,
    correlation,
    tsf_align_loss,
    tsf_decor_loss,
    tsf_loss,
)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_lstm_matches_unrolled_oracle():
    rng = np.random.default_rng(0)
    lstm = LSTM(rng, 3, 2)
    lstm.bias.data[...] = rng.normal(size=8)
    x = rng.normal(size=(1, 4, 3))
    h = np.zeros(2)
    c = np.zeros(2)
    want = []
    for t in range(4):
        pre = x[0, t] @ lstm.w_ih.data + h @ lstm.w_hh.data + lstm.bias.data
        i, f, g, o = _sigmoid(pre[:2]), _sigmoid(pre[2:4]), np.tanh(pre[4:6]), _sigmoid(pre[6:])
        c = f * c + i * g
        h = o * np.tanh(c)
        want.append(h)
    np.testing.assert_allclose(lstm(Tensor(x)).data[0], np.array(want), atol=1e-10)


def test_backward_lstm_is_forward_on_reversed_input():
    rng = np.random.default_rng(1)
    lstm = LSTM(rng, 3, 2)
    x = rng.normal(size=(2, 5, 3))
    back = lstm(Tensor(x), reverse=True).data
    fwd_rev = lstm(Tensor(x[:, ::-1].copy())).data[:, ::-1]
    np.testing.assert_allclose(back, fwd_rev, atol=1e-14)


def test_temporal_encoder_shape():
    enc = TemporalEncoder(np.random.default_rng(0), 6)
    assert enc(Tensor(np.random.default_rng(1).normal(size=(2, 4, 6)))).shape == (2, 4, 6)


def test_single_step_attention_weight_is_one():
    enc = StructuralEncoder(np.random.default_rng(0), 4, n_heads=2)
    _, attn = enc.forward_with_attention(Tensor(np.random.default_rng(1).normal(size=(3, 1, 4))))
    assert np.array_equal(attn, np.ones((3, 2, 1, 1)))


def test_attention_matches_per_head_loop():
    rng = np.random.default_rng(2)
    enc = StructuralEncoder(rng, 4, n_heads=2)
    x = rng.normal(size=(1, 3, 4))
    ctx, attn = enc.attend(Tensor(x))
    q, k, v = x[0] @ enc.w_q.data, x[0] @ enc.w_k.data, x[0] @ enc.w_v.data
    for h in range(2):
        sl = slice(2 * h, 2 * h + 2)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(2)
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(attn.data[0, h], a, rtol=1e-12)
        np.testing.assert_allclose(ctx.data[0, :, sl], a @ v[:, sl], rtol=1e-12)


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        StructuralEncoder(np.random.default_rng(0), 5, n_heads=2)


def test_single_candidate_gate_is_one():
    cgi = CrossStreamGate(np.random.default_rng(0), 2, 3, k=1)
    rng = np.random.default_rng(1)
    z, gates = cgi(Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6))))
    assert np.array_equal(gates.data, np.ones((4, 1)))
    assert z.shape == (4, 6)


def test_identical_candidates_make_gate_irrelevant():
    cgi = CrossStreamGate(np.random.default_rng(0), 2, 3, k=3)
    for cand in cgi.candidates[1:]:
        cand.load_state_dict(cgi.candidates[0].state_dict())
    rng = np.random.default_rng(1)
    zt, zs = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6)))
    z, _ = cgi(zt, zs)
    alone = cgi.candidates[0](ad.concat([zt, zs], axis=-1)).data
    np.testing.assert_allclose(z.data, alone, atol=1e-14)


def test_gate_requires_candidates():
    with pytest.raises(ValueError):
        CrossStreamGate(np.random.default_rng(0), 2, 3, k=0)


def test_pearson_hand_example_is_zero():
    a = Tensor(np.array([1.0, 0.0, -1.0]).reshape(1, 3, 1))
    b = Tensor(np.array([1.0, -2.0, 1.0]).reshape(1, 3, 1))
    assert correlation(a, b).data[0, 0, 0] == 0.0


def test_correlation_matches_numpy_corrcoef():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(1, 7, 2)), rng.normal(size=(1, 7, 2))
    full = np.corrcoef(a[0].T, b[0].T)
    np.testing.assert_allclose(correlation(Tensor(a), Tensor(b)).data[0], full[:2, 2:], rtol=1e-9)


def test_decor_loss_of_identical_decorrelated_streams():
    h = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])[None]
    # columns are orthogonal with unit correlation to themselves: trace of I squared = d
    assert tsf_decor_loss({"A": Tensor(h)}, {"A": Tensor(h)}).item() == pytest.approx(2.0, abs=1e-9)


def test_decor_loss_constant_column_contributes_nothing():
    rng = np.random.default_rng(0)
    temp = rng.normal(size=(1, 5, 2))
    struct = np.zeros((1, 5, 2))
    struct[0, :, 0] = 3.0
    struct[0, :, 1] = temp[0, :, 1]
    got = tsf_decor_loss({"A": Tensor(temp)}, {"A": Tensor(struct)}).item()
    c = np.corrcoef(temp[0, :, 0], temp[0, :, 1])[0, 1]
    assert got == pytest.approx(c**2 + 1.0, abs=1e-9)


def test_align_loss_zero_for_one_modality():
    rng = np.random.default_rng(0)
    h = {"L": Tensor(rng.normal(size=(2, 3, 4)))}
    g = {"L": Tensor(rng.normal(size=(2, 3, 4)))}
    assert tsf_align_loss(h, g).item() == 0.0


def test_align_loss_hand_value():
    ones = np.ones((1, 2, 2))
    h = {"L": Tensor(ones), "A": Tensor(-ones)}
    g = {"L": Tensor(ones), "A": Tensor(ones)}
    # temporal means (1,1) and (-1,-1), centred at 0: each squared norm 2
    assert tsf_align_loss(h, g).item() == pytest.approx(2.0, abs=1e-12)


def test_tsf_loss_weights():
    assert tsf_loss(2.0, 3.0, 0.5, 0.1) == pytest.approx(1.3)
    with pytest.raises(ValueError):
        tsf_loss(1.0, 1.0, -0.1, 0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_correlation_entries_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))
    corr = correlation(Tensor(a), Tensor(b)).data
    assert np.all(np.abs(corr) <= 1.0 + 1e-9)
