import numpy as np
import pytest
import torch

from linvid.kernels import DecayParams, KernelInputError, ShiftMixParams, WkvState
from linvid.model import RWKVBlock, wkv
from linvid.rwkv import BlockParams, RecurrentDecoder, layer_norm, rwkv_block_forward, sigmoid

from .oracles import naive_wkv, rel_err


def _zero_proj(d):
    p = BlockParams.random(d, 0, data_dependent=False)
    z = np.zeros((d, d))
    return BlockParams(p.ln1, p.ln2, p.shift, z, z, z, z, p.decay, p.mu_c, np.zeros((d, 2 * d)), np.zeros((2 * d, d)))


def test_zero_projections_are_identity():
    p = _zero_proj(6)
    x = np.random.default_rng(1).standard_normal((9, 6))
    y, _ = rwkv_block_forward(x, WkvState.zeros(6), p)
    np.testing.assert_array_equal(y, x)


def test_single_token_hand_fold():
    d = 2
    rng = np.random.default_rng(3)
    p = BlockParams.random(d, rng, d_ff=3, data_dependent=False)
    x = rng.standard_normal(d)
    h = layer_norm(x, *p.ln1)
    # zero previous input: lerp gives (1 - mu) * h
    xs = {n: (1 - p.shift.mu[n]) * h for n in "rkv"}
    r, k, v = xs["r"] @ p.W_r, xs["k"] @ p.W_k, xs["v"] @ p.W_v
    y1 = x + (sigmoid(r) * v) @ p.W_o  # empty state: wkv_1 = v_1
    h2 = layer_norm(y1, *p.ln2)
    expect = y1 + np.maximum(((1 - p.mu_c) * h2) @ p.W_1, 0) ** 2 @ p.W_2
    got, st = rwkv_block_forward(x[None], WkvState.zeros(d), p)
    np.testing.assert_allclose(got[0], expect, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(st.shift_tm, h)


def test_mu_one_uses_previous_token():
    d = 4
    rng = np.random.default_rng(0)
    p = BlockParams.random(d, rng, data_dependent=False)
    p.shift = ShiftMixParams({n: np.ones(d) for n in "rkv"})
    p.W_1, p.W_2 = np.zeros_like(p.W_1), np.zeros_like(p.W_2)
    x = rng.standard_normal((2, d))
    y, _ = rwkv_block_forward(x, WkvState.zeros(d), p)
    # token 0 sees a zero previous input: r = k = v = 0, so wkv = 0
    np.testing.assert_array_equal(y[0], x[0])
    h0 = layer_norm(x[0], *p.ln1)
    r, k, v = h0 @ p.W_r, h0 @ p.W_k, h0 @ p.W_v
    e = np.exp(p.decay.u + k)
    wkv2 = (e * v + 0.0) / (e + 1.0)  # alpha_1 = e^0 * 0, beta_1 = e^0
    np.testing.assert_allclose(y[1], x[1] + (sigmoid(r) * wkv2) @ p.W_o, rtol=1e-12)


def test_split_prefill_matches_whole():
    dec = RecurrentDecoder(8, 2, seed=4)
    x = np.random.default_rng(5).standard_normal((20, 8))
    last = dec.prefill(x)
    s1 = [s.copy() for s in dec.states]
    dec.reset()
    dec.prefill(x[:7])
    dec.prefill(x[7:15])
    for t in range(15, 20):
        y = dec.step(x[t])
    np.testing.assert_allclose(y, last, rtol=1e-10, atol=1e-12)
    for a, b in zip(s1, dec.states):
        np.testing.assert_allclose(a.a * np.exp(a.p), b.a * np.exp(b.p), rtol=1e-10, atol=1e-300)


def test_state_bytes_constant_in_length():
    dec = RecurrentDecoder(16, 3, seed=0)
    b0 = dec.state_bytes()
    dec.prefill(np.random.default_rng(0).standard_normal((500, 16)))
    assert dec.state_bytes() == b0 == 5 * 16 * 3 * 8


def test_width_mismatch_rejected():
    p = BlockParams.random(4, 0)
    with pytest.raises(KernelInputError):
        rwkv_block_forward(np.zeros((3, 5)), WkvState.zeros(4), p)


@pytest.mark.parametrize("dd", [False, True])
def test_torch_block_matches_numpy(dd):
    d = 6
    p = BlockParams.random(d, 11, data_dependent=dd)
    blk = RWKVBlock(d, dtype=torch.float64, data_dependent=dd)
    blk.load_params(p, torch.float64)
    x = np.random.default_rng(2).standard_normal((3, 10, d))
    got = blk(torch.tensor(x)).detach().numpy()
    for b in range(3):
        ref, _ = rwkv_block_forward(x[b], WkvState.zeros(d), p)
        assert rel_err(got[b], ref) < 1e-12


def test_torch_block_export_roundtrip():
    blk = RWKVBlock(5, seed=3, dtype=torch.float64)
    p = blk.to_params()
    x = np.random.default_rng(0).standard_normal((7, 5))
    ref, _ = rwkv_block_forward(x, WkvState.zeros(5), p)
    got = blk(torch.tensor(x[None]))[0].detach().numpy()
    assert rel_err(got, ref) < 1e-12


def test_wkv_function_forward_matches_naive():
    rng = np.random.default_rng(0)
    k, v = rng.standard_normal((2, 12, 3)), rng.standard_normal((2, 12, 3))
    w, u = rng.uniform(0.1, 1, 3), rng.standard_normal(3)
    got = wkv(*(torch.tensor(a) for a in (k, v, w, u))).numpy()
    for b in range(2):
        ref, _, _ = naive_wkv(k[b], v[b], w, u)
        assert rel_err(got[b], ref) < 1e-12


def test_wkv_function_gradcheck():
    g = torch.Generator().manual_seed(0)
    args = (
        torch.randn(2, 9, 4, generator=g, dtype=torch.float64, requires_grad=True),
        torch.randn(2, 9, 4, generator=g, dtype=torch.float64, requires_grad=True),
        (torch.rand(4, generator=g, dtype=torch.float64) + 0.1).requires_grad_(),
        torch.randn(4, generator=g, dtype=torch.float64, requires_grad=True),
    )
    assert torch.autograd.gradcheck(wkv, args, eps=1e-6, atol=1e-6, rtol=1e-4)


def test_decay_params_reject_negative():
    with pytest.raises(KernelInputError):
        DecayParams(np.array([-0.1]), np.array([0.0]))
