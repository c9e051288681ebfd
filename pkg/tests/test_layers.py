import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from phtrans import layers as L
from phtrans import tensorcore as tc
from phtrans.architecture import STBlock, SwinStack
from phtrans.tensorcore import Tensor


def rand(*shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).normal(size=shape).astype(dtype)


# -- init --------------------------------------------------------------------

def test_he_init_statistics_and_determinism():
    lin = L.Linear(1000, 100)
    L.he_init(lin, 0)
    std = lin.weight.data.std()
    assert abs(std - np.sqrt(2 / 1000)) < 0.1 * np.sqrt(2 / 1000)
    assert not lin.bias.data.any()
    other = L.Linear(1000, 100)
    L.he_init(other, 0)
    assert np.array_equal(lin.weight.data, other.weight.data)


def test_he_init_fan_in_conventions():
    assert L.Conv3d(4, 8, 3).weight.fan_in == 4 * 27
    assert L.ConvTranspose3d(8, 4, 2, 2).weight.fan_in == 4 * 8
    assert L.Linear(6, 2).weight.fan_in == 6


# -- normalization -----------------------------------------------------------

def test_instance_norm_properties():
    x = rand(2, 3, 4, 4, 4, seed=1)
    out = L.instance_norm(Tensor(x)).data
    assert np.abs(out.mean(axis=(2, 3, 4))).max() < 1e-5
    assert np.abs(out.var(axis=(2, 3, 4)) - 1).max() < 1e-3
    const = L.instance_norm(Tensor(np.full((1, 2, 3, 3, 3), 4.2))).data
    assert np.abs(const).max() < 1e-9
    shifted = L.instance_norm(Tensor(2.5 * x - 3.0)).data
    assert np.abs(shifted - out).max() < 1e-4


def test_layer_norm_properties():
    x = rand(5, 7, seed=2)
    out = L.layer_norm(Tensor(x)).data
    assert np.abs(out.mean(-1)).max() < 1e-5
    assert np.abs(out.var(-1) - 1).max() < 1e-3
    assert np.abs(L.layer_norm(Tensor(np.full((2, 4), 4.2))).data).max() < 1e-9
    rep = tc.grad_check(lambda t: L.layer_norm(t), Tensor(rand(3, 6, seed=3, dtype=np.float32)))
    assert rep.max_rel_err < 1e-3


# -- V2S / S2V -----------------------------------------------------------------

def test_v2s_shapes():
    assert L.v2s(Tensor(np.zeros((1, 3, 8, 8, 8))), (4, 4, 4)).shape == (8, 64, 3)
    assert L.v2s(Tensor(np.zeros((1, 3, 4, 5, 5))), (4, 5, 5)).shape == (1, 100, 3)


def test_v2s_error_names_axis():
    with pytest.raises(ValueError, match="axis 1"):
        L.v2s(Tensor(np.zeros((1, 1, 8, 6, 8))), (4, 4, 4))


def test_s2v_rejects_inconsistent_metadata():
    with pytest.raises(ValueError):
        L.s2v(Tensor(np.zeros((4, 64, 3))), (4, 4, 4), (1, 3, 8, 8, 8))


@given(st.sampled_from([((8, 8, 8), (4, 4, 4)), ((4, 10, 5), (2, 5, 5)), ((6, 8, 8), (3, 4, 4))]),
       st.integers(1, 2), st.integers(1, 3))
@settings(max_examples=20, deadline=None)
def test_v2s_s2v_round_trip(geom, B, C):
    spatial, window = geom
    x = Tensor(rand(B, C, *spatial, seed=B * 7 + C))
    assert np.array_equal(L.s2v(L.v2s(x, window), window, x.shape).data, x.data)


def test_v2s_is_index_bijection_exhaustive():
    spatial, window = (8, 8, 8), (4, 4, 4)
    ids = np.arange(np.prod(spatial), dtype=np.float64).reshape(1, 1, *spatial)
    seq = L.v2s(Tensor(ids), window).data[..., 0]
    assert sorted(seq.reshape(-1).astype(int).tolist()) == list(range(512))
    counts = [n // w for n, w in zip(spatial, window)]
    for p in itertools.product(*[range(n) for n in spatial]):
        widx = [c // w for c, w in zip(p, window)]
        n = (widx[0] * counts[1] + widx[1]) * counts[2] + widx[2]
        loc = [c % w for c, w in zip(p, window)]
        l = (loc[0] * window[1] + loc[1]) * window[2] + loc[2]
        assert seq[n, l] == ids[(0, 0) + p]


def test_single_window_s2v_is_reshape_permute():
    x = rand(1, 3, 2, 2, 2, seed=4)
    seq = L.v2s(Tensor(x), (2, 2, 2)).data
    assert np.array_equal(seq, x.reshape(3, 8).T[None])


def test_s2v_v2s_gradient_is_identity():
    x = Tensor(rand(1, 2, 4, 4, 4, seed=5), requires_grad=True)
    g = rand(1, 2, 4, 4, 4, seed=6)
    y = L.s2v(L.v2s(x, (2, 2, 2)), (2, 2, 2), x.shape)
    tc.backward(tc.tsum(y * Tensor(g)))
    assert np.array_equal(x.grad, g)


# -- shift mask -----------------------------------------------------------------

def test_shift_mask_zero_shift():
    assert not L.shift_mask((8, 8, 8), (4, 4, 4), (0, 0, 0)).any()


def test_shift_mask_1d_analogue():
    # extent 4, window 2, shift 1; after rolling by -1 the windows hold source
    # positions (1, 2) and (3, 0). Source segments floor((p - 1) / 2) decide masking.
    m = L.shift_mask((4, 1, 1), (2, 1, 1), (1, 0, 0))
    rolled = np.roll(np.arange(4), -1)
    for n in range(2):
        src = rolled[2 * n:2 * n + 2]
        seg = (src - 1) // 2
        for i, j in itertools.product(range(2), repeat=2):
            expect = 0.0 if seg[i] == seg[j] else L.MASK_VALUE
            assert m[n, i, j] == np.float32(expect)
    assert m[0].max() == 0 and m[1, 0, 1] < 0


@pytest.mark.parametrize("geom", [((8, 8, 8), (4, 4, 4), (2, 2, 2)), ((6, 8, 8), (3, 4, 4), (1, 2, 2))])
def test_shift_mask_symmetric(geom):
    m = L.shift_mask(*geom)
    assert np.array_equal(m, m.transpose(0, 2, 1))


def test_shift_mask_validates_shift():
    with pytest.raises(ValueError):
        L.shift_mask((8, 8, 8), (4, 4, 4), (4, 0, 0))


# -- window attention -------------------------------------------------------------

def make_attn(C=4, heads=2, window=(2, 2, 2), bias=True, seed=0):
    a = L.WindowAttention(C, heads, window, position_bias=bias)
    L.he_init(a, seed)
    if bias:
        a.bias_table.data[...] = np.random.default_rng(seed + 1).normal(size=a.bias_table.shape)
    return a


def test_single_token_attention_is_projected_value():
    a = make_attn(window=(1, 1, 1))
    seq = rand(3, 1, 4, seed=7, dtype=np.float32)
    out = L.window_msa(Tensor(seq), a).data
    v = seq @ a.qkv.weight.data[:, 8:] + a.qkv.bias.data[8:]
    assert np.allclose(out, v @ a.proj.weight.data + a.proj.bias.data, atol=1e-6)


def test_permutation_equivariance_without_bias():
    a = make_attn(bias=False)
    seq = rand(2, 8, 4, seed=8)
    perm = np.random.default_rng(9).permutation(8)
    out = L.window_msa(Tensor(seq), a).data
    out_p = L.window_msa(Tensor(seq[:, perm]), a).data
    assert np.allclose(out_p, out[:, perm], atol=1e-12)


def test_attention_rows_sum_to_one_over_unmasked_keys():
    a = make_attn()
    mask = L.shift_mask((4, 2, 2), (2, 2, 2), (1, 1, 1))
    L.window_msa(Tensor(rand(2, 8, 4, seed=10)), a, mask, keep_attn=True)
    w = a.last_attn  # (B*N, h, L, L)
    allowed = (mask == 0)[:, None]
    assert np.abs((w * allowed).sum(-1) - 1).max() < 1e-6
    assert (w * ~allowed).max() < 1e-12


def test_multi_head_equals_concatenated_single_heads():
    C, h = 8, 2
    a = make_attn(C, h, bias=False, seed=11)
    seq = rand(2, 8, C, seed=12)
    full = L.window_msa(Tensor(seq), a).data
    d = C // h
    qkv = seq @ a.qkv.weight.data + a.qkv.bias.data
    heads = []
    for i in range(h):
        q, k, v = (qkv[..., j * C + i * d:j * C + (i + 1) * d] for j in range(3))
        s = q @ k.transpose(0, 2, 1) / np.sqrt(d)
        s = np.exp(s - s.max(-1, keepdims=True))
        heads.append((s / s.sum(-1, keepdims=True)) @ v)
    ref = np.concatenate(heads, -1) @ a.proj.weight.data + a.proj.bias.data
    assert np.allclose(full, ref, atol=1e-12)


def test_head_divisibility_error():
    with pytest.raises(ValueError):
        L.WindowAttention(6, 4, (2, 2, 2))


def shifted_msa(x, attn, window, shift):
    """Library path: roll(-s) -> V2S -> masked window MSA -> S2V -> roll(+s)."""
    mask = L.shift_mask(x.shape[2:], window, shift)
    rolled = tc.cyclic_roll(x, [-s for s in shift])
    seq = L.window_msa(L.v2s(rolled, window), attn, mask)
    return tc.cyclic_roll(L.s2v(seq, window, x.shape), shift)


@pytest.mark.parametrize("spatial,window", [((8, 8, 8), (4, 4, 4)), ((6, 8, 8), (3, 4, 4))])
def test_shifted_window_attention_matches_bruteforce(spatial, window):
    C, heads = 4, 2
    shift = tuple(w // 2 for w in window)
    attn = make_attn(C, heads, window, seed=13)
    x = rand(1, C, *spatial, seed=14)
    got = shifted_msa(Tensor(x), attn, window, shift).data[0]
    ref = oracles.shifted_attention(x[0], window, shift, heads, attn.qkv.weight.data, attn.qkv.bias.data,
                                    attn.proj.weight.data, attn.proj.bias.data, attn.bias_table.data)
    assert np.abs(got - ref).max() < 1e-5


def test_regular_window_attention_matches_bruteforce():
    attn = make_attn(4, 2, (4, 4, 4), seed=15)
    x = rand(1, 4, 8, 8, 8, seed=16)
    got = L.s2v(L.window_msa(L.v2s(Tensor(x), (4, 4, 4)), attn), (4, 4, 4), x.shape).data[0]
    ref = oracles.shifted_attention(x[0], (4, 4, 4), (0, 0, 0), 2, attn.qkv.weight.data, attn.qkv.bias.data,
                                    attn.proj.weight.data, attn.proj.bias.data, attn.bias_table.data)
    assert np.abs(got - ref).max() < 1e-5  # fp32 parameters


def test_swin_stack_second_block_matches_reference():
    window, spatial = (4, 4, 4), (8, 8, 8)
    stack = SwinStack(4, 2, window, 2, 2.0, True, spatial)
    L.he_init(stack, 17)
    for blk in stack.blocks:
        blk.attn.bias_table.data[...] = np.random.default_rng(18).normal(size=blk.attn.bias_table.shape)
        for p in (blk.norm1.gain, blk.norm2.gain):
            p.data[...] = np.random.default_rng(19).uniform(0.5, 1.5, p.shape)
    x = rand(1, 4, *spatial, seed=20)
    got = stack(Tensor(x)).data[0]
    ref = x[0]
    for blk in stack.blocks:
        params = {n: p.data for n, p in blk.named_parameters()}
        ref = oracles.st_block_reference(ref, window, blk.shift, 2, params, tc.GELU_APPROXIMATE)
    assert stack.blocks[0].shift == (0, 0, 0) and stack.blocks[1].shift == (2, 2, 2)
    assert np.abs(got - ref).max() < 1e-5


# -- units ---------------------------------------------------------------------------

def test_conv_unit_preserves_shape_and_mlp_width():
    u = L.ConvUnit(3, 5)
    L.he_init(u, 0)
    assert u(Tensor(rand(1, 3, 6, 6, 6))).shape == (1, 5, 6, 6, 6)
    m = L.MLPBlock(6, 4.0)
    assert m.fc1.weight.shape == (6, 24)
    assert m(Tensor(rand(2, 5, 6))).shape == (2, 5, 6)


def test_conv_unit_order_conv_gelu_norm():
    u = L.ConvUnit(2, 2)
    L.he_init(u, 1)
    x = Tensor(rand(1, 2, 4, 4, 4, seed=21))
    ref = L.instance_norm(tc.gelu(tc.conv3d(x, u.conv.weight, u.conv.bias, 1, 1)), u.norm.gain, u.norm.bias)
    assert np.array_equal(u(x).data, ref.data)
