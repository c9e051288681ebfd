"""Catalog of differentiable operations with random-instance generators for grad checks.

Each case maps a seed to (f, x): ``f`` is a function of one tensor and ``x`` the
point to check. Multi-input ops appear once per differentiated input.
"""

from __future__ import annotations

import zlib

import numpy as np

from phtrans import layers as L
from phtrans import tensorcore as tc
from phtrans import trainloss as T
from phtrans.tensorcore import Tensor

F32 = np.float32


def _r(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, shape).astype(F32)


def _t(a):
    return Tensor(a)


def case_add_a(rng):
    b = _t(_r(rng, 3, 4))
    return (lambda x: tc.add(x, b)), _t(_r(rng, 3, 4))


def case_add_broadcast(rng):
    a = _t(_r(rng, 2, 3, 4))
    return (lambda x: tc.add(a, x)), _t(_r(rng, 4))


def case_sub_b(rng):
    a = _t(_r(rng, 3, 4))
    return (lambda x: tc.sub(a, x)), _t(_r(rng, 3, 4))


def case_mul_a(rng):
    b = _t(_r(rng, 3, 4))
    return (lambda x: tc.mul(x, b)), _t(_r(rng, 3, 4))


def case_div_a(rng):
    b = _t(_r(rng, 3, 4, lo=0.5, hi=2.0))
    return (lambda x: tc.div(x, b)), _t(_r(rng, 3, 4))


def case_div_b(rng):
    a = _t(_r(rng, 3, 4))
    return (lambda x: tc.div(a, x)), _t(_r(rng, 3, 4, lo=0.5, hi=2.0))


def case_scale(rng):
    s = float(rng.uniform(-2, 2))
    return (lambda x: tc.scale(x, s)), _t(_r(rng, 5))


def case_exp(rng):
    return tc.exp, _t(_r(rng, 3, 4))


def case_log(rng):
    return tc.log, _t(_r(rng, 3, 4, lo=0.5, hi=2.0))


def case_sqrt(rng):
    return tc.sqrt, _t(_r(rng, 3, 4, lo=0.5, hi=2.0))


def case_sum_axis(rng):
    return (lambda x: tc.tsum(x, axis=(0, 2))), _t(_r(rng, 2, 3, 4))


def case_mean_keepdims(rng):
    return (lambda x: tc.mean(x, axis=1, keepdims=True)), _t(_r(rng, 2, 3, 4))


def case_matmul_a(rng):
    b = _t(_r(rng, 5, 3))
    return (lambda x: tc.matmul(x, b)), _t(_r(rng, 4, 5))


def case_matmul_b_batched(rng):
    a = _t(_r(rng, 2, 4, 5))
    return (lambda x: tc.matmul(a, x)), _t(_r(rng, 5, 3))


def case_reshape(rng):
    return (lambda x: tc.reshape(x, (4, 6)) * _t(_r(np.random.default_rng(1), 4, 6))), _t(_r(rng, 2, 3, 4))


def case_permute(rng):
    return (lambda x: tc.permute(x, (2, 0, 1))), _t(_r(rng, 2, 3, 4))


def case_pad_zero(rng):
    return (lambda x: tc.pad_zero(x, ((0, 0), (1, 2), (2, 1)))), _t(_r(rng, 2, 3, 3))


def case_crop(rng):
    return (lambda x: tc.crop(x, ((0, 2), (1, 3), (0, 2)))), _t(_r(rng, 2, 4, 3))


def case_concat(rng):
    b = _t(_r(rng, 1, 2, 2, 2, 2))
    return (lambda x: tc.concat_channels(x, b)), _t(_r(rng, 1, 3, 2, 2, 2))


def case_getitem(rng):
    return (lambda x: x[1:, ::2]), _t(_r(rng, 3, 4))


def case_cyclic_roll(rng):
    shifts = tuple(int(v) for v in rng.integers(-3, 4, 3))
    return (lambda x: tc.cyclic_roll(x, shifts)), _t(_r(rng, 1, 2, 3, 4, 4))


def case_softmax(rng):
    return (lambda x: tc.softmax(x, axis=-1)), _t(_r(rng, 3, 5, lo=-2, hi=2))


def case_log_softmax(rng):
    return (lambda x: tc.log_softmax(x, axis=1)), _t(_r(rng, 2, 4, 3, lo=-2, hi=2))


def case_gelu_tanh(rng):
    return (lambda x: tc.gelu(x, "tanh")), _t(_r(rng, 4, 5, lo=-3, hi=3))


def case_gelu_erf(rng):
    return (lambda x: tc.gelu(x, "erf")), _t(_r(rng, 4, 5, lo=-3, hi=3))


def case_index_select(rng):
    idx = rng.integers(0, 6, (4, 4))
    return (lambda x: tc.index_select(x, idx)), _t(_r(rng, 6, 2))


def case_conv3d_input(rng):
    w = _t(_r(rng, 2, 2, 3, 3, 3))
    b = _t(_r(rng, 2))
    stride = int(rng.integers(1, 3))
    return (lambda x: tc.conv3d(x, w, b, stride, 1)), _t(_r(rng, 1, 2, 4, 4, 4))


def case_conv3d_weight(rng):
    x = _t(_r(rng, 2, 2, 4, 4, 4))
    return (lambda w: tc.conv3d(x, w, None, 1, 1)), _t(_r(rng, 3, 2, 3, 3, 3))


def case_conv3d_bias(rng):
    x = _t(_r(rng, 1, 2, 3, 3, 3))
    w = _t(_r(rng, 2, 2, 1, 1, 1))
    return (lambda b: tc.conv3d(x, w, b)), _t(_r(rng, 2))


def case_conv3d_direct_path(rng):
    w = _t(_r(rng, 2, 2, 3, 3, 3))
    return (lambda x: tc.conv3d(x, w, None, 2, 1, path="direct")), _t(_r(rng, 1, 2, 4, 4, 4))


def case_conv3d_transpose_input(rng):
    w = _t(_r(rng, 2, 3, 2, 2, 2))
    return (lambda x: tc.conv3d_transpose(x, w, None, 2)), _t(_r(rng, 1, 2, 2, 2, 2))


def case_conv3d_transpose_weight(rng):
    x = _t(_r(rng, 1, 2, 2, 2, 2))
    return (lambda w: tc.conv3d_transpose(x, w, None, 2)), _t(_r(rng, 2, 3, 2, 2, 2))


def case_instance_norm(rng):
    g, b = _t(_r(rng, 2, lo=0.5, hi=1.5)), _t(_r(rng, 2))
    return (lambda x: L.instance_norm(x, g, b)), _t(_r(rng, 1, 2, 3, 3, 3, lo=-2, hi=2))


def case_instance_norm_gain(rng):
    x, b = _t(_r(rng, 1, 2, 3, 3, 3)), _t(_r(rng, 2))
    return (lambda g: L.instance_norm(x, g, b)), _t(_r(rng, 2))


def case_layer_norm(rng):
    g, b = _t(_r(rng, 6, lo=0.5, hi=1.5)), _t(_r(rng, 6))
    return (lambda x: L.layer_norm(x, g, b)), _t(_r(rng, 3, 6, lo=-2, hi=2))


def case_v2s(rng):
    return (lambda x: L.v2s(x, (2, 2, 2))), _t(_r(rng, 1, 2, 4, 4, 2))


def case_s2v(rng):
    return (lambda s: L.s2v(s, (2, 2, 2), (1, 2, 4, 4, 2))), _t(_r(rng, 4, 8, 2))


def _attn(rng, C=4, heads=2, window=(2, 2, 2)):
    a = L.WindowAttention(C, heads, window)
    L.he_init(a, int(rng.integers(1 << 30)))
    a.bias_table.data[...] = _r(rng, *a.bias_table.shape)
    return a


def case_window_msa(rng):
    a = _attn(rng)
    mask = L.shift_mask((4, 2, 2), (2, 2, 2), (1, 1, 1))
    return (lambda s: L.window_msa(s, a, mask)), _t(_r(rng, 2, 8, 4))


def case_window_msa_table(rng):
    a = _attn(rng)
    seq = _t(_r(rng, 2, 8, 4))
    return (lambda tbl: L.window_msa(seq, _with_table(a, tbl))), _t(a.bias_table.data.copy())


def _with_table(attn, tbl):
    attn.bias_table = tbl
    return attn


def case_linear(rng):
    lin = L.Linear(4, 3)
    L.he_init(lin, int(rng.integers(1 << 30)))
    return lin, _t(_r(rng, 2, 5, 4))


def case_cross_entropy(rng):
    # few voxels: a mean over many voxels shrinks each gradient entry toward fp32 noise
    y = rng.integers(0, 3, (2, 1, 1, 2))
    return (lambda x: T.cross_entropy(x, y)), _t(_r(rng, 2, 3, 1, 1, 2, lo=-2, hi=2))


def case_dice_loss(rng):
    # both classes present (absent-class terms have ~1e-7 gradients) and few
    # voxels, so gradients stay well above fp32 finite-difference noise
    y = rng.permutation([0, 1]).reshape(1, 1, 1, 2)
    return (lambda x: T.dice_loss(x, y)), _t(_r(rng, 1, 2, 1, 1, 2, lo=-2, hi=2))


CASES = {name[5:]: fn for name, fn in sorted(globals().items()) if name.startswith("case_")}


def run_case(name: str, seed: int, eps: float = 1e-3, tol: float = 1e-3):
    rng = np.random.default_rng([zlib.crc32(name.encode()), seed])
    f, x = CASES[name](rng)
    return tc.grad_check(f, x, eps=eps, tol=tol, seed=seed)
