"""Grouped layers against dense and standalone numpy oracles."""

import numpy as np
import pytest

from hmix.errors import ConfigError
from hmix.layers import (
    GroupedAttention,
    GroupedLinear,
    GroupedNorm,
    mac_count,
    param_count,
    resolve_width,
)
from hmix.tensor import Tape, Tensor, tsum


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


def np_softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def reference_mha(q, k, v, wq, wk, wv, wo, bo):
    """Plain multi-head attention in numpy; wq/wk/wv are per-head lists."""
    d_head = wq[0].shape[1]
    heads = []
    for h in range(len(wq)):
        qh, kh, vh = q @ wq[h], k @ wk[h], v @ wv[h]
        probs = np_softmax(qh @ kh.T / np.sqrt(d_head))
        heads.append(probs @ vh)
    out = np.concatenate(heads, axis=-1) @ wo
    return out + bo if bo is not None else out


@pytest.mark.parametrize("seed", range(5))
def test_grouped_linear_matches_block_diagonal_dense(seed):
    rng = rng_for(seed)
    g = int(rng.integers(1, 5))
    din = g * int(rng.integers(1, 6))
    dout = g * int(rng.integers(1, 6))
    layer = GroupedLinear(din, dout, g, bias=False, rng=rng)
    x = rng.normal(size=(7, din))
    got = layer(Tensor(x)).data
    want = x @ layer.as_block_diagonal()
    assert np.max(np.abs(got - want)) < 1e-12


def test_grouped_linear_bias_and_batch_dims():
    rng = rng_for(1)
    layer = GroupedLinear(6, 4, 2, bias=True, rng=rng)
    x = rng.normal(size=(3, 5, 6))
    got = layer(Tensor(x)).data
    want = x @ layer.as_block_diagonal() + layer.bias.data
    assert np.allclose(got, want, atol=1e-12)


def test_grouped_linear_divisibility_error():
    with pytest.raises(ConfigError):
        GroupedLinear(7, 4, 2, rng=rng_for(0))
    with pytest.raises(ConfigError):
        GroupedLinear(4, 7, 2, rng=rng_for(0))


def test_grouped_linear_param_count_is_dense_over_g():
    for g in (1, 2, 4):
        layer = GroupedLinear(8, 12, g, bias=False, rng=rng_for(g))
        assert param_count(layer) * g == 8 * 12
    with_bias = GroupedLinear(8, 12, 4, bias=True, rng=rng_for(9))
    assert param_count(with_bias) == 8 * 12 // 4 + 12


def test_grouped_linear_mac_count_hand_summed():
    layer = GroupedLinear(4, 6, 2, bias=True, rng=rng_for(0))
    # per row: 2 blocks of (2 x 3) -> 2*2*3 = 12 MACs; 3 rows -> 36
    assert mac_count(layer, 3) == 36


def test_gradients_stay_inside_each_group():
    rng = rng_for(2)
    layer = GroupedLinear(6, 6, 3, bias=False, rng=rng)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    with Tape() as tape:
        out = layer(x)
        # loss reads only group 1's output slice
        from hmix.tensor import slice_axis
        loss = tsum(slice_axis(out, -1, 2, 4))
    tape.backward(loss, params=layer.parameters())
    assert np.all(layer.blocks[0].adjoint == 0.0)
    assert np.any(layer.blocks[1].adjoint != 0.0)
    assert np.all(layer.blocks[2].adjoint == 0.0)
    # input gradient outside group 1's slice is exactly zero too
    assert np.all(x.adjoint[:, :2] == 0.0)
    assert np.all(x.adjoint[:, 4:] == 0.0)


def test_grouped_attention_equals_standalone_numpy_mha_per_group():
    rng = rng_for(3)
    d, g, h, n = 12, 3, 2, 5
    attn = GroupedAttention(d, g, h, out_bias=True, rng=rng)
    x = rng.normal(size=(n, d))
    got = attn(Tensor(x), Tensor(x), Tensor(x)).data
    dg = d // g
    for gi in range(g):
        sl = slice(gi * dg, (gi + 1) * dg)
        want = reference_mha(
            x[:, sl], x[:, sl], x[:, sl],
            [w.data for w in attn.w_query[gi]],
            [w.data for w in attn.w_key[gi]],
            [w.data for w in attn.w_value[gi]],
            attn.out_proj.blocks[gi].data,
            attn.out_proj.bias.data[sl],
        )
        assert np.max(np.abs(got[:, sl] - want)) < 1e-10


def test_grouped_attention_g1_is_plain_mha():
    rng = rng_for(4)
    d, h, n = 8, 4, 6
    attn = GroupedAttention(d, 1, h, out_bias=False, rng=rng)
    x = rng.normal(size=(n, d))
    got = attn(Tensor(x), Tensor(x), Tensor(x)).data
    want = reference_mha(
        x, x, x,
        [w.data for w in attn.w_query[0]],
        [w.data for w in attn.w_key[0]],
        [w.data for w in attn.w_value[0]],
        attn.out_proj.blocks[0].data,
        None,
    )
    assert np.max(np.abs(got - want)) < 1e-12


def test_grouped_attention_param_count_is_g_standalones():
    d, g, h = 24, 3, 2
    grouped = GroupedAttention(d, g, h, out_bias=True, rng=rng_for(5))
    standalone = GroupedAttention(d // g, 1, h, out_bias=True, rng=rng_for(6))
    assert param_count(grouped) == g * param_count(standalone)


def test_grouped_attention_mac_count_hand_summed():
    # d=4, g=1, h=1, n=2: proj 3*(2*4*4)=96, scores 2*2*4=16, values 16, out 2*4*4=32
    attn = GroupedAttention(4, 1, 1, out_bias=True, rng=rng_for(7))
    assert attn.mac_count(2) == 96 + 32 + 32


def test_grouped_attention_batched_matches_loop():
    rng = rng_for(8)
    d, g, h = 6, 2, 3
    attn = GroupedAttention(d, g, h, out_bias=True, rng=rng)
    x = rng.normal(size=(4, 5, d))
    batched = attn(Tensor(x), Tensor(x), Tensor(x)).data
    for i in range(4):
        single = attn(Tensor(x[i]), Tensor(x[i]), Tensor(x[i])).data
        assert np.allclose(batched[i], single, atol=1e-12)


def test_grouped_attention_key_mask_zeroes_attention():
    rng = rng_for(9)
    attn = GroupedAttention(4, 1, 1, out_bias=False, rng=rng)
    x = rng.normal(size=(3, 4))
    mask = np.zeros((3, 3), dtype=bool)
    mask[:, 2] = True  # ignore the last key
    got = attn(Tensor(x), Tensor(x), Tensor(x), key_mask=mask).data
    want = attn(Tensor(x[:2]), Tensor(x[:2]), Tensor(x[:2])).data  # keys restricted
    # queries 0..1 attending over keys 0..1 must agree
    assert np.allclose(got[:2], want, atol=1e-9)


def test_grouped_attention_divisibility_error():
    with pytest.raises(ConfigError):
        GroupedAttention(10, 3, 2, rng=rng_for(0))


def test_grouped_norm_normalizes_and_isolates():
    rng = rng_for(10)
    norm = GroupedNorm(8, 2)
    x = rng.normal(size=(6, 8)) * 3.0 + 2.0
    y = norm(Tensor(x)).data
    for g in range(2):
        sl = y[:, g * 4:(g + 1) * 4]
        assert np.allclose(sl.mean(-1), 0.0, atol=1e-9)
    # changing group 0's input never moves group 1's output
    x2 = x.copy()
    x2[:, :4] += 5.0
    y2 = norm(Tensor(x2)).data
    assert np.allclose(y[:, 4:], y2[:, 4:], atol=1e-12)


def test_resolve_width_examples():
    assert resolve_width(128, 1.5, 3, 16).dim == 192
    assert resolve_width(128, 2.0, 2, 8).dim == 256
    assert resolve_width(128, 1.0, 1, 8).dim == 128  # exact multiple unchanged
    assert resolve_width(10, 1.0, 3, 2).dim == 12    # rounds up to multiple of 6


def test_resolve_width_rejects_bad_args():
    with pytest.raises(ConfigError):
        resolve_width(0, 1.0, 1, 1)
    with pytest.raises(ConfigError):
        resolve_width(8, -1.0, 1, 1)
