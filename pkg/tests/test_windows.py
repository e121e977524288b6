import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grads_match
from satswin.patching import ShapeError
from satswin.windows import (NEG_INF, SwinBlock, WindowAttention, attention_score_elements,
                             build_boundary_mask, combined_attention_mask, cyclic_shift,
                             cyclic_unshift, window_partition, window_reverse)


def dense_attention_oracle(x: np.ndarray, attn: WindowAttention,
                           mask: np.ndarray | None = None) -> np.ndarray:
    """Loop-based dense attention over one window, independent of the
    implementation's tensor algebra."""
    n, c = x.shape
    heads, d = attn.num_heads, attn.head_dim
    w_qkv = attn.qkv.weight.detach().numpy()
    b_qkv = attn.qkv.bias.detach().numpy()
    qkv = x @ w_qkv.T + b_qkv
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    bias = attn.relative_bias_table.detach().numpy()[attn.relative_index.numpy()]
    out = np.zeros((n, c))
    for h in range(heads):
        qh = q[:, h * d:(h + 1) * d]
        kh = k[:, h * d:(h + 1) * d]
        vh = v[:, h * d:(h + 1) * d]
        for i in range(n):
            scores = np.empty(n)
            for j in range(n):
                scores[j] = qh[i] @ kh[j] / math.sqrt(d) + bias[i, j, h]
                if mask is not None:
                    scores[j] += mask[i, j]
            e = np.exp(scores - scores.max())
            w = e / e.sum()
            for j in range(n):
                out[i, h * d:(h + 1) * d] += w[j] * vh[j]
    return out @ attn.proj.weight.detach().numpy().T + attn.proj.bias.detach().numpy()


class TestWindowPartition:
    def test_reference_window_count(self):
        # 56/7 = 8 per spatial axis, 3/3 = 1 temporal: 64 windows of 147 tokens
        ws = window_partition(torch.zeros(3, 56, 56, 4), (3, 7, 7))
        assert ws.num_windows == 64
        assert ws.data.shape == (64, 147, 4)

    def test_single_window_row_major_token_order(self):
        grid = torch.arange(8.0).reshape(2, 2, 2, 1)
        ws = window_partition(grid, (2, 2, 2))
        assert ws.num_windows == 1
        assert ws.data[0, :, 0].tolist() == list(range(8))  # t, then h, then w

    def test_inverse_pair_bit_exact(self):
        grid = torch.rand(2, 3, 8, 8, 4)
        assert torch.equal(window_reverse(window_partition(grid, (2, 4, 4))), grid)

    def test_pad_crop_round_trip(self):
        grid = torch.rand(3, 57, 57, 2)
        ws = window_partition(grid, (3, 7, 7))
        assert ws.padded_dims == (3, 63, 63)
        assert torch.equal(window_reverse(ws), grid)

    def test_constant_grid(self):
        grid = torch.full((2, 4, 4, 3), 1.25)
        assert torch.all(window_reverse(window_partition(grid, (2, 2, 2))) == 1.25)

    def test_provenance_mismatch(self):
        ws = window_partition(torch.rand(2, 4, 4, 3), (2, 2, 2))
        bad = replace(ws, data=ws.data[:, :-1])
        with pytest.raises(ShapeError, match="provenance"):
            window_reverse(bad)


class TestCyclicShift:
    def test_zero_shift_identity(self):
        g = torch.rand(1, 4, 4, 2)
        assert torch.equal(cyclic_shift(g, (0, 0, 0)), g)

    def test_delta_tracking(self):
        g = torch.zeros(1, 4, 4, 1)
        g[0, 0, 0, 0] = 1.0
        out = cyclic_shift(g, (0, 2, 2))
        assert out[0, 2, 2, 0] == 1.0
        assert out.sum() == 1.0

    @given(st.integers(0, 3), st.integers(0, 5), st.integers(0, 5), st.integers(0, 2 ** 31))
    @settings(max_examples=25, deadline=None)
    def test_shift_unshift_identity(self, st_, sh, sw, seed):
        gen = torch.Generator().manual_seed(seed)
        g = torch.rand((3, 5, 6, 2), generator=gen)
        assert torch.equal(cyclic_unshift(cyclic_shift(g, (st_, sh, sw)), (st_, sh, sw)), g)


class TestBoundaryMask:
    def test_zero_shift_all_zero(self):
        m = build_boundary_mask((2, 4, 4), (2, 2, 2), (0, 0, 0))
        assert torch.all(m == 0)

    def test_1d_analogue_hand_enumerated(self):
        # length 4, window 2, shift 1: rolled layout [1 2 | 3 0]; the second
        # window pairs pre-shift regions {3} and {0} across the wrap
        m = build_boundary_mask((1, 1, 4), (1, 1, 2), (0, 0, 1))
        assert m.shape == (2, 2, 2)
        assert torch.all(m[0] == 0)
        assert m[1, 0, 1] == NEG_INF and m[1, 1, 0] == NEG_INF
        assert m[1, 0, 0] == 0 and m[1, 1, 1] == 0

    def test_symmetry(self):
        m = build_boundary_mask((2, 6, 6), (2, 3, 3), (1, 1, 1))
        assert torch.equal(m, m.transpose(1, 2))

    def test_shift_must_be_smaller_than_window(self):
        with pytest.raises(ShapeError, match="shift"):
            build_boundary_mask((1, 4, 4), (1, 2, 2), (0, 2, 0))


class TestWindowAttention:
    def test_single_token_window(self):
        # softmax over one token is 1: output = proj(V) regardless of Q, K
        torch.manual_seed(0)
        attn = WindowAttention(6, 2, (1, 1, 1))
        x = torch.randn(3, 1, 6)
        v = attn.qkv(x)[..., 12:]
        want = attn.proj(v)
        assert torch.allclose(attn(x), want, atol=1e-6)

    def test_identical_tokens_symmetric_output(self):
        torch.manual_seed(1)
        attn = WindowAttention(8, 2, (1, 1, 2))
        with torch.no_grad():
            attn.relative_bias_table.zero_()
        tok = torch.randn(1, 1, 8).repeat(1, 2, 1)
        out = attn(tok)
        assert torch.allclose(out[0, 0], out[0, 1], atol=1e-6)

    def test_matches_dense_oracle(self):
        torch.manual_seed(2)
        attn = WindowAttention(8, 1, (1, 2, 2)).double()
        x = torch.randn(1, 4, 8, dtype=torch.float64)
        out = attn(x).detach().numpy()[0]
        ref = dense_attention_oracle(x[0].numpy(), attn)
        np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)

    def test_head_channel_mismatch(self):
        with pytest.raises(ShapeError, match="heads"):
            WindowAttention(6, 4, (1, 1, 1))

    def test_softmax_rows_sum_to_one_with_mask(self):
        torch.manual_seed(3)
        dims, window, shift = (1, 4, 4), (1, 2, 2), (0, 1, 1)
        attn = WindowAttention(4, 2, window)
        grid = torch.rand(1, *dims, 4)
        shifted = cyclic_shift(grid, (0, -1, -1))
        ws = window_partition(shifted, window)
        mask = combined_attention_mask(dims, window, shift, dtype=torch.float32)
        # recompute the softmax the module uses, checking row sums and
        # masked-pair weights
        b, n, c = ws.data.shape
        qkv = attn.qkv(ws.data).reshape(b, n, 3, 2, 2).permute(2, 0, 3, 1, 4)
        scores = (qkv[0] * attn.scale) @ qkv[1].transpose(-2, -1)
        bias = attn.relative_bias_table[attn.relative_index.reshape(-1)]
        scores = scores + bias.reshape(n, n, 2).permute(2, 0, 1)[None]
        scores = scores + mask[:, None]
        probs = scores.softmax(-1)
        sums = probs.sum(-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
        masked_pairs = (mask == NEG_INF)[:, None].expand_as(probs)
        assert probs[masked_pairs].max() < 1e-6


class TestSwinBlock:
    def test_zero_weights_identity(self):
        torch.manual_seed(0)
        blk = SwinBlock(8, 2, (1, 2, 2), mlp_ratio=2.0)
        with torch.no_grad():
            for p in blk.parameters():
                p.zero_()
        g = torch.rand(1, 1, 4, 4, 8)
        assert torch.equal(blk(g), g)

    def test_output_shape_matches_input(self):
        torch.manual_seed(0)
        blk = SwinBlock(8, 2, (2, 3, 3), shift=(0, 1, 1), mlp_ratio=2.0)
        for shape in [(2, 5, 7, 8), (3, 2, 6, 6, 8), (1, 3, 3, 8)]:
            g = torch.rand(*shape)
            assert blk(g).shape == g.shape

    def test_locality_non_shifted(self):
        # perturbing a token in one window leaves all other windows unchanged
        torch.manual_seed(5)
        blk = SwinBlock(8, 2, (1, 2, 2), mlp_ratio=2.0)
        g = torch.rand(1, 1, 4, 4, 8)
        g2 = g.clone()
        g2[0, 0, 0, 0] += torch.randn(8)
        with torch.no_grad():
            diff = (blk(g2) - blk(g)).abs().sum(-1)[0, 0]
        changed = diff > 1e-9
        assert changed[:2, :2].any()
        assert not changed[2:, :].any() and not changed[:, 2:].any()

    def test_connectivity_after_shifted_block(self):
        # one non-shifted + one shifted block propagates influence into
        # spatially adjacent windows
        torch.manual_seed(5)
        blk = SwinBlock(8, 2, (1, 2, 2), mlp_ratio=2.0)
        blk_s = SwinBlock(8, 2, (1, 2, 2), shift=(0, 1, 1), mlp_ratio=2.0)
        g = torch.rand(1, 1, 4, 4, 8)
        g2 = g.clone()
        g2[0, 0, 0, 0] += torch.randn(8)
        with torch.no_grad():
            diff = (blk_s(blk(g2)) - blk_s(blk(g))).abs().sum(-1)[0, 0]
        assert (diff[:2, 2] > 1e-9).any() or (diff[2, :2] > 1e-9).any()

    def test_padded_tokens_masked_out_of_attention(self):
        # 4x4 grid with a 3x3 window pads to 6x6; valid tokens must see
        # NEG_INF toward every padded position, in both shift modes
        dims, window = (1, 4, 4), (1, 3, 3)
        for shift in [(0, 0, 0), (0, 1, 1)]:
            mask = combined_attention_mask(dims, window, shift, dtype=torch.float32)
            valid = torch.ones(*dims, 1)
            from satswin.windows import _pad_grid

            valid = _pad_grid(valid, window)
            valid = cyclic_shift(valid, tuple(-s for s in shift))
            vw = window_partition(valid, window).data[..., 0].bool()
            for w in range(vw.shape[0]):
                pad_cols = ~vw[w]
                if pad_cols.any():
                    assert torch.all(mask[w][vw[w]][:, pad_cols] <= NEG_INF)

    def test_padded_forward_shape_and_finiteness(self):
        torch.manual_seed(7)
        for shift in [(0, 0, 0), (0, 1, 1)]:
            blk = SwinBlock(4, 2, (1, 3, 3), shift=shift, mlp_ratio=2.0)
            g = torch.rand(1, 1, 4, 4, 4)
            out1 = blk(g)
            assert out1.shape == g.shape
            assert torch.isfinite(out1).all()

    def test_window_order_independence(self):
        # results identical across repeated runs (windows are independent)
        torch.manual_seed(1)
        blk = SwinBlock(8, 2, (1, 2, 2), shift=(0, 1, 1), mlp_ratio=2.0)
        g = torch.rand(2, 2, 4, 4, 8)
        with torch.no_grad():
            assert torch.equal(blk(g), blk(g))


class TestComplexityAccounting:
    def test_score_elements_linear_in_tokens(self):
        base = attention_score_elements((3, 56, 56), (3, 7, 7))
        assert base == 64 * 147 * 147
        assert attention_score_elements((3, 112, 56), (3, 7, 7)) == 2 * base
        assert attention_score_elements((3, 112, 112), (3, 7, 7)) == 4 * base


class TestGradients:
    def test_attention_and_block_match_finite_differences(self):
        torch.manual_seed(0)
        x = torch.rand(1, 2, 4, 4, 8, dtype=torch.float64)
        blk = SwinBlock(8, 2, (2, 2, 2), shift=(0, 1, 1), mlp_ratio=2.0).double()
        params = dict(blk.named_parameters())

        def loss_fn():
            return (blk(x) ** 2).sum() * 0.25

        assert_grads_match(loss_fn, params, rel_tol=1e-3, eps=1e-4, max_coords=16)
