import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from satswin.masking import (MaskError, MaskSpec, all_false_mask, apply_mask,
                             generate_window_mask, load_maskspec, save_maskspec)
from satswin.patching import ShapeError


class TestGenerateWindowMask:
    def test_reference_counts(self):
        # round(0.75 * 56 * 56) = 2352 per slice, 7056 total
        spec = generate_window_mask(3, 56, 56, 0.75, seed=42)
        per_slice = spec.mask.reshape(3, -1).sum(axis=1)
        assert per_slice.tolist() == [2352, 2352, 2352]
        assert spec.mask.sum() == 7056

    def test_ratio_actual_within_rounding(self):
        for ratio in (0.3, 0.5, 0.75, 0.9):
            spec = generate_window_mask(2, 16, 16, ratio, seed=1)
            assert abs(spec.ratio_actual - ratio) <= 1.0 / (16 * 16)

    def test_deterministic_per_seed(self):
        a = generate_window_mask(3, 16, 16, 0.75, seed=9)
        b = generate_window_mask(3, 16, 16, 0.75, seed=9)
        assert np.array_equal(a.mask, b.mask)
        assert a.seed == b.seed and a.ratio_actual == b.ratio_actual

    def test_distinct_across_seeds(self):
        # different seeds on a 16x16 grid give distinct masks nearly always
        masks = [generate_window_mask(1, 16, 16, 0.75, seed=s).mask.tobytes()
                 for s in range(100)]
        assert len(set(masks)) >= 99

    def test_ratio_out_of_range(self):
        for ratio in (0.0, 1.0, -0.5, 1.5):
            with pytest.raises(MaskError, match="open interval"):
                generate_window_mask(1, 8, 8, ratio, seed=0)

    @given(st.integers(1, 4), st.integers(2, 12), st.integers(2, 12),
           st.floats(0.05, 0.95), st.integers(0, 2 ** 62))
    @settings(max_examples=40, deadline=None)
    def test_per_slice_balance(self, t, gh, gw, ratio, seed):
        spec = generate_window_mask(t, gh, gw, ratio, seed)
        counts = spec.mask.reshape(t, -1).sum(axis=1)
        assert len(set(counts.tolist())) == 1
        assert counts[0] == int(round(ratio * gh * gw))
        assert spec.ratio_actual == spec.mask.sum() / spec.mask.size

    def test_slices_masked_independently(self):
        # per-slice selection differs between slices with near certainty
        spec = generate_window_mask(3, 16, 16, 0.5, seed=3)
        assert not np.array_equal(spec.mask[0], spec.mask[1])

    def test_window_aligned_variant(self):
        spec = generate_window_mask(2, 8, 8, 0.5, seed=5, window_hw=(4, 4))
        # masked area is a union of whole 4x4 tiles
        tiles = spec.mask.reshape(2, 2, 4, 2, 4)
        per_tile = tiles.any(axis=(2, 4)) == tiles.all(axis=(2, 4))
        assert per_tile.all()
        assert spec.mask.reshape(2, -1).sum(axis=1).tolist() == [32, 32]


class TestApplyMask:
    def test_all_false_is_identity(self):
        grid = torch.rand(2, 4, 4, 8)
        token = torch.randn(8)
        out = apply_mask(grid, np.zeros((2, 4, 4), dtype=bool), token)
        assert torch.equal(out, grid)

    def test_full_mask_replaces_everything(self):
        grid = torch.rand(2, 4, 4, 8)
        token = torch.randn(8)
        out = apply_mask(grid, np.ones((2, 4, 4), dtype=bool), token)
        assert torch.all(out == token)

    def test_single_position_delta(self):
        grid = torch.rand(1, 2, 2, 4)
        token = torch.randn(4)
        mask = np.zeros((1, 2, 2), dtype=bool)
        mask[0, 1, 0] = True
        out = apply_mask(grid, mask, token)
        assert torch.equal(out[0, 1, 0], token)
        mask_t = torch.from_numpy(mask)
        assert torch.equal(out[~mask_t], grid[~mask_t])

    def test_shape_preserved_with_batch(self):
        grid = torch.rand(5, 2, 4, 4, 8)
        out = apply_mask(grid, np.ones((2, 4, 4), dtype=bool), torch.zeros(8))
        assert out.shape == grid.shape

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError, match="mask dims"):
            apply_mask(torch.rand(2, 4, 4, 8), np.zeros((2, 4, 5), dtype=bool),
                       torch.zeros(8))
        with pytest.raises(ShapeError, match="token"):
            apply_mask(torch.rand(2, 4, 4, 8), np.zeros((2, 4, 4), dtype=bool),
                       torch.zeros(7))

    def test_gradient_reaches_token_only_through_masked_positions(self):
        grid = torch.rand(1, 2, 2, 4)
        token = torch.randn(4, requires_grad=True)
        mask = np.zeros((1, 2, 2), dtype=bool)
        out = apply_mask(grid, mask, token)
        loss = (out ** 2).sum()
        (g,) = torch.autograd.grad(loss, token, allow_unused=True)
        assert g is None or torch.all(g == 0)
        mask[0, 0, 1] = True
        loss = (apply_mask(grid, mask, token) ** 2).sum()
        (g,) = torch.autograd.grad(loss, token)
        assert g.abs().sum() > 0


class TestMaskSpecBitmap:
    def test_round_trip(self, tmp_path):
        spec = generate_window_mask(3, 12, 9, 0.4, seed=77)
        save_maskspec(tmp_path / "m.sswm", spec)
        back = load_maskspec(tmp_path / "m.sswm")
        assert np.array_equal(back.mask, spec.mask)
        assert back.seed == spec.seed
        assert back.ratio_actual == spec.ratio_actual

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.sswm").write_bytes(b"NOPExxxx")
        with pytest.raises(MaskError, match="magic"):
            load_maskspec(tmp_path / "x.sswm")

    def test_truncated(self, tmp_path):
        spec = generate_window_mask(2, 8, 8, 0.5, seed=1)
        save_maskspec(tmp_path / "m.sswm", spec)
        blob = (tmp_path / "m.sswm").read_bytes()
        (tmp_path / "t.sswm").write_bytes(blob[:-3])
        with pytest.raises(MaskError, match="truncated"):
            load_maskspec(tmp_path / "t.sswm")

    def test_all_false_helper(self):
        spec = all_false_mask(2, 4, 4)
        assert spec.mask.sum() == 0 and spec.ratio_actual == 0.0
