import json

import numpy as np
import pytest

from satswin.data import (DEFAULT_BANDS, ChipData, FormatError, Manifest, ManifestEntry,
                          SYNTH_KINDS, bilinear_fill, crop_and_pad, generate_chip,
                          load_chips, load_manifest, read_chip, read_ppm, rgb_composite,
                          save_manifest, seasonal_triplet, synth_dataset, write_chip,
                          write_ppm)


class TestSswcFormat:
    def test_float32_round_trip_bit_exact(self, tmp_path):
        gen = np.random.default_rng(0)
        cube = gen.random((3, 8, 10, 6)).astype(np.float32)
        write_chip(tmp_path / "c.sswc", cube)
        chip = read_chip(tmp_path / "c.sswc")
        assert np.array_equal(chip.cube, cube)
        assert chip.band_names == DEFAULT_BANDS

    def test_uint8_round_trip_exact_after_quantization(self, tmp_path):
        gen = np.random.default_rng(1)
        cube = gen.random((2, 6, 6, 3)).astype(np.float32)
        write_chip(tmp_path / "c.sswc", cube, store_uint8=True)
        chip = read_chip(tmp_path / "c.sswc")
        quantized = np.round(cube * 255.0) / 255.0
        assert np.allclose(chip.cube, quantized, atol=1e-7)

    def test_uint8_255_maps_to_exactly_one(self, tmp_path):
        cube = np.full((1, 2, 2, 1), 255, dtype=np.uint8)
        write_chip(tmp_path / "c.sswc", cube)
        assert read_chip(tmp_path / "c.sswc").cube.max() == 1.0

    def test_labels_round_trip(self, tmp_path):
        cube = np.zeros((2, 4, 4, 2), dtype=np.float32)
        labels = np.arange(16, dtype=np.uint8).reshape(1, 4, 4)
        write_chip(tmp_path / "c.sswc", cube, labels=labels)
        chip = read_chip(tmp_path / "c.sswc")
        assert chip.labels.dtype == np.int64
        assert np.array_equal(chip.labels, labels)
        dens = (np.arange(16, dtype=np.float32) * 3.3).reshape(1, 4, 4)
        write_chip(tmp_path / "d.sswc", cube, labels=dens)
        chip = read_chip(tmp_path / "d.sswc")
        assert chip.labels.dtype == np.float32
        assert np.allclose(chip.labels, dens)

    def test_truncated_payload_names_byte_counts(self, tmp_path):
        cube = np.zeros((1, 4, 4, 2), dtype=np.float32)
        write_chip(tmp_path / "c.sswc", cube)
        blob = (tmp_path / "c.sswc").read_bytes()
        (tmp_path / "t.sswc").write_bytes(blob[:-8])
        with pytest.raises(FormatError, match=r"expected 128 bytes, found 120"):
            read_chip(tmp_path / "t.sswc")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.sswc").write_bytes(b"JUNKJUNKJUNK")
        with pytest.raises(FormatError, match="magic"):
            read_chip(tmp_path / "x.sswc")

    def test_band_count_mismatch_vs_config(self, tmp_path):
        write_chip(tmp_path / "c.sswc", np.zeros((1, 4, 4, 2), dtype=np.float32))
        with pytest.raises(FormatError, match="expected 6"):
            read_chip(tmp_path / "c.sswc", expected_bands=6)

    def test_out_of_range_float_rejected_on_write_and_read(self, tmp_path):
        with pytest.raises(FormatError, match=r"\[0, 1\]"):
            write_chip(tmp_path / "c.sswc", np.full((1, 2, 2, 1), 1.5, dtype=np.float32))


class TestManifest:
    def _write_chips(self, tmp_path, n=3):
        entries = []
        for i in range(n):
            name = f"chip{i}.sswc"
            write_chip(tmp_path / name, np.zeros((1, 4, 4, 2), dtype=np.float32))
            entries.append(ManifestEntry(path=name, split="train" if i else "val",
                                         meta={"cloud_cover": 0.05 * i}))
        save_manifest(tmp_path / "manifest.json", entries)
        return entries

    def test_round_trip_and_split_selection(self, tmp_path):
        self._write_chips(tmp_path)
        manifest = load_manifest(tmp_path / "manifest.json")
        assert len(manifest.entries) == 3
        assert len(manifest.select("train").entries) == 2
        assert len(manifest.select("val").entries) == 1
        chips = load_chips(manifest, split="train")
        assert len(chips) == 2

    def test_unresolvable_path_rejected(self, tmp_path):
        save_manifest(tmp_path / "manifest.json", [ManifestEntry(path="missing.sswc")])
        with pytest.raises(FormatError, match="unresolvable"):
            load_manifest(tmp_path / "manifest.json")

    def test_unknown_split_rejected(self, tmp_path):
        doc = {"version": 1, "chips": [{"path": "x.sswc", "split": "holdout"}]}
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(FormatError, match="split"):
            load_manifest(tmp_path / "manifest.json")

    def test_cloud_cover_filter_hook(self, tmp_path):
        self._write_chips(tmp_path)
        manifest = load_manifest(tmp_path / "manifest.json")
        kept = manifest.filter_meta("cloud_cover", 0.05)
        assert len(kept.entries) == 2


class TestSeasonalTriplet:
    def test_cyclic_indexing(self):
        frames = np.stack([np.full((2, 2, 1), float(i)) for i in range(4)])
        for seed in range(50):
            trip = seasonal_triplet(frames, seed)
            vals = [int(trip[i, 0, 0, 0]) for i in range(3)]
            assert vals[1] == (vals[0] + 1) % 4
            assert vals[2] == (vals[0] + 2) % 4
            if vals[0] == 2:
                assert vals == [2, 3, 0]

    def test_exactly_three_frames_fixed_rotation(self):
        frames = np.stack([np.full((1, 1, 1), float(i)) for i in range(3)])
        trip = seasonal_triplet(frames, seed=5)
        start = int(trip[0, 0, 0, 0])
        assert [int(v) for v in trip[:, 0, 0, 0]] == [start, (start + 1) % 3,
                                                      (start + 2) % 3]

    def test_deterministic(self):
        frames = np.random.default_rng(0).random((5, 4, 4, 2))
        assert np.array_equal(seasonal_triplet(frames, 9), seasonal_triplet(frames, 9))

    def test_too_few_frames(self):
        with pytest.raises(ValueError, match="at least 3"):
            seasonal_triplet(np.zeros((2, 4, 4, 1)), 0)

    def test_start_distribution_binomial_bound(self):
        # 4000 draws over 4 frames: each start within 5 sigma of 1000
        frames = np.stack([np.full((1, 1, 1), float(i)) for i in range(4)])
        counts = np.zeros(4, dtype=int)
        for seed in range(4000):
            counts[int(seasonal_triplet(frames, seed)[0, 0, 0, 0])] += 1
        sigma = np.sqrt(4000 * 0.25 * 0.75)
        assert np.all(np.abs(counts - 1000) < 5 * sigma)


class TestSynthGenerators:
    def test_deterministic_per_seed(self):
        for kind in SYNTH_KINDS:
            a = generate_chip(kind, (3, 16, 16, 4), seed=5)
            b = generate_chip(kind, (3, 16, 16, 4), seed=5)
            assert np.array_equal(a.cube, b.cube)
            if a.labels is not None:
                assert np.array_equal(a.labels, b.labels)
            c = generate_chip(kind, (3, 16, 16, 4), seed=6)
            assert not np.array_equal(a.cube, c.cube)

    def test_values_in_unit_interval(self):
        for kind in SYNTH_KINDS:
            chip = generate_chip(kind, (3, 32, 32, 6), seed=1)
            assert chip.cube.min() >= 0.0 and chip.cube.max() <= 1.0

    def test_two_class_blobs_histogram(self):
        chip = generate_chip("two-class-blobs", (2, 32, 32, 4), seed=2)
        frac = chip.labels.mean()
        assert 0.1 <= frac <= 0.9
        assert (chip.labels == 0).mean() >= 0.1 and (chip.labels == 1).mean() >= 0.1

    def test_moving_cloud_occluded_pixels_equal_base(self):
        chip = generate_chip("moving-cloud", (3, 32, 32, 4), seed=3)
        occ = chip.labels[0].astype(bool)
        assert occ.sum() > 10
        # base scene is static: T1 and T2 agree everywhere
        assert np.allclose(chip.cube[1], chip.cube[2])
        # the occluder brightened T0 relative to the base scene
        assert not np.allclose(chip.cube[0][occ], chip.cube[1][occ])

    def test_density_ramp_label_range(self):
        chip = generate_chip("density-ramp", (1, 32, 32, 3), seed=4)
        assert chip.labels.dtype == np.float32
        assert chip.labels.min() >= 0.0 and chip.labels.max() <= 100.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown synthetic kind"):
            generate_chip("lava-lamp", (1, 8, 8, 1), seed=0)

    def test_synth_dataset_byte_identical_across_runs(self, tmp_path):
        p1 = synth_dataset("textured-fields", (2, 16, 16, 3), 3, 7, tmp_path / "a")
        p2 = synth_dataset("textured-fields", (2, 16, 16, 3), 3, 7, tmp_path / "b")
        for a, b in zip(p1, p2):
            assert a.read_bytes() == b.read_bytes()
        m = load_manifest(tmp_path / "a" / "manifest.json")
        assert len(m.entries) == 3


class TestCropAndPad:
    def test_center_crop(self):
        cube = np.arange(1 * 8 * 8 * 1, dtype=np.float32).reshape(1, 8, 8, 1)
        out, rec = crop_and_pad(cube, 4, 4)
        assert out.shape == (1, 4, 4, 1)
        assert rec.crop_top == 2 and rec.crop_left == 2
        assert np.array_equal(out, cube[:, 2:6, 2:6])

    def test_pad_high_side_keeps_content_in_low_corner(self):
        cube = np.ones((1, 3, 3, 1), dtype=np.float32)
        out, rec = crop_and_pad(cube, 5, 6)
        assert out.shape == (1, 5, 6, 1)
        assert rec.pad_bottom == 2 and rec.pad_right == 3
        assert np.all(out[:, :3, :3] == 1.0)
        assert np.all(out[:, 3:, :] == 0.0) and np.all(out[:, :, 3:] == 0.0)

    def test_idempotent_at_target(self):
        cube = np.random.default_rng(0).random((2, 4, 4, 2)).astype(np.float32)
        out, rec = crop_and_pad(cube, 4, 4)
        assert np.array_equal(out, cube)
        assert rec == type(rec)()

    def test_mixed_crop_and_pad(self):
        cube = np.ones((1, 8, 3, 1), dtype=np.float32)
        out, _ = crop_and_pad(cube, 4, 6)
        assert out.shape == (1, 4, 6, 1)


class TestImaging:
    def test_ppm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
        write_ppm(tmp_path / "x.ppm", img)
        assert np.array_equal(read_ppm(tmp_path / "x.ppm"), img)

    def test_rgb_composite_band_selection(self):
        cube = np.zeros((1, 2, 2, 6), dtype=np.float32)
        cube[..., 2] = 1.0  # B4
        frames = rgb_composite(cube, DEFAULT_BANDS)
        assert frames.shape == (1, 2, 2, 3)
        assert np.all(frames[..., 0] == 255)
        assert np.all(frames[..., 1:] == 0)

    def test_bilinear_fill_recovers_smooth_field(self):
        yy, xx = np.mgrid[0:16, 0:16]
        img = (yy * 0.3 + xx * 0.7)[..., None].astype(np.float64)
        known = np.ones((16, 16), dtype=bool)
        known[6:10, 6:10] = False
        filled = bilinear_fill(img, known)
        # linear interpolation reconstructs an affine field exactly
        assert np.allclose(filled, img, atol=1e-8)
