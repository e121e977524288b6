import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from satswin.config import (ArchOptions, ConfigError, HeadConfig, ModelConfig,
                            swin_base_config, tiny_config, validate_config)
from satswin.model import MaskedAutoencoder
from satswin.shapes import shape_pipeline


def spec_example_config(**overrides):
    base = dict(
        patch_size=(1, 4, 4), embed_dim=96, stage_depths=(2, 2, 6, 2),
        stage_heads=(3, 6, 12, 24), window=(3, 7, 7), head_dim=32,
        mlp_ratio=4.0, mask_ratio=0.75, num_bands=6, num_timesteps=3,
        input_size=(224, 224), decoder_depths=(2, 2, 2, 2),
    )
    base.update(overrides)
    return ModelConfig(**base)


class TestValidateConfig:
    def test_valid_reference_profile(self):
        # 224/4 = 56; 56 halves to 7 over 3 merges; heads*32 matches 96*2^i
        assert validate_config(spec_example_config()) == []

    def test_head_width_mismatch_names_stage(self):
        cfg = spec_example_config(stage_heads=(3, 6, 12, 23))
        errors = validate_config(cfg)
        assert len(errors) == 1
        assert "stage 3" in errors[0]
        assert "736" in errors[0]  # 23 * 32
        assert "768" in errors[0]

    def test_mask_ratio_boundary(self):
        errors = validate_config(spec_example_config(mask_ratio=1.0))
        assert any("mask_ratio out of open interval" in e for e in errors)
        errors = validate_config(spec_example_config(mask_ratio=0.0))
        assert any("mask_ratio out of open interval" in e for e in errors)

    def test_reports_all_violations_not_first(self):
        cfg = spec_example_config(stage_heads=(3, 6, 12, 23), mask_ratio=1.5,
                                  num_bands=0)
        errors = validate_config(cfg)
        assert len(errors) >= 3

    def test_divisibility_names_axis(self):
        errors = validate_config(spec_example_config(input_size=(225, 224)))
        assert any("height" in e for e in errors)
        errors = validate_config(spec_example_config(num_timesteps=4, patch_size=(3, 4, 4)))
        assert any("time" in e for e in errors)

    def test_merge_divisibility_names_stage(self):
        # grid 14x14: merge after stage 0 gives 7x7, stage 1's merge fails
        cfg = spec_example_config(input_size=(56, 56))
        errors = validate_config(cfg)
        assert any("stage 1" in e and "even" in e for e in errors)

    def test_input_shape_mismatch_names_field(self):
        errors = validate_config(spec_example_config(), input_shape=(3, 224, 224, 4))
        assert any("num_bands" in e for e in errors)

    def test_window_temporal_bound(self):
        errors = validate_config(spec_example_config(window=(4, 7, 7)))
        assert any("Mt" in e for e in errors)

    @given(st.integers(-3, 3), st.integers(-2, 5), st.integers(0, 4),
           st.integers(0, 300), st.integers(-1, 40), st.integers(-2, 9))
    @settings(max_examples=60, deadline=None)
    def test_total_on_integer_inputs(self, pt, embed, stages, size, heads, window):
        # never raises: returns ok or a nonempty error list for any integers
        cfg = ModelConfig(
            patch_size=(pt, pt, pt), embed_dim=embed,
            stage_depths=(1,) * stages, stage_heads=(heads,) * stages,
            window=(1, window, window), head_dim=8, mlp_ratio=2.0,
            mask_ratio=0.5, num_bands=2, num_timesteps=2,
            input_size=(size, size), decoder_depths=(1,) * stages,
        )
        errors = validate_config(cfg)
        assert isinstance(errors, list)


class TestModelConfigJson:
    def test_round_trip_stable(self):
        cfg = swin_base_config()
        text = cfg.to_json()
        again = ModelConfig.from_json(text)
        assert again == cfg
        assert again.to_json() == text

    def test_exact_field_names(self):
        doc = json.loads(tiny_config().to_json())
        assert sorted(doc) == sorted([
            "patch_size", "embed_dim", "stage_depths", "stage_heads", "window",
            "head_dim", "mlp_ratio", "mask_ratio", "num_bands", "num_timesteps",
            "input_size", "decoder_depths",
        ])

    def test_unknown_keys_rejected(self):
        doc = tiny_config().to_dict()
        doc["dropout"] = 0.1
        with pytest.raises(ConfigError, match="unknown model config keys: dropout"):
            ModelConfig.from_dict(doc)

    def test_missing_keys_rejected(self):
        doc = tiny_config().to_dict()
        del doc["window"]
        with pytest.raises(ConfigError, match="missing"):
            ModelConfig.from_dict(doc)

    def test_invalid_json_rejected(self):
        with pytest.raises(ConfigError, match="not valid JSON"):
            ModelConfig.from_json("{nope")


class TestAuxConfigs:
    def test_arch_options_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown arch option"):
            ArchOptions.from_dict({"merge_norm": True, "bogus": 1})

    def test_head_order_validated(self):
        with pytest.raises(ConfigError, match="head_order"):
            ArchOptions(head_order="sideways")

    def test_head_config_resolution(self, tiny_cfg):
        head = HeadConfig().resolved(tiny_cfg)
        assert head.temporal_kernel == tiny_cfg.token_grid[0]
        assert head.head_channels == tiny_cfg.embed_dim

    def test_head_task_validated(self):
        with pytest.raises(ConfigError, match="task"):
            HeadConfig(task="detection")


class TestShapePipelineMatchesForward:
    def test_tiny_forward_shapes(self, tiny_cfg):
        torch.manual_seed(0)
        pipe = shape_pipeline(tiny_cfg)
        model = MaskedAutoencoder(tiny_cfg)
        cube = torch.rand(*pipe.input_cube)
        bottleneck, skips = model.encode(cube)
        assert tuple(bottleneck.shape) == pipe.bottleneck
        assert [tuple(s.shape) for s in skips] == pipe.stage_outputs
        assert tuple(model.decode(bottleneck).shape) == pipe.reconstruction

    def test_stage_feature_progression(self, tiny_cfg):
        # consecutive skip entries halve Gh, Gw and double C
        pipe = shape_pipeline(tiny_cfg)
        for a, b in zip(pipe.stage_outputs, pipe.stage_outputs[1:]):
            assert (a[1] // 2, a[2] // 2, a[3] * 2) == (b[1], b[2], b[3])
