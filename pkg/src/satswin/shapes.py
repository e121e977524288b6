"""Symbolic shape pipeline: every tensor shape the networks produce, computed
from the configuration alone (no tensors). Used by validation, tests, and the
CLI dry run to cross-check actual forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import HeadConfig, ModelConfig


@dataclass
class ShapePipeline:
    """Shape report for one configuration.

    All entries are (T, Gh, Gw, C) grids except the pixel-space ones, which
    are (T, H, W, C).
    """

    input_cube: tuple[int, int, int, int]
    partition_grid: tuple[int, int, int, int]
    embed_grid: tuple[int, int, int, int]
    stage_outputs: list[tuple[int, int, int, int]]
    bottleneck: tuple[int, int, int, int]
    decoder_levels: list[tuple[int, int, int, int]]
    reconstruction: tuple[int, int, int, int]
    unet_pixel_grid: tuple[int, int, int, int] | None = None
    unet_output: tuple[int, int, int, int] | None = None

    def describe(self) -> str:
        lines = [
            f"input cube            {self.input_cube}",
            f"patch partition       {self.partition_grid}",
            f"linear embedding      {self.embed_grid}",
        ]
        for i, s in enumerate(self.stage_outputs):
            lines.append(f"encoder stage {i}       {s}")
        lines.append(f"bottleneck            {self.bottleneck}")
        for i, s in enumerate(self.decoder_levels):
            lines.append(f"decoder level {len(self.decoder_levels) - 1 - i}       {s}")
        lines.append(f"reconstruction        {self.reconstruction}")
        if self.unet_pixel_grid is not None:
            lines.append(f"pixel-lattice feats   {self.unet_pixel_grid}")
        if self.unet_output is not None:
            lines.append(f"task output           {self.unet_output}")
        return "\n".join(lines)


def encoder_stage_shapes(cfg: ModelConfig) -> list[tuple[int, int, int, int]]:
    """Per-stage output shapes (post-blocks, pre-merge), finest first."""
    t, gh, gw = cfg.token_grid
    return [(t, gh >> i, gw >> i, cfg.stage_width(i)) for i in range(cfg.num_stages)]


def bottleneck_shape(cfg: ModelConfig) -> tuple[int, int, int, int]:
    return encoder_stage_shapes(cfg)[-1]


def decoder_level_shapes(cfg: ModelConfig) -> list[tuple[int, int, int, int]]:
    """Decoder block-group output shapes, coarsest level first."""
    shapes = encoder_stage_shapes(cfg)
    return list(reversed(shapes))


def reconstruction_shape(cfg: ModelConfig) -> tuple[int, int, int, int]:
    h, w = cfg.input_size
    return (cfg.num_timesteps, h, w, cfg.num_bands)


def unet_output_shape(cfg: ModelConfig, head: HeadConfig) -> tuple[int, int, int, int]:
    head = head.resolved(cfg)
    h, w = cfg.input_size
    out_ch = head.num_classes if head.task == "segmentation" else 1
    return (head.out_timesteps, h, w, out_ch)


def shape_pipeline(cfg: ModelConfig, head: HeadConfig | None = None) -> ShapePipeline:
    t, gh, gw = cfg.token_grid
    stages = encoder_stage_shapes(cfg)
    pipe = ShapePipeline(
        input_cube=(cfg.num_timesteps, *cfg.input_size, cfg.num_bands),
        partition_grid=(t, gh, gw, cfg.token_channels),
        embed_grid=(t, gh, gw, cfg.embed_dim),
        stage_outputs=stages,
        bottleneck=stages[-1],
        decoder_levels=decoder_level_shapes(cfg),
        reconstruction=reconstruction_shape(cfg),
    )
    if head is not None:
        head = head.resolved(cfg)
        h, w = cfg.input_size
        pipe.unet_pixel_grid = (t, h, w, head.head_channels)
        pipe.unet_output = unet_output_shape(cfg, head)
    return pipe
