"""Network assembly: hierarchical encoder, reconstruction decoder, and the
skip-connected UNet-style finetuning network with temporal modulator and task
heads, plus pretrain-to-finetune weight transfer.

Tensor contract throughout: cubes are [..., T, H, W, B], token grids
[..., T, Gh, Gw, C], with any number of leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .config import ArchOptions, HeadConfig, ModelConfig, ensure_valid
from .masking import apply_mask
from .patching import (FinalPatchExpand, LinearEmbed, PatchExpand, PatchMerge,
                       ShapeError, _trunc_normal_, patch_partition, patch_unpartition)
from .windows import SwinBlock, default_shift


class TransferError(ValueError):
    """Raised when a checkpoint cannot be transferred into a model."""


def _make_blocks(dim: int, heads: int, cfg: ModelConfig, depth: int) -> nn.ModuleList:
    """Blocks alternating non-shifted / shifted within a stage or level."""
    t_tokens = cfg.token_grid[0]
    shift = default_shift(cfg.window, t_tokens)
    return nn.ModuleList(
        SwinBlock(dim, heads, cfg.window,
                  shift=shift if j % 2 == 1 else (0, 0, 0),
                  mlp_ratio=cfg.mlp_ratio)
        for j in range(depth)
    )


class EncoderStage(nn.Module):
    def __init__(self, dim: int, heads: int, depth: int, cfg: ModelConfig,
                 merge: bool, merge_norm: bool):
        super().__init__()
        self.blocks = _make_blocks(dim, heads, cfg, depth)
        self.merge = PatchMerge(dim, norm=merge_norm) if merge else None

    def run_blocks(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class Encoder(nn.Module):
    """Patch partition, linear embedding, optional mask substitution, and the
    hierarchical block/merge stages. No merge after the final stage.

    ``forward`` returns (bottleneck, skips): skips hold each stage's
    pre-merge output, finest resolution first; the last entry is the
    bottleneck itself.
    """

    def __init__(self, cfg: ModelConfig, arch: ArchOptions | None = None,
                 with_mask_token: bool = True):
        super().__init__()
        arch = arch or ArchOptions()
        self.cfg = cfg
        self.embed = LinearEmbed(cfg.token_channels, cfg.embed_dim)
        if with_mask_token:
            self.mask_token = nn.Parameter(torch.zeros(cfg.embed_dim))
            _trunc_normal_(self.mask_token)
        else:
            self.mask_token = None
        self.stages = nn.ModuleList(
            EncoderStage(cfg.stage_width(i), cfg.stage_heads[i], cfg.stage_depths[i],
                         cfg, merge=i < cfg.num_stages - 1, merge_norm=arch.merge_norm)
            for i in range(cfg.num_stages)
        )

    def forward(self, cube: Tensor, mask: Tensor | None = None) -> tuple[Tensor, list[Tensor]]:
        x = patch_partition(cube, self.cfg.patch_size)
        x = self.embed(x)
        if mask is not None:
            if self.mask_token is None:
                raise ShapeError("this encoder was built without a mask token")
            x = apply_mask(x, mask, self.mask_token)
        skips: list[Tensor] = []
        for stage in self.stages:
            x = stage.run_blocks(x)
            skips.append(x)
            if stage.merge is not None:
                x = stage.merge(x)
        return skips[-1], skips


class DecoderLevel(nn.Module):
    def __init__(self, dim: int, heads: int, depth: int, cfg: ModelConfig, fusion: bool):
        super().__init__()
        self.fusion = nn.Linear(2 * dim, dim, bias=False) if fusion else None
        if fusion:
            _trunc_normal_(self.fusion.weight)
        self.blocks = _make_blocks(dim, heads, cfg, depth)


class DecoderTrunk(nn.Module):
    """Mirrored decoder: block groups from the bottleneck resolution back to
    the finest token lattice, patch-expanding between levels. When built with
    fusion layers, each sub-bottleneck level concatenates the matching encoder
    skip with the decoder feature and projects 2C -> C before its blocks.
    """

    def __init__(self, cfg: ModelConfig, with_fusion: bool):
        super().__init__()
        self.cfg = cfg
        s = cfg.num_stages
        self.levels = nn.ModuleList(
            DecoderLevel(cfg.stage_width(s - 1 - k), cfg.stage_heads[s - 1 - k],
                         cfg.decoder_depths[k], cfg,
                         fusion=with_fusion and k > 0)
            for k in range(s)
        )
        self.expands = nn.ModuleList(
            PatchExpand(cfg.stage_width(s - 1 - k)) for k in range(s - 1)
        )

    def forward(self, x: Tensor, skips: list[Tensor] | None = None,
                collect: bool = False):
        s = self.cfg.num_stages
        feats: list[Tensor] = []
        for k, level in enumerate(self.levels):
            if level.fusion is not None:
                if skips is None:
                    raise ShapeError("decoder built with fusion layers requires skip features")
                x = level.fusion(torch.cat([skips[s - 1 - k], x], dim=-1))
            for blk in level.blocks:
                x = blk(x)
            feats.append(x)
            if k < s - 1:
                x = self.expands[k](x)
        return (x, feats) if collect else x


class TemporalModulator(nn.Module):
    """Learned convolution over the time axis mapping T_in to T_out frames.

    One kernel of ``kernel_size`` taps per output frame, shared across pixels
    and channels; output frame j reads the input window starting at
    round(j * (T_in - k) / max(T_out - 1, 1)). With T_out=1 and k=T_in this is
    a learned temporal pooling.
    """

    def __init__(self, in_frames: int, out_frames: int, kernel_size: int):
        super().__init__()
        if out_frames > in_frames:
            raise ShapeError(f"T_out={out_frames} exceeds input temporal length {in_frames}")
        if not (1 <= kernel_size <= in_frames):
            raise ShapeError(f"temporal kernel {kernel_size} must lie in [1, {in_frames}]")
        self.in_frames = in_frames
        self.out_frames = out_frames
        self.kernel_size = kernel_size
        span = in_frames - kernel_size
        self.offsets = tuple(
            int(round(j * span / max(out_frames - 1, 1))) for j in range(out_frames)
        )
        self.weight = nn.Parameter(torch.full((out_frames, kernel_size), 1.0 / kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_frames))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-4] != self.in_frames:
            raise ShapeError(
                f"temporal length {x.shape[-4]} does not match modulator input "
                f"{self.in_frames}"
            )
        k = self.kernel_size
        frames = [
            (x[..., o:o + k, :, :, :] * self.weight[j].view(k, 1, 1, 1)).sum(dim=-4)
            + self.bias[j]
            for j, o in enumerate(self.offsets)
        ]
        return torch.stack(frames, dim=-4)


class SegmentationHead(nn.Module):
    """Per-pixel linear map to class logits."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        self.proj = nn.Linear(channels, num_classes)
        _trunc_normal_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: Tensor, raw: bool = False) -> Tensor:
        return self.proj(x)


class RegressionHead(nn.Module):
    """Per-pixel linear map to one channel, clamped to [0, 100] unless the
    raw (pre-clamp) output is requested for loss computation."""

    OUT_RANGE = (0.0, 100.0)

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Linear(channels, 1)
        _trunc_normal_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: Tensor, raw: bool = False) -> Tensor:
        out = self.proj(x)
        if raw:
            return out
        return out.clamp(*self.OUT_RANGE)


class MaskedAutoencoder(nn.Module):
    """Pretraining network: masked encoder plus mirrored reconstruction
    decoder ending in a projection back to raw patch values and the inverse
    patch partition. No skip connections in this mode."""

    def __init__(self, cfg: ModelConfig, arch: ArchOptions | None = None):
        super().__init__()
        ensure_valid(cfg)
        self.cfg = cfg
        self.encoder = Encoder(cfg, arch, with_mask_token=True)
        self.decoder = DecoderTrunk(cfg, with_fusion=False)
        self.recon_head = nn.Linear(cfg.embed_dim, cfg.token_channels)
        _trunc_normal_(self.recon_head.weight)
        nn.init.zeros_(self.recon_head.bias)

    def encode(self, cube: Tensor, mask: Tensor | None = None):
        return self.encoder(cube, mask)

    def decode(self, bottleneck: Tensor) -> Tensor:
        x = self.decoder(bottleneck)
        x = self.recon_head(x)
        return patch_unpartition(x, self.cfg.patch_size, self.cfg.num_bands)

    def forward(self, cube: Tensor, mask: Tensor | None = None) -> Tensor:
        bottleneck, _ = self.encode(cube, mask)
        return self.decode(bottleneck)


class SwinUNet(nn.Module):
    """Finetuning network: unmasked encoder, skip-fused decoder, final patch
    expansion to the pixel lattice, temporal modulator, and a task head.

    ``head_order`` picks whether expansion or temporal modulation runs first.
    """

    def __init__(self, cfg: ModelConfig, head: HeadConfig, arch: ArchOptions | None = None):
        super().__init__()
        ensure_valid(cfg)
        arch = arch or ArchOptions()
        head = head.resolved(cfg)
        t_tokens = cfg.token_grid[0]
        if head.out_timesteps > t_tokens:
            raise ShapeError(
                f"T_out={head.out_timesteps} exceeds token-lattice temporal length {t_tokens}"
            )
        self.cfg = cfg
        self.head_cfg = head
        self.head_order = arch.head_order
        self.encoder = Encoder(cfg, arch, with_mask_token=False)
        self.decoder = DecoderTrunk(cfg, with_fusion=head.use_skips)
        _, ph, pw = cfg.patch_size
        self.final_expand = FinalPatchExpand(cfg.embed_dim, (ph, pw), head.head_channels)
        self.temporal = TemporalModulator(t_tokens, head.out_timesteps, head.temporal_kernel)
        if head.task == "segmentation":
            self.head = SegmentationHead(head.head_channels, head.num_classes)
        else:
            self.head = RegressionHead(head.head_channels)

    def features(self, cube: Tensor, collect: bool = False):
        """Encoder + fused decoder up to the finest token lattice."""
        bottleneck, skips = self.encoder(cube)
        return self.decoder(bottleneck, skips=skips if self.head_cfg.use_skips else None,
                            collect=collect)

    def forward(self, cube: Tensor, raw: bool = False) -> Tensor:
        x = self.features(cube)
        if self.head_order == "expand_first":
            x = self.final_expand(x)
            x = self.temporal(x)
        else:
            x = self.temporal(x)
            x = self.final_expand(x)
        return self.head(x, raw=raw)


@dataclass
class TransferReport:
    """Accounting of a pretrain-to-finetune weight transfer."""

    copied: list[str] = field(default_factory=list)
    fresh: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)

    def summary(self) -> str:
        return (
            f"copied {len(self.copied)} tensors, initialized {len(self.fresh)} fresh, "
            f"dropped {len(self.dropped)} from the checkpoint"
        )


_WEIGHT_COMPAT_FIELDS = (
    "patch_size", "embed_dim", "stage_depths", "stage_heads", "window",
    "head_dim", "mlp_ratio", "num_bands", "decoder_depths",
)


def check_transfer_compatible(source_cfg: ModelConfig, target_cfg: ModelConfig) -> None:
    """Raise ``TransferError`` naming the first architecturally incompatible
    config field (per-stage fields name the first mismatching stage)."""
    for name in _WEIGHT_COMPAT_FIELDS:
        a, b = getattr(source_cfg, name), getattr(target_cfg, name)
        if a == b:
            continue
        if name in ("stage_depths", "stage_heads", "decoder_depths") and isinstance(a, tuple):
            if len(a) != len(b):
                raise TransferError(f"{name}: stage count differs ({len(a)} vs {len(b)})")
            for i, (x, y) in enumerate(zip(a, b)):
                if x != y:
                    raise TransferError(f"{name}: first mismatch at stage {i} ({x} vs {y})")
        raise TransferError(f"{name}: checkpoint has {a}, target model has {b}")


def transfer_weights(source_state: dict[str, Tensor], source_cfg: ModelConfig,
                     target: nn.Module, target_cfg: ModelConfig) -> TransferReport:
    """Copy pretrained encoder/decoder weights into a finetuning model.

    The mask token is dropped; tensors absent from the checkpoint (skip
    fusion, final expansion, temporal modulator, task head) stay freshly
    initialized. Every name shared by both models must match in shape; all
    mismatches are reported together.
    """
    check_transfer_compatible(source_cfg, target_cfg)
    report = TransferReport()
    target_state = target.state_dict()
    mismatched = []
    to_load = {}
    for name, tensor in target_state.items():
        if name in source_state:
            src = source_state[name]
            if tuple(src.shape) != tuple(tensor.shape):
                mismatched.append(f"{name}: checkpoint {tuple(src.shape)} vs model {tuple(tensor.shape)}")
            else:
                to_load[name] = src.to(tensor.dtype)
                report.copied.append(name)
        else:
            report.fresh.append(name)
    if mismatched:
        raise TransferError("shape-incompatible checkpoint tensors:\n  " + "\n  ".join(mismatched))
    for name in source_state:
        if name not in target_state:
            report.dropped.append(name)
    merged = dict(target_state)
    merged.update(to_load)
    target.load_state_dict(merged)
    return report
