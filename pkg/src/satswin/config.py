"""Architecture configuration records, validation, and JSON round trips.

``ModelConfig`` is the single architectural hyperparameter record consumed by
every other module. Its JSON document carries exactly the canonical field
names; unknown keys are rejected on load. Secondary knobs that do not belong
to the architectural core live in ``ArchOptions`` (implementation variants)
and ``HeadConfig`` (task head wiring for finetuning).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from typing import Sequence


class ConfigError(ValueError):
    """Raised when a configuration document is malformed or invalid."""


def _as_int_tuple(value, n, name):
    try:
        t = tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a sequence of {n} integers, got {value!r}")
    if len(t) != n:
        raise ConfigError(f"{name} must have length {n}, got {len(t)}")
    return t


@dataclass
class ModelConfig:
    """Full architectural hyperparameter record.

    Attributes:
        patch_size: (pt, ph, pw) patch extents for the 3D patch partition.
        embed_dim: channel width C after the linear embedding.
        stage_depths: number of attention blocks per encoder stage.
        stage_heads: attention heads per encoder stage; stage i must satisfy
            stage_heads[i] * head_dim == embed_dim * 2**i.
        window: (Mt, Mh, Mw) attention window extents; Mh == Mw required.
        head_dim: per-head query/key/value width d.
        mlp_ratio: hidden-width multiplier of the block MLPs.
        mask_ratio: fraction of tokens masked per time slice, open (0, 1).
        num_bands: spectral band count B of the input cubes.
        num_timesteps: temporal length T of the input cubes.
        input_size: (H, W) pixel extent of the input cubes.
        decoder_depths: blocks per decoder level, one entry per encoder stage
            (level order: coarsest first).
    """

    patch_size: tuple[int, int, int] = (1, 4, 4)
    embed_dim: int = 128
    stage_depths: tuple[int, ...] = (2, 2, 18, 2)
    stage_heads: tuple[int, ...] = (4, 8, 16, 32)
    window: tuple[int, int, int] = (3, 7, 7)
    head_dim: int = 32
    mlp_ratio: float = 4.0
    mask_ratio: float = 0.75
    num_bands: int = 6
    num_timesteps: int = 3
    input_size: tuple[int, int] = (224, 224)
    decoder_depths: tuple[int, ...] = (2, 2, 2, 2)

    def __post_init__(self):
        self.patch_size = tuple(int(v) for v in self.patch_size)
        self.window = tuple(int(v) for v in self.window)
        self.input_size = tuple(int(v) for v in self.input_size)
        self.stage_depths = tuple(int(v) for v in self.stage_depths)
        self.stage_heads = tuple(int(v) for v in self.stage_heads)
        self.decoder_depths = tuple(int(v) for v in self.decoder_depths)

    @property
    def num_stages(self) -> int:
        return len(self.stage_depths)

    def stage_width(self, i: int) -> int:
        """Channel width at stage ``i`` (doubles per merge)."""
        return self.embed_dim * (2 ** i)

    @property
    def token_grid(self) -> tuple[int, int, int]:
        """(T, Gh, Gw) token lattice produced by the patch partition."""
        pt, ph, pw = self.patch_size
        h, w = self.input_size
        return (self.num_timesteps // pt, h // ph, w // pw)

    @property
    def token_channels(self) -> int:
        """Raw channel count of a partition token before embedding."""
        pt, ph, pw = self.patch_size
        return pt * ph * pw * self.num_bands

    def to_dict(self) -> dict:
        return {
            "patch_size": list(self.patch_size),
            "embed_dim": self.embed_dim,
            "stage_depths": list(self.stage_depths),
            "stage_heads": list(self.stage_heads),
            "window": list(self.window),
            "head_dim": self.head_dim,
            "mlp_ratio": self.mlp_ratio,
            "mask_ratio": self.mask_ratio,
            "num_bands": self.num_bands,
            "num_timesteps": self.num_timesteps,
            "input_size": list(self.input_size),
            "decoder_depths": list(self.decoder_depths),
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        if not isinstance(doc, dict):
            raise ConfigError(f"model config must be a JSON object, got {type(doc).__name__}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        missing = sorted(known - set(doc))
        if missing:
            raise ConfigError(f"missing model config keys: {', '.join(missing)}")
        cfg = cls(
            patch_size=_as_int_tuple(doc["patch_size"], 3, "patch_size"),
            embed_dim=int(doc["embed_dim"]),
            stage_depths=tuple(int(v) for v in doc["stage_depths"]),
            stage_heads=tuple(int(v) for v in doc["stage_heads"]),
            window=_as_int_tuple(doc["window"], 3, "window"),
            head_dim=int(doc["head_dim"]),
            mlp_ratio=float(doc["mlp_ratio"]),
            mask_ratio=float(doc["mask_ratio"]),
            num_bands=int(doc["num_bands"]),
            num_timesteps=int(doc["num_timesteps"]),
            input_size=_as_int_tuple(doc["input_size"], 2, "input_size"),
            decoder_depths=tuple(int(v) for v in doc["decoder_depths"]),
        )
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


@dataclass
class ArchOptions:
    """Implementation-variant switches that do not change tensor contracts.

    merge_norm: layer-normalize the 4C concatenation before the merge
        projection (on by default).
    head_order: "expand_first" runs final patch expansion before the temporal
        modulator; "modulate_first" swaps them.
    window_aligned_masking: mask whole window-aligned tiles instead of
        individual tokens (approximate ratio).
    """

    merge_norm: bool = True
    head_order: str = "expand_first"
    window_aligned_masking: bool = False

    def __post_init__(self):
        if self.head_order not in ("expand_first", "modulate_first"):
            raise ConfigError(
                f"head_order must be 'expand_first' or 'modulate_first', got {self.head_order!r}"
            )

    def to_dict(self) -> dict:
        return {
            "merge_norm": self.merge_norm,
            "head_order": self.head_order,
            "window_aligned_masking": self.window_aligned_masking,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchOptions":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown arch option keys: {', '.join(unknown)}")
        return cls(**doc)


@dataclass
class HeadConfig:
    """Finetuning head wiring: task type and temporal output shape.

    task: "segmentation" (per-pixel class logits) or "regression" (one
        channel, clamped to [0, 100] at inference).
    num_classes: class count for segmentation heads.
    out_timesteps: temporal length T_out produced by the temporal modulator.
    temporal_kernel: kernel size k_t of the modulator; defaults to the full
        token-lattice temporal extent (learned pooling when out_timesteps=1).
    head_channels: pixel-lattice feature width after final patch expansion;
        defaults to embed_dim.
    use_skips: fuse encoder skip features into the decoder (the ablation
        switch).
    """

    task: str = "segmentation"
    num_classes: int = 2
    out_timesteps: int = 1
    temporal_kernel: int | None = None
    head_channels: int | None = None
    use_skips: bool = True

    def __post_init__(self):
        if self.task not in ("segmentation", "regression"):
            raise ConfigError(f"task must be 'segmentation' or 'regression', got {self.task!r}")

    def resolved(self, cfg: ModelConfig) -> "HeadConfig":
        """Fill defaults that depend on the model config."""
        t_tokens = cfg.token_grid[0]
        kt = self.temporal_kernel if self.temporal_kernel is not None else t_tokens
        ch = self.head_channels if self.head_channels is not None else cfg.embed_dim
        return replace(self, temporal_kernel=kt, head_channels=ch)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "num_classes": self.num_classes,
            "out_timesteps": self.out_timesteps,
            "temporal_kernel": self.temporal_kernel,
            "head_channels": self.head_channels,
            "use_skips": self.use_skips,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HeadConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown head config keys: {', '.join(unknown)}")
        return cls(**doc)


def validate_config(cfg: ModelConfig, input_shape: Sequence[int] | None = None) -> list[str]:
    """Check every configuration invariant and return the full violation list.

    Total: returns ``[]`` when the config is valid, otherwise one message per
    violation. Never raises for integer-valued inputs.

    Args:
        cfg: the configuration to check.
        input_shape: optional (T, H, W, B) of the data the config will be
            applied to; mismatches against the config's own dims are reported.
    """
    errors: list[str] = []
    pt, ph, pw = cfg.patch_size
    h, w = cfg.input_size
    t = cfg.num_timesteps
    s = cfg.num_stages

    if s == 0:
        errors.append("stage_depths: at least one stage required")
    if len(cfg.stage_heads) != s:
        errors.append(
            f"stage_heads: length {len(cfg.stage_heads)} does not match "
            f"stage_depths length {s}"
        )
    if len(cfg.decoder_depths) != s:
        errors.append(
            f"decoder_depths: length {len(cfg.decoder_depths)} does not match "
            f"stage_depths length {s}"
        )
    for name, vals in (("stage_depths", cfg.stage_depths),
                       ("stage_heads", cfg.stage_heads),
                       ("decoder_depths", cfg.decoder_depths)):
        for i, v in enumerate(vals):
            if v < 1:
                errors.append(f"{name}: stage {i} value {v} must be >= 1")

    if cfg.embed_dim < 1:
        errors.append(f"embed_dim: {cfg.embed_dim} must be >= 1")
    if cfg.head_dim < 1:
        errors.append(f"head_dim: {cfg.head_dim} must be >= 1")
    if cfg.mlp_ratio <= 0:
        errors.append(f"mlp_ratio: {cfg.mlp_ratio} must be > 0")
    if not (0.0 < cfg.mask_ratio < 1.0):
        errors.append(f"mask_ratio out of open interval (0, 1): {cfg.mask_ratio}")
    if cfg.num_bands < 1:
        errors.append(f"num_bands: {cfg.num_bands} must be >= 1")
    if t < 1:
        errors.append(f"num_timesteps: {t} must be >= 1")

    for name, v in (("patch_size[pt]", pt), ("patch_size[ph]", ph), ("patch_size[pw]", pw)):
        if v < 1:
            errors.append(f"{name}: {v} must be >= 1")
    mt, mh, mw = cfg.window
    for name, v in (("window[Mt]", mt), ("window[Mh]", mh), ("window[Mw]", mw)):
        if v < 1:
            errors.append(f"{name}: {v} must be >= 1")
    if mh != mw:
        errors.append(f"window: spatial extents must be square, got Mh={mh}, Mw={mw}")

    # Head/width coupling per stage: heads[i] * d == C * 2^i.
    if cfg.head_dim >= 1 and cfg.embed_dim >= 1:
        for i, heads in enumerate(cfg.stage_heads):
            want = cfg.embed_dim * (2 ** i)
            got = heads * cfg.head_dim
            if got != want:
                errors.append(
                    f"stage {i}: stage_heads[{i}] x head_dim = {heads} x {cfg.head_dim} "
                    f"= {got} does not equal stage width {want}"
                )

    # Patch divisibility, then merge divisibility per stage.
    div_ok = True
    if pt >= 1 and t % pt != 0:
        errors.append(f"num_timesteps: T={t} not divisible by patch_size pt={pt} (time axis)")
        div_ok = False
    if ph >= 1 and h % ph != 0:
        errors.append(f"input_size: H={h} not divisible by patch_size ph={ph} (height axis)")
        div_ok = False
    if pw >= 1 and w % pw != 0:
        errors.append(f"input_size: W={w} not divisible by patch_size pw={pw} (width axis)")
        div_ok = False

    if div_ok and min(pt, ph, pw) >= 1 and s >= 1:
        t_tok, gh, gw = t // pt, h // ph, w // pw
        if mt > t_tok:
            errors.append(f"window[Mt]: {mt} exceeds token-lattice temporal extent {t_tok}")
        for i in range(s - 1):
            if gh % 2 != 0:
                errors.append(f"stage {i}: grid height {gh} must be even to merge")
            if gw % 2 != 0:
                errors.append(f"stage {i}: grid width {gw} must be even to merge")
            if gh % 2 != 0 or gw % 2 != 0:
                break
            gh //= 2
            gw //= 2

    if input_shape is not None:
        if len(input_shape) != 4:
            errors.append(f"input_shape: expected (T, H, W, B), got {tuple(input_shape)}")
        else:
            it, ih, iw, ib = (int(v) for v in input_shape)
            if it != t:
                errors.append(f"num_timesteps: config T={t} does not match input T={it}")
            if (ih, iw) != (h, w):
                errors.append(
                    f"input_size: config (H, W)=({h}, {w}) does not match input ({ih}, {iw})"
                )
            if ib != cfg.num_bands:
                errors.append(
                    f"num_bands: config B={cfg.num_bands} does not match input B={ib}"
                )

    return errors


def ensure_valid(cfg: ModelConfig, input_shape: Sequence[int] | None = None) -> None:
    """Raise ``ConfigError`` listing every violation if the config is invalid."""
    errors = validate_config(cfg, input_shape)
    if errors:
        raise ConfigError("invalid model config:\n  " + "\n  ".join(errors))


def swin_base_config(num_timesteps: int = 3, input_size: tuple[int, int] = (224, 224),
                     num_bands: int = 6) -> ModelConfig:
    """Default Swin-B-profile backbone (C=128, depths 2/2/18/2, d=32)."""
    return ModelConfig(
        patch_size=(1, 4, 4),
        embed_dim=128,
        stage_depths=(2, 2, 18, 2),
        stage_heads=(4, 8, 16, 32),
        window=(min(3, num_timesteps), 7, 7),
        head_dim=32,
        mlp_ratio=4.0,
        mask_ratio=0.75,
        num_bands=num_bands,
        num_timesteps=num_timesteps,
        input_size=tuple(input_size),
        decoder_depths=(2, 2, 2, 2),
    )


def tiny_config(**overrides) -> ModelConfig:
    """Small two-stage profile used throughout the test suite."""
    base = dict(
        patch_size=(1, 4, 4),
        embed_dim=32,
        stage_depths=(1, 1),
        stage_heads=(1, 2),
        window=(2, 4, 4),
        head_dim=32,
        mlp_ratio=2.0,
        mask_ratio=0.75,
        num_bands=3,
        num_timesteps=2,
        input_size=(16, 16),
        decoder_depths=(1, 1),
    )
    base.update(overrides)
    return ModelConfig(**base)
