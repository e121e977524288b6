"""Pretraining corruption: per-slice random token masking and learnable
mask-token substitution.

Mask generation is backed by a counter-based RNG (numpy Philox seeded through
SeedSequence spawning), so the same seed yields the same mask on any platform
and under any thread count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .patching import ShapeError

_MAGIC = b"SSWM"
_VERSION = 1


class MaskError(ValueError):
    """Raised for invalid mask parameters or malformed mask files."""


@dataclass
class MaskSpec:
    """Boolean occupancy grid of masked token positions (True = masked)."""

    mask: np.ndarray  # bool [T, Gh, Gw]
    seed: int
    ratio_actual: float

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.mask.shape)

    def torch_mask(self, device=None) -> Tensor:
        return torch.from_numpy(self.mask).to(device=device)


def _slice_generators(seed: int, t: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(t)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def generate_window_mask(t: int, gh: int, gw: int, ratio: float, seed: int,
                         window_hw: tuple[int, int] | None = None) -> MaskSpec:
    """Draw a per-slice uniform random token mask.

    Each time slice independently masks exactly round(ratio * Gh * Gw)
    positions, chosen without replacement; deterministic per seed.

    Args:
        window_hw: when given, switch to the window-aligned variant — whole
            (Mh, Mw) tiles are masked instead of single tokens, approximating
            the ratio (edge tiles may be truncated).
    """
    if not (0.0 < ratio < 1.0):
        raise MaskError(f"mask ratio must lie in the open interval (0, 1), got {ratio}")
    if min(t, gh, gw) < 1:
        raise MaskError(f"mask dims must be positive, got ({t}, {gh}, {gw})")
    mask = np.zeros((t, gh, gw), dtype=bool)
    gens = _slice_generators(int(seed), t)
    if window_hw is None:
        k = int(round(ratio * gh * gw))
        for ts, gen in enumerate(gens):
            flat = gen.choice(gh * gw, size=k, replace=False)
            mask[ts].reshape(-1)[flat] = True
    else:
        mh, mw = window_hw
        th, tw = -(-gh // mh), -(-gw // mw)
        k = int(round(ratio * th * tw))
        for ts, gen in enumerate(gens):
            tiles = gen.choice(th * tw, size=k, replace=False)
            for tile in tiles:
                i, j = divmod(int(tile), tw)
                mask[ts, i * mh:(i + 1) * mh, j * mw:(j + 1) * mw] = True
    total = int(mask.sum())
    return MaskSpec(mask=mask, seed=int(seed), ratio_actual=total / mask.size)


def all_false_mask(t: int, gh: int, gw: int, seed: int = 0) -> MaskSpec:
    """Degenerate no-op mask (used by visualization paths, never training)."""
    return MaskSpec(mask=np.zeros((t, gh, gw), dtype=bool), seed=int(seed), ratio_actual=0.0)


def apply_mask(grid: Tensor, mask: Tensor | np.ndarray, token: Tensor) -> Tensor:
    """Replace masked token positions with the learnable mask vector.

    Args:
        grid: [..., T, Gh, Gw, C] token grid.
        mask: boolean [T, Gh, Gw] (or with leading batch axes matching the
            grid's), True where the token is replaced.
        token: learnable vector [C].

    Token count and tensor shape are unchanged; gradient reaches ``token``
    only through masked positions.
    """
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(mask)
    mask = mask.to(device=grid.device)
    if mask.shape != grid.shape[-mask.ndim - 1:-1]:
        raise ShapeError(
            f"mask dims {tuple(mask.shape)} do not match grid dims "
            f"{tuple(grid.shape[-mask.ndim - 1:-1])}"
        )
    if token.shape != grid.shape[-1:]:
        raise ShapeError(
            f"mask token length {tuple(token.shape)} does not match grid channels "
            f"{grid.shape[-1]}"
        )
    return torch.where(mask[..., None], token.to(grid.dtype), grid)


def save_maskspec(path, spec: MaskSpec) -> None:
    """Write a MaskSpec as a compact little-endian bitmap file."""
    t, gh, gw = spec.dims
    header = _MAGIC + struct.pack("<HHIIqd", _VERSION, t, gh, gw, spec.seed, spec.ratio_actual)
    bits = np.packbits(spec.mask.reshape(-1))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(bits.tobytes())


def load_maskspec(path) -> MaskSpec:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise MaskError(f"not a mask bitmap file (bad magic {blob[:4]!r})")
    version, t, gh, gw, seed, ratio = struct.unpack_from("<HHIIqd", blob, 4)
    if version != _VERSION:
        raise MaskError(f"unsupported mask bitmap version {version}")
    n = t * gh * gw
    need = -(-n // 8)
    payload = blob[4 + struct.calcsize("<HHIIqd"):]
    if len(payload) != need:
        raise MaskError(f"mask payload truncated: expected {need} bytes, found {len(payload)}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=n)
    mask = bits.astype(bool).reshape(t, gh, gw)
    return MaskSpec(mask=mask, seed=seed, ratio_actual=ratio)
