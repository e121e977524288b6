"""Lattice-reshaping primitives: 3D patch partition and its inverse, linear
embedding, spatial patch merging/expanding, and the final expansion back to
the pixel lattice.

All functions and modules accept any number of leading batch axes; the
documented shapes refer to the trailing four (time, height, width, channels)
or (time, grid-h, grid-w, channels) axes.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn


class ShapeError(ValueError):
    """Raised when a tensor does not satisfy an operation's shape contract."""


def _trunc_normal_(tensor: Tensor, std: float = 0.02) -> Tensor:
    return nn.init.trunc_normal_(tensor, std=std, a=-2 * std, b=2 * std)


def patch_partition(cube: Tensor, patch: tuple[int, int, int]) -> Tensor:
    """Rearrange a cube [..., T, H, W, B] into patch tokens.

    Output is [..., T/pt, H/ph, W/pw, pt*ph*pw*B]; a bijective rearrangement
    (see :func:`patch_unpartition`). Token channels are ordered row-major over
    (dt, dh, dw, band).
    """
    pt, ph, pw = patch
    if cube.ndim < 4:
        raise ShapeError(f"cube must have at least 4 axes (T, H, W, B), got shape {tuple(cube.shape)}")
    *lead, t, h, w, b = cube.shape
    for axis, size, p in (("time", t, pt), ("height", h, ph), ("width", w, pw)):
        if p < 1 or size % p != 0:
            raise ShapeError(f"{axis} axis of size {size} is not divisible by patch extent {p}")
    x = cube.reshape(*lead, t // pt, pt, h // ph, ph, w // pw, pw, b)
    n = len(lead)
    # [..., T', Gh, Gw, pt, ph, pw, B]
    x = x.permute(*range(n), n, n + 2, n + 4, n + 1, n + 3, n + 5, n + 6)
    return x.reshape(*lead, t // pt, h // ph, w // pw, pt * ph * pw * b)


def patch_unpartition(grid: Tensor, patch: tuple[int, int, int], bands: int) -> Tensor:
    """Exact inverse of :func:`patch_partition`."""
    pt, ph, pw = patch
    *lead, t, gh, gw, c = grid.shape
    if c != pt * ph * pw * bands:
        raise ShapeError(
            f"token channels {c} do not factor as pt*ph*pw*B = {pt}*{ph}*{pw}*{bands}"
        )
    x = grid.reshape(*lead, t, gh, gw, pt, ph, pw, bands)
    n = len(lead)
    x = x.permute(*range(n), n, n + 3, n + 1, n + 4, n + 2, n + 5, n + 6)
    return x.reshape(*lead, t * pt, gh * ph, gw * pw, bands)


class LinearEmbed(nn.Module):
    """Tokenwise linear projection of raw partition tokens into C channels."""

    def __init__(self, in_channels: int, embed_dim: int):
        super().__init__()
        self.proj = nn.Linear(in_channels, embed_dim)
        _trunc_normal_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, grid: Tensor) -> Tensor:
        if grid.shape[-1] != self.proj.in_features:
            raise ShapeError(
                f"token channels {grid.shape[-1]} do not match embedding input "
                f"width {self.proj.in_features}"
            )
        return self.proj(grid)


def _gather_spatial_quads(grid: Tensor) -> Tensor:
    """Concatenate each token's 2x2 spatial neighborhood, row-major
    (0,0),(0,1),(1,0),(1,1), halving both spatial axes."""
    *lead, t, gh, gw, c = grid.shape
    if gh % 2 != 0 or gw % 2 != 0:
        raise ShapeError(f"spatial grid ({gh}, {gw}) must be even to merge")
    n = len(lead)
    x = grid.reshape(*lead, t, gh // 2, 2, gw // 2, 2, c)
    x = x.permute(*range(n), n, n + 1, n + 3, n + 2, n + 4, n + 5)
    return x.reshape(*lead, t, gh // 2, gw // 2, 4 * c)


class PatchMerge(nn.Module):
    """Downsampling: group 1x2x2 spatial neighbors, project 4C -> 2C.

    The temporal axis is untouched. An optional layer norm is applied to the
    concatenated 4C features before the projection.
    """

    def __init__(self, dim: int, norm: bool = True):
        super().__init__()
        self.dim = dim
        self.norm = nn.LayerNorm(4 * dim) if norm else None
        self.reduce = nn.Linear(4 * dim, 2 * dim, bias=False)
        _trunc_normal_(self.reduce.weight)

    def forward(self, grid: Tensor) -> Tensor:
        if grid.shape[-1] != self.dim:
            raise ShapeError(f"channels {grid.shape[-1]} do not match merge dim {self.dim}")
        x = _gather_spatial_quads(grid)
        if self.norm is not None:
            x = self.norm(x)
        return self.reduce(x)


class PatchExpand(nn.Module):
    """Upsampling: project C -> 2C, then spread each token's channels over a
    2x2 spatial block of C/2 channels (row-major block order, matching
    :class:`PatchMerge`). The temporal axis is untouched."""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ShapeError(f"expand dim {dim} must be even")
        self.dim = dim
        self.grow = nn.Linear(dim, 2 * dim, bias=False)
        _trunc_normal_(self.grow.weight)

    def forward(self, grid: Tensor) -> Tensor:
        if grid.shape[-1] != self.dim:
            raise ShapeError(f"channels {grid.shape[-1]} do not match expand dim {self.dim}")
        *lead, t, gh, gw, c = grid.shape
        x = self.grow(grid)
        n = len(lead)
        x = x.reshape(*lead, t, gh, gw, 2, 2, c // 2)
        x = x.permute(*range(n), n, n + 1, n + 3, n + 2, n + 4, n + 5)
        return x.reshape(*lead, t, 2 * gh, 2 * gw, c // 2)


class FinalPatchExpand(nn.Module):
    """Head expansion from the finest token lattice back to pixel resolution:
    one linear projection C -> ph*pw*C_out followed by pixel rearrangement."""

    def __init__(self, dim: int, patch_hw: tuple[int, int], out_channels: int):
        super().__init__()
        self.dim = dim
        self.patch_hw = tuple(patch_hw)
        self.out_channels = out_channels
        ph, pw = self.patch_hw
        self.proj = nn.Linear(dim, ph * pw * out_channels, bias=False)
        _trunc_normal_(self.proj.weight)

    def forward(self, grid: Tensor) -> Tensor:
        if grid.shape[-1] != self.dim:
            raise ShapeError(f"channels {grid.shape[-1]} do not match head dim {self.dim}")
        ph, pw = self.patch_hw
        *lead, t, gh, gw, _ = grid.shape
        x = self.proj(grid)
        n = len(lead)
        x = x.reshape(*lead, t, gh, gw, ph, pw, self.out_channels)
        x = x.permute(*range(n), n, n + 1, n + 3, n + 2, n + 4, n + 5)
        return x.reshape(*lead, t, gh * ph, gw * pw, self.out_channels)
