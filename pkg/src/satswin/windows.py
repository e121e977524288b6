"""3D (shifted-)window multi-head self-attention and the transformer block
that wraps it.

Grids are [..., T, Gh, Gw, C]. Window partitioning zero-pads each axis on the
high side up to a window multiple; padded tokens are excluded from attention
and cropped again on reverse, so partitioning is total. The additive boundary
mask uses -1e4 as the -inf surrogate in the working precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .patching import ShapeError, _trunc_normal_

NEG_INF = -1e4


@dataclass
class WindowSet:
    """Windowed tokens plus the provenance needed to invert the partition.

    data: [batch * num_windows, Mt*Mh*Mw, C] (batch axis absent for rank-4
    input grids). Token order within a window is row-major (t, then h, then
    w); windows themselves are row-major over the padded grid.
    """

    data: Tensor
    batch_shape: tuple[int, ...]
    grid_dims: tuple[int, int, int]
    padded_dims: tuple[int, int, int]
    window: tuple[int, int, int]
    shift: tuple[int, int, int] = (0, 0, 0)

    @property
    def num_windows(self) -> int:
        t, h, w = self.padded_dims
        mt, mh, mw = self.window
        return (t // mt) * (h // mh) * (w // mw)


def padded_dims(dims: tuple[int, int, int], window: tuple[int, int, int]) -> tuple[int, int, int]:
    """High-side zero-pad target: each axis rounded up to a window multiple."""
    return tuple(-(-d // m) * m for d, m in zip(dims, window))


def attention_score_elements(dims: tuple[int, int, int], window: tuple[int, int, int]) -> int:
    """Elements of the per-head attention score tensor a forward pass
    allocates for a grid of ``dims``: num_windows * volume^2. Linear in token
    count at fixed window size."""
    pt, ph, pw = padded_dims(dims, window)
    mt, mh, mw = window
    vol = mt * mh * mw
    n_windows = (pt // mt) * (ph // mh) * (pw // mw)
    return n_windows * vol * vol


def _pad_grid(grid: Tensor, window: tuple[int, int, int]) -> Tensor:
    t, h, w = grid.shape[-4:-1]
    pt, ph, pw = padded_dims((t, h, w), window)
    if (pt, ph, pw) == (t, h, w):
        return grid
    return F.pad(grid, (0, 0, 0, pw - w, 0, ph - h, 0, pt - t))


def window_partition(grid: Tensor, window: tuple[int, int, int]) -> WindowSet:
    """Split a token grid into non-overlapping 3D windows.

    Pads to window multiples first, so the operation is total for any grid.
    """
    if grid.ndim < 4:
        raise ShapeError(f"grid must have at least 4 axes, got shape {tuple(grid.shape)}")
    *lead, t, h, w, c = grid.shape
    mt, mh, mw = window
    x = _pad_grid(grid.reshape(-1, t, h, w, c), window)
    n, pt, ph, pw, _ = x.shape
    x = x.reshape(n, pt // mt, mt, ph // mh, mh, pw // mw, mw, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    data = x.reshape(-1, mt * mh * mw, c)
    if not lead:
        pass  # data already [num_windows, vol, C]
    return WindowSet(
        data=data,
        batch_shape=tuple(lead),
        grid_dims=(t, h, w),
        padded_dims=(pt, ph, pw),
        window=(mt, mh, mw),
    )


def window_reverse(ws: WindowSet) -> Tensor:
    """Exact inverse of :func:`window_partition`; crops any padding."""
    mt, mh, mw = ws.window
    pt, ph, pw = ws.padded_dims
    t, h, w = ws.grid_dims
    vol = mt * mh * mw
    n = int(math.prod(ws.batch_shape)) if ws.batch_shape else 1
    expect = n * ws.num_windows
    if ws.data.ndim != 3 or ws.data.shape[0] != expect or ws.data.shape[1] != vol:
        raise ShapeError(
            f"window data shape {tuple(ws.data.shape)} does not match provenance "
            f"({expect} windows of {vol} tokens)"
        )
    c = ws.data.shape[-1]
    x = ws.data.reshape(n, pt // mt, ph // mh, pw // mw, mt, mh, mw, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    x = x.reshape(n, pt, ph, pw, c)
    x = x[:, :t, :h, :w, :]
    return x.reshape(*ws.batch_shape, t, h, w, c)


def cyclic_shift(grid: Tensor, offsets: tuple[int, int, int]) -> Tensor:
    """Toroidal roll of the (T, Gh, Gw) axes; content moves toward higher
    indices for positive offsets."""
    if not any(offsets):
        return grid
    return torch.roll(grid, shifts=tuple(offsets), dims=(-4, -3, -2))


def cyclic_unshift(grid: Tensor, offsets: tuple[int, int, int]) -> Tensor:
    """Inverse of :func:`cyclic_shift` with the same offsets."""
    return cyclic_shift(grid, tuple(-o for o in offsets))


def _region_labels(size: int, window: int, shift: int) -> Tensor:
    """Pre-shift region labels along one axis, in the rolled frame."""
    labels = torch.zeros(size, dtype=torch.long)
    if shift > 0:
        labels[max(size - window, 0):] = 1
        labels[max(size - shift, 0):] = 2
    return labels


def build_boundary_mask(dims: tuple[int, int, int], window: tuple[int, int, int],
                        shift: tuple[int, int, int], dtype: torch.dtype = torch.float32,
                        device=None) -> Tensor:
    """Additive attention mask [num_windows, vol, vol] suppressing pairs of
    tokens that came from different pre-shift regions.

    ``dims`` are the (unpadded) grid dims; the mask matches the windows of the
    padded grid. Zero shift yields an all-zero mask.
    """
    mt, mh, mw = window
    st, sh, sw = shift
    if not (st < mt and sh < mh and sw < mw):
        raise ShapeError(f"shift {shift} must be component-wise smaller than window {window}")
    pt, ph, pw = padded_dims(dims, window)
    ids = (
        _region_labels(pt, mt, st)[:, None, None] * 9
        + _region_labels(ph, mh, sh)[None, :, None] * 3
        + _region_labels(pw, mw, sw)[None, None, :]
    ).to(device)
    ws = window_partition(ids[..., None].to(dtype), window)
    ids_w = ws.data[..., 0]  # [num_windows, vol]
    mask = torch.zeros(ids_w.shape[0], ids_w.shape[1], ids_w.shape[1], dtype=dtype, device=device)
    mask.masked_fill_(ids_w[:, :, None] != ids_w[:, None, :], NEG_INF)
    return mask


def _padding_validity_mask(dims: tuple[int, int, int], window: tuple[int, int, int],
                           shift: tuple[int, int, int], dtype: torch.dtype,
                           device=None) -> Tensor | None:
    """Additive mask excluding zero-padded positions as attention targets, or
    None when the grid needs no padding."""
    if padded_dims(dims, window) == tuple(dims):
        return None
    valid = torch.ones(*dims, 1, dtype=dtype, device=device)
    valid = _pad_grid(valid, window)
    valid = cyclic_shift(valid, tuple(-s for s in shift))
    vw = window_partition(valid, window).data[..., 0]  # [num_windows, vol]
    vol = vw.shape[1]
    return ((1.0 - vw)[:, None, :] * NEG_INF).expand(-1, vol, -1).contiguous()


def combined_attention_mask(dims: tuple[int, int, int], window: tuple[int, int, int],
                            shift: tuple[int, int, int], dtype: torch.dtype,
                            device=None) -> Tensor | None:
    """Boundary mask plus padding-validity mask, or None when both vanish."""
    mask = None
    if any(shift):
        mask = build_boundary_mask(dims, window, shift, dtype=dtype, device=device)
    pad_mask = _padding_validity_mask(dims, window, shift, dtype=dtype, device=device)
    if pad_mask is not None:
        mask = pad_mask if mask is None else mask + pad_mask
    return mask


def _relative_position_index(window: tuple[int, int, int]) -> Tensor:
    mt, mh, mw = window
    coords = torch.stack(
        torch.meshgrid(torch.arange(mt), torch.arange(mh), torch.arange(mw), indexing="ij")
    ).flatten(1)  # [3, vol]
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.permute(1, 2, 0).contiguous()
    rel[..., 0] += mt - 1
    rel[..., 1] += mh - 1
    rel[..., 2] += mw - 1
    return rel[..., 0] * (2 * mh - 1) * (2 * mw - 1) + rel[..., 1] * (2 * mw - 1) + rel[..., 2]


class WindowAttention(nn.Module):
    """Multi-head self-attention within 3D windows, with a learned relative
    position bias over (time, height, width) offsets.

    Args:
        dim: token channel width C; must equal num_heads * head_dim.
        num_heads: attention head count.
        window: (Mt, Mh, Mw) window extents the bias table is sized for.
    """

    def __init__(self, dim: int, num_heads: int, window: tuple[int, int, int]):
        super().__init__()
        if dim % num_heads != 0:
            raise ShapeError(f"channels {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.window = tuple(window)
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        mt, mh, mw = self.window
        self.relative_bias_table = nn.Parameter(
            torch.zeros((2 * mt - 1) * (2 * mh - 1) * (2 * mw - 1), num_heads)
        )
        _trunc_normal_(self.relative_bias_table)
        self.register_buffer("relative_index", _relative_position_index(self.window),
                             persistent=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        for lin in (self.qkv, self.proj):
            _trunc_normal_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        """Attend within each window.

        Args:
            x: [num_windows_total, N, C] windowed tokens.
            mask: optional additive mask [num_windows, N, N]; the leading axis
                of ``x`` must be a multiple of num_windows.
        """
        b, n, c = x.shape
        if c != self.dim:
            raise ShapeError(f"channels {c} do not match attention dim {self.dim}")
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_bias_table[self.relative_index[:n, :n].reshape(-1)]
        bias = bias.reshape(n, n, self.num_heads).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b // nw, nw, self.num_heads, n, n) + mask[None, :, None]
            attn = attn.view(b, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class BlockMlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)
        for lin in (self.fc1, self.fc2):
            _trunc_normal_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def default_shift(window: tuple[int, int, int], temporal_extent: int) -> tuple[int, int, int]:
    """Canonical shift: floor(M/2) per axis, zero along time when the window
    already spans the full temporal extent."""
    mt, mh, mw = window
    st = 0 if mt >= temporal_extent else mt // 2
    return (st, mh // 2, mw // 2)


class SwinBlock(nn.Module):
    """Pre-norm residual block: windowed MSA (optionally shifted) + MLP.

    forward shape contract: [..., T, Gh, Gw, C] -> same shape.
    """

    def __init__(self, dim: int, num_heads: int, window: tuple[int, int, int],
                 shift: tuple[int, int, int] = (0, 0, 0), mlp_ratio: float = 4.0):
        super().__init__()
        self.window = tuple(window)
        self.shift = tuple(shift)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, self.window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = BlockMlp(dim, int(round(dim * mlp_ratio)))

    @property
    def shifted(self) -> bool:
        return any(self.shift)

    def forward(self, grid: Tensor) -> Tensor:
        dims = tuple(grid.shape[-4:-1])
        x = self.norm1(grid)
        if self.shifted:
            x = cyclic_shift(x, tuple(-s for s in self.shift))
        ws = window_partition(x, self.window)
        mask = combined_attention_mask(dims, self.window, self.shift,
                                       dtype=x.dtype, device=x.device)
        attended = self.attn(ws.data, mask)
        x = window_reverse(replace(ws, data=attended, shift=self.shift))
        if self.shifted:
            x = cyclic_unshift(x, tuple(-s for s in self.shift))
        x = grid + x
        return x + self.mlp(self.norm2(x))
