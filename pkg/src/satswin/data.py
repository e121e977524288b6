"""Chip container format (SSWC), dataset manifests, seasonal-triplet
sampling, synthetic chip generators, and small imaging utilities.

SSWC is a self-describing little-endian binary container for one time-series
chip: header (magic "SSWC", version, dims, dtype code, band names, optional
label descriptor), then the row-major [T, H, W, B] payload, then the optional
[T_lab, H, W] label payload. All generators run on counter-based Philox
streams, so identical seeds give byte-identical files on any platform.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SSWC"
VERSION = 1

# payload dtype codes
DTYPE_UINT8 = 0
DTYPE_FLOAT32 = 1
DTYPE_INT32 = 2

_DTYPES = {DTYPE_UINT8: "<u1", DTYPE_FLOAT32: "<f4", DTYPE_INT32: "<i4"}

DEFAULT_BANDS = ("B2", "B3", "B4", "B8A", "B11", "B12")

SYNTH_KINDS = ("textured-fields", "moving-cloud", "two-class-blobs", "density-ramp")


class FormatError(ValueError):
    """Raised for malformed SSWC files or manifests."""


@dataclass
class ChipData:
    """One decoded chip: reflectance cube in [0, 1] plus optional labels."""

    cube: np.ndarray  # float32 [T, H, W, B]
    band_names: tuple[str, ...]
    labels: np.ndarray | None = None  # [T_lab, H, W], int64 or float32
    source: str | None = None


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def write_chip(path, cube: np.ndarray, band_names=None, labels=None,
               store_uint8: bool = False) -> None:
    """Write one chip. ``cube`` is [T, H, W, B] float in [0, 1] (stored as
    float32, or quantized to 8-bit when ``store_uint8``) or uint8 already."""
    cube = np.asarray(cube)
    if cube.ndim != 4:
        raise FormatError(f"cube must be rank 4 [T, H, W, B], got shape {cube.shape}")
    t, h, w, b = cube.shape
    if cube.dtype == np.uint8:
        payload, code = cube, DTYPE_UINT8
    elif store_uint8:
        payload = np.round(np.clip(cube, 0.0, 1.0) * 255.0).astype(np.uint8)
        code = DTYPE_UINT8
    else:
        payload = cube.astype("<f4")
        if not np.isfinite(payload).all():
            raise FormatError("cube contains non-finite values")
        if payload.min() < 0.0 or payload.max() > 1.0:
            raise FormatError("float cube values must lie in [0, 1]")
        code = DTYPE_FLOAT32
    names = tuple(band_names) if band_names is not None else tuple(
        DEFAULT_BANDS[i] if i < len(DEFAULT_BANDS) else f"B{i}" for i in range(b)
    )
    if len(names) != b:
        raise FormatError(f"{len(names)} band names for {b} bands")

    header = bytearray()
    header += MAGIC
    header += struct.pack("<HHIIH", VERSION, t, h, w, b)
    header += struct.pack("<B", code)
    header += struct.pack("<H", len(names))
    for name in names:
        header += _pack_str(name)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.ndim != 3 or labels.shape[1:] != (h, w):
            raise FormatError(
                f"labels must be [T_lab, {h}, {w}], got shape {labels.shape}"
            )
        if np.issubdtype(labels.dtype, np.floating):
            lab_payload, lab_code = labels.astype("<f4"), DTYPE_FLOAT32
        elif labels.dtype == np.uint8 or (labels.max(initial=0) < 256 and labels.min(initial=0) >= 0):
            lab_payload, lab_code = labels.astype("<u1"), DTYPE_UINT8
        else:
            lab_payload, lab_code = labels.astype("<i4"), DTYPE_INT32
        header += struct.pack("<BHB", 1, labels.shape[0], lab_code)
    else:
        header += struct.pack("<B", 0)

    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(np.ascontiguousarray(payload).tobytes())
        if labels is not None:
            fh.write(np.ascontiguousarray(lab_payload).tobytes())


def read_chip(path, expected_bands: int | None = None) -> ChipData:
    """Read one chip; 8-bit payloads are scaled to [0, 1] by /255, float
    payloads are validated to lie in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: not an SSWC file (magic {blob[:4]!r})")
    off = 4
    try:
        version, t, h, w, b = struct.unpack_from("<HHIIH", blob, off)
        off += struct.calcsize("<HHIIH")
        (code,) = struct.unpack_from("<B", blob, off)
        off += 1
        (n_names,) = struct.unpack_from("<H", blob, off)
        off += 2
        names = []
        for _ in range(n_names):
            (ln,) = struct.unpack_from("<H", blob, off)
            off += 2
            names.append(blob[off:off + ln].decode("utf-8"))
            off += ln
        (has_labels,) = struct.unpack_from("<B", blob, off)
        off += 1
        if has_labels:
            t_lab, lab_code = struct.unpack_from("<HB", blob, off)
            off += 3
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    if version != VERSION:
        raise FormatError(f"{path}: unsupported SSWC version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if len(names) != b:
        raise FormatError(f"{path}: corrupt header ({len(names)} band names for {b} bands)")
    if expected_bands is not None and b != expected_bands:
        raise FormatError(f"{path}: chip has {b} bands, expected {expected_bands}")

    itemsize = np.dtype(_DTYPES[code]).itemsize
    need = t * h * w * b * itemsize
    payload = blob[off:off + need]
    if len(payload) != need:
        raise FormatError(
            f"{path}: truncated payload, expected {need} bytes, found {len(payload)}"
        )
    cube = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(t, h, w, b)
    if code == DTYPE_UINT8:
        cube = cube.astype(np.float32) / 255.0
    else:
        cube = cube.astype(np.float32)
        if not np.isfinite(cube).all():
            raise FormatError(f"{path}: non-finite values in float payload")
        if cube.min() < 0.0 or cube.max() > 1.0:
            raise FormatError(f"{path}: float payload outside [0, 1]")
    off += need

    labels = None
    if has_labels:
        lab_item = np.dtype(_DTYPES[lab_code]).itemsize
        lab_need = t_lab * h * w * lab_item
        lab_payload = blob[off:off + lab_need]
        if len(lab_payload) != lab_need:
            raise FormatError(
                f"{path}: truncated label payload, expected {lab_need} bytes, "
                f"found {len(lab_payload)}"
            )
        labels = np.frombuffer(lab_payload, dtype=_DTYPES[lab_code]).reshape(t_lab, h, w)
        labels = labels.astype(np.float32 if lab_code == DTYPE_FLOAT32 else np.int64)
    return ChipData(cube=cube, band_names=tuple(names), labels=labels, source=str(path))


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------

_SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    path: str
    split: str = "train"
    task: str = "pretrain"
    meta: dict = field(default_factory=dict)


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def paths(self, split: str | None = None) -> list[Path]:
        return [self.root / e.path for e in self.select(split).entries]

    def select(self, split: str | None = None) -> "Manifest":
        if split is None:
            return self
        return Manifest([e for e in self.entries if e.split == split], self.root)

    def filter_meta(self, key: str, max_value: float) -> "Manifest":
        """Manifest-level filter hook on a per-chip metadata score (chips
        missing the score are kept)."""
        kept = [e for e in self.entries if float(e.meta.get(key, 0.0)) <= max_value]
        return Manifest(kept, self.root)

    def splits(self) -> set[str]:
        return {e.split for e in self.entries}


def save_manifest(path, entries: list[ManifestEntry]) -> None:
    doc = {
        "version": 1,
        "chips": [
            {"path": e.path, "split": e.split, "task": e.task,
             **({"meta": e.meta} if e.meta else {})}
            for e in entries
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_manifest(path, require_exists: bool = True) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
    entries = []
    for i, rec in enumerate(doc.get("chips", [])):
        split = rec.get("split", "train")
        if split not in _SPLITS:
            raise FormatError(f"{path}: chip {i} has unknown split {split!r} "
                              f"(expected one of {_SPLITS})")
        entries.append(ManifestEntry(path=rec["path"], split=split,
                                     task=rec.get("task", "pretrain"),
                                     meta=rec.get("meta", {})))
    manifest = Manifest(entries, root=path.parent)
    if require_exists:
        missing = [str(p) for p in manifest.paths() if not p.exists()]
        if missing:
            raise FormatError(f"{path}: unresolvable chip paths: {', '.join(missing)}")
    return manifest


def load_chips(manifest: Manifest, split: str | None = None,
               expected_bands: int | None = None) -> list[ChipData]:
    return [read_chip(p, expected_bands) for p in manifest.paths(split)]


# ---------------------------------------------------------------------------
# Seasonal sampling and geometry
# ---------------------------------------------------------------------------

def seasonal_triplet(frames: np.ndarray, seed: int) -> np.ndarray:
    """Pick a uniformly random start season and the two cyclically following
    frames from a [F, H, W, B] stack (F >= 3). Deterministic per seed."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] < 3:
        raise ValueError(
            f"need at least 3 seasonal frames [F, H, W, B], got shape {frames.shape}"
        )
    f = frames.shape[0]
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    start = int(gen.integers(0, f))
    idx = [(start + i) % f for i in range(3)]
    return frames[idx]


@dataclass
class CropPadRecord:
    crop_top: int = 0
    crop_left: int = 0
    pad_bottom: int = 0
    pad_right: int = 0


def crop_and_pad(cube: np.ndarray, target_h: int, target_w: int) -> tuple[np.ndarray, CropPadRecord]:
    """Center-crop axes that are too large, zero-pad the high side of axes
    that are too small; returns the applied offsets."""
    cube = np.asarray(cube)
    t, h, w, b = cube.shape
    rec = CropPadRecord()
    if h > target_h:
        rec.crop_top = (h - target_h) // 2
        cube = cube[:, rec.crop_top:rec.crop_top + target_h]
    if w > target_w:
        rec.crop_left = (w - target_w) // 2
        cube = cube[:, :, rec.crop_left:rec.crop_left + target_w]
    h, w = cube.shape[1:3]
    if h < target_h or w < target_w:
        rec.pad_bottom = target_h - h
        rec.pad_right = target_w - w
        cube = np.pad(cube, ((0, 0), (0, rec.pad_bottom), (0, rec.pad_right), (0, 0)))
    return cube, rec


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------

def _upsample_bilinear(coarse: np.ndarray, scale: int, h: int, w: int) -> np.ndarray:
    yy = np.arange(h) / scale
    xx = np.arange(w) / scale
    y0 = np.floor(yy).astype(int)
    x0 = np.floor(xx).astype(int)
    fy = (yy - y0)[:, None]
    fx = (xx - x0)[None, :]
    y1 = np.minimum(y0 + 1, coarse.shape[0] - 1)
    x1 = np.minimum(x0 + 1, coarse.shape[1] - 1)
    return (coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
            + coarse[np.ix_(y1, x0)] * fy * (1 - fx)
            + coarse[np.ix_(y0, x1)] * (1 - fy) * fx
            + coarse[np.ix_(y1, x1)] * fy * fx)


def _smooth_field(gen: np.random.Generator, h: int, w: int,
                  scales=(4, 8, 16, 32)) -> np.ndarray:
    """Multiscale value noise, zero mean and unit variance."""
    out = np.zeros((h, w))
    for s in scales:
        if s >= min(h, w):
            continue
        coarse = gen.standard_normal((h // s + 2, w // s + 2))
        out += np.sqrt(float(s)) * _upsample_bilinear(coarse, s, h, w)
    std = out.std()
    if std > 0:
        out = (out - out.mean()) / std
    return out


def _squash(x: np.ndarray, lo: float = 0.02, hi: float = 0.98) -> np.ndarray:
    """Map roughly unit-scale fields into [lo, hi] within [0, 1]."""
    return lo + (hi - lo) * (0.5 * (np.tanh(0.8 * x) + 1.0))


def _band_mixer(gen: np.random.Generator, bands: int, latents: int) -> np.ndarray:
    mix = gen.normal(size=(bands, latents))
    return mix / np.sqrt((mix ** 2).sum(axis=1, keepdims=True))


def _textured_cube(gen: np.random.Generator, t: int, h: int, w: int, b: int,
                   temporal_drift: float = 0.2, fine_noise: float = 0.05) -> np.ndarray:
    """Band-correlated multiscale texture; static structure plus optional
    per-timestep smooth drift and a static fine-grained component."""
    latents = np.stack([_smooth_field(gen, h, w) for _ in range(3)])
    fine = gen.standard_normal((h, w)) * fine_noise
    mix = _band_mixer(gen, b, 3)
    base = np.einsum("bl,lhw->bhw", mix, latents) + fine[None]
    cube = np.empty((t, h, w, b), dtype=np.float32)
    for ts in range(t):
        drift = temporal_drift * _smooth_field(gen, h, w, scales=(16, 32)) if temporal_drift else 0.0
        cube[ts] = np.moveaxis(_squash(base + drift), 0, -1)
    return cube


def _occluder_mask(gen: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Near-hard elliptical blob in [0, 1] (edge about one pixel wide),
    radius about a fifth of the extent."""
    cy = gen.uniform(0.3 * h, 0.7 * h)
    cx = gen.uniform(0.3 * w, 0.7 * w)
    ry = gen.uniform(0.14 * h, 0.22 * h)
    rx = gen.uniform(0.14 * w, 0.22 * w)
    yy, xx = np.mgrid[0:h, 0:w]
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    return np.clip(12.0 * (1.0 - d), 0.0, 1.0)


def generate_chip(kind: str, dims: tuple[int, int, int, int], seed: int) -> ChipData:
    """Deterministically synthesize one chip of the requested kind.

    Kinds:
        textured-fields: band-correlated multiscale texture (pretraining).
        moving-cloud: static base scene occluded by a bright blob at T0 only;
            the occluder footprint is stored as a binary label plane, and
            occluded T0 pixels equal the base scene visible at T1, T2.
        two-class-blobs: thresholded smooth field as a 2-class segmentation
            label, class signature mixed into the bands.
        density-ramp: continuous [0, 100] per-pixel regression target.
    """
    t, h, w, b = dims
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    if kind == "textured-fields":
        cube = _textured_cube(gen, t, h, w, b)
        return ChipData(cube=cube, band_names=_default_names(b))
    if kind == "moving-cloud":
        if t < 2:
            raise ValueError("moving-cloud chips need at least 2 timesteps")
        cube = _textured_cube(gen, t, h, w, b, temporal_drift=0.0, fine_noise=0.35)
        m = _occluder_mask(gen, h, w)
        cloud = np.clip(0.88 + 0.08 * _smooth_field(gen, h, w, scales=(4, 8)), 0.0, 1.0)
        cube[0] = cube[0] * (1.0 - m[..., None]) + (cloud * m)[..., None]
        cube = np.clip(cube, 0.0, 1.0)
        labels = (m > 0.5)[None].astype(np.uint8)
        return ChipData(cube=cube.astype(np.float32), band_names=_default_names(b), labels=labels)
    if kind == "two-class-blobs":
        f = _smooth_field(gen, h, w, scales=(8, 16, 32))
        label = (f > np.median(f)).astype(np.uint8)
        tex = np.stack([_smooth_field(gen, h, w) for _ in range(b)])
        signal = 0.22 * (2.0 * label - 1.0)
        sign = np.where(np.arange(b) % 2 == 0, 1.0, -1.0)
        cube = np.empty((t, h, w, b), dtype=np.float32)
        for ts in range(t):
            noise = 0.02 * gen.standard_normal((h, w, b))
            body = 0.5 + sign[None, None, :] * signal[..., None] + 0.12 * np.moveaxis(tex, 0, -1)
            cube[ts] = np.clip(body + noise, 0.0, 1.0)
        return ChipData(cube=cube, band_names=_default_names(b), labels=label[None])
    if kind == "density-ramp":
        f = _smooth_field(gen, h, w, scales=(8, 16, 32))
        density = 100.0 * (0.5 * (np.tanh(0.7 * f) + 1.0))
        tex = np.stack([_smooth_field(gen, h, w) for _ in range(b)])
        cube = np.empty((t, h, w, b), dtype=np.float32)
        for ts in range(t):
            noise = 0.02 * gen.standard_normal((h, w, b))
            body = 0.2 + 0.6 * (density[..., None] / 100.0) + 0.1 * np.moveaxis(tex, 0, -1)
            cube[ts] = np.clip(body + noise, 0.0, 1.0)
        return ChipData(cube=cube, band_names=_default_names(b),
                        labels=density[None].astype(np.float32))
    raise ValueError(f"unknown synthetic kind {kind!r}; valid kinds: {', '.join(SYNTH_KINDS)}")


def _default_names(b: int) -> tuple[str, ...]:
    return tuple(DEFAULT_BANDS[i] if i < len(DEFAULT_BANDS) else f"B{i}" for i in range(b))


def synth_dataset(kind: str, dims: tuple[int, int, int, int], count: int, seed: int,
                  out_dir, split: str = "train") -> list[Path]:
    """Generate ``count`` chips plus a manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(int(seed)).spawn(count)
    paths, entries = [], []
    for i, child in enumerate(children):
        chip = generate_chip(kind, dims, int(child.generate_state(1)[0]))
        name = f"{kind}-{i:04d}.sswc"
        write_chip(out_dir / name, chip.cube, chip.band_names, chip.labels)
        paths.append(out_dir / name)
        entries.append(ManifestEntry(path=name, split=split, task=kind))
    save_manifest(out_dir / "manifest.json", entries)
    return paths


# ---------------------------------------------------------------------------
# Imaging helpers
# ---------------------------------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an 8-bit binary portable pixmap (P6)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[-1] != 3 or rgb.dtype != np.uint8:
        raise FormatError(f"expected uint8 [H, W, 3] image, got {rgb.dtype} {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise FormatError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)


def rgb_composite(cube: np.ndarray, band_names, rgb_bands=("B4", "B3", "B2")) -> np.ndarray:
    """Per-timestep uint8 RGB renders of the requested bands, [T, H, W, 3]."""
    names = list(band_names)
    try:
        idx = [names.index(b) for b in rgb_bands]
    except ValueError:
        idx = list(range(min(3, len(names))))
        while len(idx) < 3:
            idx.append(idx[-1])
    sel = np.clip(np.asarray(cube)[..., idx], 0.0, 1.0)
    return np.round(sel * 255.0).astype(np.uint8)


def bilinear_fill(image: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Fill unknown pixels of [H, W, C] by per-slice linear interpolation from
    the known pixels (nearest-neighbor fallback outside the convex hull)."""
    from scipy.interpolate import griddata

    image = np.asarray(image, dtype=np.float64)
    known = np.asarray(known, dtype=bool)
    h, w = known.shape
    if known.all():
        return image.copy()
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.stack([yy[known], xx[known]], axis=1)
    query = np.stack([yy[~known], xx[~known]], axis=1)
    out = image.copy()
    for c in range(image.shape[-1]):
        vals = image[..., c][known]
        filled = griddata(pts, vals, query, method="linear")
        nan = np.isnan(filled)
        if nan.any():
            filled[nan] = griddata(pts, vals, query[nan], method="nearest")
        out[..., c][~known] = filled
    return out
