"""Single-file checkpoint archive: a JSON manifest (config plus named tensor
index) followed by raw little-endian IEEE-754 float32 tensor payloads.

Layout: 4-byte magic ``SWCK``, u32 little-endian manifest length, UTF-8 JSON
manifest, then the concatenated tensor payloads at the offsets the manifest
records (relative to the payload start). Tensor names are the models' stable
dot-separated state-dict paths.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .config import ArchOptions, HeadConfig, ModelConfig

_MAGIC = b"SWCK"
_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files."""


@dataclass
class Checkpoint:
    """In-memory checkpoint: config records, named float32 tensors, and free-
    form metadata (training step, task wiring, optimizer state names)."""

    config: ModelConfig
    tensors: dict[str, Tensor]
    arch: ArchOptions = field(default_factory=ArchOptions)
    head: HeadConfig | None = None
    meta: dict = field(default_factory=dict)

    def state_dict(self, prefix: str = "") -> dict[str, Tensor]:
        if not prefix:
            return dict(self.tensors)
        return {
            name[len(prefix):]: t for name, t in self.tensors.items()
            if name.startswith(prefix)
        }


def save_checkpoint(path, config: ModelConfig, tensors: dict[str, Tensor],
                    arch: ArchOptions | None = None, head: HeadConfig | None = None,
                    meta: dict | None = None) -> None:
    """Write a checkpoint archive. All tensors are stored as float32."""
    entries = []
    payloads = []
    offset = 0
    for name, tensor in tensors.items():
        arr = np.ascontiguousarray(
            tensor.detach().cpu().to(torch.float32).numpy(), dtype="<f4"
        )
        blob = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.shape),  # ascontiguousarray promotes 0-d to 1-d
            "offset": offset,
            "nbytes": len(blob),
        })
        payloads.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": _FORMAT_VERSION,
        "config": config.to_dict(),
        "arch": (arch or ArchOptions()).to_dict(),
        "head": head.to_dict() if head is not None else None,
        "meta": meta or {},
        "tensors": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != _MAGIC:
            raise CheckpointError(f"not a checkpoint file (bad magic {head[:4]!r})")
        (manifest_len,) = struct.unpack("<I", head[4:])
        manifest_blob = fh.read(manifest_len)
        if len(manifest_blob) != manifest_len:
            raise CheckpointError(
                f"checkpoint manifest truncated: expected {manifest_len} bytes, "
                f"found {len(manifest_blob)}"
            )
        try:
            manifest = json.loads(manifest_blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"checkpoint manifest is not valid JSON: {exc}") from exc
        payload = fh.read()
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    tensors: dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        blob = payload[start:start + nbytes]
        if len(blob) != nbytes:
            raise CheckpointError(
                f"tensor {entry['name']!r} truncated: expected {nbytes} bytes, "
                f"found {len(blob)}"
            )
        arr = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)
    head_doc = manifest.get("head")
    return Checkpoint(
        config=ModelConfig.from_dict(manifest["config"]),
        tensors=tensors,
        arch=ArchOptions.from_dict(manifest.get("arch", {})),
        head=HeadConfig.from_dict(head_doc) if head_doc else None,
        meta=manifest.get("meta", {}),
    )


def save_model_checkpoint(path, model, config: ModelConfig,
                          arch: ArchOptions | None = None, head: HeadConfig | None = None,
                          meta: dict | None = None,
                          extra_tensors: dict[str, Tensor] | None = None) -> None:
    """Convenience wrapper: persist ``model.state_dict()`` plus any extra
    tensors (e.g. optimizer moments under an ``optim.`` prefix)."""
    tensors = dict(model.state_dict())
    if extra_tensors:
        tensors.update(extra_tensors)
    save_checkpoint(path, config, tensors, arch=arch, head=head, meta=meta)
