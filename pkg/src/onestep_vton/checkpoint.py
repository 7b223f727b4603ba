"""Versioned checkpoint container shared by both network stages.

A checkpoint is a zip archive with two members: ``manifest.json`` describing
the format version, a config echo, free-form metadata and the tensor
directory (name, shape, byte offset), and ``tensors.bin`` holding every
tensor back to back as little-endian float32 in row-major order. Archive
timestamps are pinned so identical state produces identical bytes.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

FORMAT_NAME = "onestep-vton-checkpoint"
FORMAT_VERSION = 1

_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    config: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def named_subset(self, prefix: str) -> dict[str, torch.Tensor]:
        cut = len(prefix)
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor],
                    config: dict | None = None, extra: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(
            tensors[name].detach().cpu().numpy().astype("<f4")
        )
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float32",
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": config or {},
        "extra": extra or {},
        "tensors": entries,
    }
    payload = json.dumps(manifest, indent=2, sort_keys=True)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", _EPOCH), payload)
        zf.writestr(zipfile.ZipInfo("tensors.bin", _EPOCH), b"".join(blobs))


def load_checkpoint(path: str | Path) -> Checkpoint:
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        blob = zf.read("tensors.bin")
    if manifest.get("format") != FORMAT_NAME:
        raise ValueError(f"{path} is not a {FORMAT_NAME} file")
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint version {manifest.get('version')} "
            f"(this build reads {FORMAT_VERSION})"
        )
    tensors = {}
    for entry in manifest["tensors"]:
        start = entry["offset"]
        raw = np.frombuffer(blob, dtype="<f4", count=entry["nbytes"] // 4, offset=start)
        tensors[entry["name"]] = torch.from_numpy(
            raw.reshape(entry["shape"]).copy()
        )
    return Checkpoint(tensors=tensors, config=manifest.get("config", {}),
                      extra=manifest.get("extra", {}))


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """Floating-point state of a module, optionally name-prefixed."""
    return {
        prefix + k: v
        for k, v in module.state_dict().items()
        if v.dtype.is_floating_point
    }


def load_into_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    state = module.state_dict()
    missing = [k for k, v in state.items() if v.dtype.is_floating_point and k not in tensors]
    if missing:
        raise ValueError(f"checkpoint is missing tensors: {', '.join(sorted(missing)[:5])}")
    with torch.no_grad():
        for k, v in tensors.items():
            if k in state:
                state[k].copy_(v.to(state[k].dtype))
