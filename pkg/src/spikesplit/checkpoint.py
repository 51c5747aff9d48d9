"""Versioned binary checkpoints: JSON manifest plus raw little-endian float32.

Layout: magic "SPKC", u16 version, u32 manifest length, UTF-8 JSON manifest,
then each tensor's raw bytes in manifest order. Tensors are stored float32
little-endian, so save/load round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "checkpoint_from_network", "apply_checkpoint"]

MAGIC = b"SPKC"
VERSION = 1


@dataclass
class Checkpoint:
    """Named float32 tensors plus free-form metadata."""

    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.tensors.items():
            if arr.dtype != np.float32:
                raise ValueError(f"tensor {name!r} must be float32, got {arr.dtype}")


def checkpoint_from_network(network, metadata: dict | None = None) -> Checkpoint:
    tensors = {
        name: t.detach().cpu().to(torch.float32).numpy().copy()
        for name, t in network.named_tensors().items()
    }
    meta = {"architecture": network.arch.name, "arch_id": network.arch.arch_id}
    if network.split_point is not None:
        meta["split_point"] = network.split_point
        meta["compressed_shape"] = list(network.bottleneck.config.out_shape)
        meta["bottleneck_timesteps"] = network.bottleneck.config.timesteps
    if metadata:
        meta.update(metadata)
    return Checkpoint(tensors=tensors, metadata=meta)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = list(ckpt.tensors)
    manifest = {
        "version": VERSION,
        "metadata": ckpt.metadata,
        "tensors": [
            {"name": n, "shape": list(ckpt.tensors[n].shape)} for n in names
        ],
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<I", len(manifest_bytes)))
        fh.write(manifest_bytes)
        for n in names:
            arr = np.ascontiguousarray(ckpt.tensors[n], dtype="<f4")
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        tensors = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise ValueError(f"checkpoint truncated at tensor {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return Checkpoint(tensors=tensors, metadata=manifest["metadata"])


def apply_checkpoint(network, ckpt: Checkpoint) -> None:
    """Copy checkpoint tensors into a network with matching structure."""
    named = network.named_tensors()
    missing = sorted(set(named) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(named))
    if missing or extra:
        raise ValueError(
            f"checkpoint does not match network (missing {missing[:3]}, extra {extra[:3]})"
        )
    with torch.no_grad():
        for name, t in named.items():
            src = torch.from_numpy(ckpt.tensors[name]).to(t.dtype)
            if tuple(src.shape) != tuple(t.shape):
                raise ValueError(
                    f"tensor {name!r}: checkpoint shape {tuple(src.shape)} vs "
                    f"network shape {tuple(t.shape)}"
                )
            t.copy_(src)
