"""Binary checkpoint container with named parameter groups.

Layout (all integers little-endian):

    bytes 0..7    magic ``GLCBNDL1``
    bytes 8..15   uint64 header length in bytes
    header        UTF-8 JSON: {"meta": {...}, "groups": {group: [tensor...]}}
                  each tensor record: {"name", "dtype", "shape", "offset",
                  "nbytes", "crc32"}; offsets are relative to the start of
                  the blob section
    blobs         raw tensor bytes, concatenated in record order

Tensors round-trip bit-exactly (dtype + raw bytes), and each blob carries a
crc32 so corruption is detected at load time. Files are written to a
temporary name and renamed into place, so readers never observe a partial
bundle.
"""
from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

logger = logging.getLogger(__name__)

MAGIC = b"GLCBNDL1"


class CheckpointError(RuntimeError):
    """Raised for malformed bundles, bad checksums, or unknown groups."""


@dataclass
class CheckpointBundle:
    meta: dict
    groups: dict[str, dict[str, np.ndarray]]

    @property
    def group_names(self) -> tuple[str, ...]:
        return tuple(self.groups.keys())

    def state_dict_for(self, group: str) -> dict[str, torch.Tensor]:
        if group not in self.groups:
            raise CheckpointError(f"unknown group {group!r}; bundle has {self.group_names}")
        return {k: torch.from_numpy(v.copy()) for k, v in self.groups[group].items()}


def save_checkpoint(path: Path, groups: Mapping[str, nn.Module], meta: dict) -> Path:
    """Serialize module state dicts (parameters and buffers) by group name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    header: dict = {"meta": meta, "groups": {}}
    blobs: list[bytes] = []
    offset = 0
    for group_name, module in groups.items():
        records = []
        state = module.state_dict() if hasattr(module, "state_dict") else module
        for tensor_name, tensor in state.items():
            if torch.is_tensor(tensor):
                tensor = tensor.detach().contiguous().cpu().numpy()
            # copy(order="C") keeps 0-dim arrays 0-dim, unlike ascontiguousarray
            arr = np.asarray(tensor).copy(order="C")
            raw = arr.tobytes()
            records.append(
                {
                    "name": tensor_name,
                    "dtype": arr.dtype.str,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(raw),
                    "crc32": zlib.crc32(raw),
                }
            )
            blobs.append(raw)
            offset += len(raw)
        header["groups"][group_name] = records

    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Path, groups: set[str] | None = None) -> CheckpointBundle:
    """Read a bundle, verifying per-tensor checksums.

    ``groups`` restricts which groups are materialized; requesting a name
    the bundle does not contain is an error.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint bundle")
    header_len = int.from_bytes(data[len(MAGIC) : len(MAGIC) + 8], "little")
    header_start = len(MAGIC) + 8
    blob_start = header_start + header_len
    try:
        header = json.loads(data[header_start:blob_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header") from exc

    available = set(header["groups"])
    wanted = set(groups) if groups is not None else available
    unknown = wanted - available
    if unknown:
        raise CheckpointError(
            f"unknown group(s) {sorted(unknown)}; bundle has {sorted(available)}"
        )

    out: dict[str, dict[str, np.ndarray]] = {}
    for group_name in header["groups"]:
        if group_name not in wanted:
            continue
        tensors = {}
        for rec in header["groups"][group_name]:
            lo = blob_start + rec["offset"]
            hi = lo + rec["nbytes"]
            raw = data[lo:hi]
            if len(raw) != rec["nbytes"]:
                raise CheckpointError(f"{path} is truncated at tensor {rec['name']!r}")
            if zlib.crc32(raw) != rec["crc32"]:
                raise CheckpointError(f"checksum mismatch for tensor {rec['name']!r} in {path}")
            arr = np.frombuffer(raw, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"]).copy()
            tensors[rec["name"]] = arr
        out[group_name] = tensors
    return CheckpointBundle(meta=header["meta"], groups=out)


def load_groups_into(
    bundle: CheckpointBundle, modules: Mapping[str, nn.Module], names: set[str] | list[str]
) -> None:
    """Copy the named groups from a bundle into live modules, bit-exactly.

    Modules not named keep whatever initialization they already have.
    Tensors whose shape differs from the target (e.g. the first
    convolution when the band count changed between pretraining and
    fine-tuning) are skipped with a warning and keep their fresh
    initialization; a group where nothing fits at all is an error, since
    that means the architectures disagree, not just the input width.
    """
    for name in names:
        if name not in modules:
            raise CheckpointError(f"model has no parameter group {name!r}")
        state = bundle.state_dict_for(name)
        target = modules[name].state_dict()
        unknown = set(state) - set(target)
        if unknown:
            raise CheckpointError(
                f"group {name!r} does not fit the target module: unexpected tensors {sorted(unknown)}"
            )
        mismatched = [
            k for k, v in state.items() if tuple(v.shape) != tuple(target[k].shape)
        ]
        fitting_weights = [
            k for k, v in state.items() if k not in mismatched and v.ndim >= 1
        ]
        if mismatched and not fitting_weights:
            # nothing but 0-dim bookkeeping scalars fits: wrong architecture
            raise CheckpointError(
                f"group {name!r} does not fit the target module: no tensor shapes match"
            )
        if mismatched:
            logger.warning(
                "group %s: keeping fresh initialization for %s (shape mismatch, "
                "likely a different input band count)",
                name,
                ", ".join(sorted(mismatched)),
            )
            state = {k: v for k, v in state.items() if k not in mismatched}
        try:
            modules[name].load_state_dict(state, strict=not mismatched)
        except RuntimeError as exc:
            raise CheckpointError(f"group {name!r} does not fit the target module: {exc}") from exc
