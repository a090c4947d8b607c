"""Binary checkpoint format.

Layout (little-endian): 4-byte magic, uint32 version, uint64 header
length, UTF-8 JSON header, then raw float64 array payloads in header
order. The header carries the model-builder metadata, the array table,
layer specs, and the optional search artifacts (architecture logits are
stored as arrays; the assignment and loss tolerance ride in the header).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Network, build_from_meta
from .quantizers import QuantCandidate

MAGIC = b"MQCP"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """A deserialized checkpoint: rebuilt model plus search artifacts."""

    model: Network
    arch_logits: list[np.ndarray] | None
    assignment: list[int] | None
    candidates: list[QuantCandidate] | None
    theta: float | None


def save(
    path,
    model: Network,
    arch_logits=None,
    assignment: list[int] | None = None,
    candidates: list[QuantCandidate] | None = None,
    theta: float | None = None,
) -> None:
    arrays: dict[str, np.ndarray] = dict(model.state_dict())
    if arch_logits is not None:
        for i, row in enumerate(arch_logits):
            data = row.data if hasattr(row, "data") else row
            arrays[f"arch.{i}"] = np.asarray(data, dtype=np.float64)

    table = [[name, list(arrays[name].shape)] for name in arrays]
    header = {
        "model_meta": model.meta,
        "layer_specs": [
            {"name": s.name, "kind": s.kind, "weight_shape": list(s.weight_shape),
             "params": s.params}
            for s in model.layer_specs()
        ],
        "arrays": table,
        "n_arch_rows": 0 if arch_logits is None else len(arch_logits),
        "assignment": assignment,
        "candidates": None if candidates is None
        else [c.to_dict() for c in candidates],
        "theta": theta,
    }
    header_bytes = json.dumps(header).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name, _ in table:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CorruptCheckpointError(f"file too short ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"bad magic {raw[:4]!r}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise VersionMismatchError(
            f"checkpoint version {version}, this build reads {VERSION}"
        )
    header_len = struct.unpack("<Q", raw[8:16])[0]
    if len(raw) < 16 + header_len:
        raise CorruptCheckpointError("truncated header")
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"unreadable header: {e}") from e

    offset = 16 + header_len
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CorruptCheckpointError(
                f"truncated payload at array {name!r}"
            )
        arrays[name] = (
            np.frombuffer(raw[offset:offset + nbytes], dtype="<f8")
            .reshape(shape)
            .copy()
        )
        offset += nbytes
    if offset != len(raw):
        raise CorruptCheckpointError(
            f"{len(raw) - offset} unexpected trailing bytes"
        )

    model = build_from_meta(header["model_meta"])
    n_arch = header.get("n_arch_rows", 0)
    arch = [arrays.pop(f"arch.{i}") for i in range(n_arch)] or None
    model.load_state_dict(arrays)

    candidates = header.get("candidates")
    return Checkpoint(
        model=model,
        arch_logits=arch,
        assignment=header.get("assignment"),
        candidates=None if candidates is None
        else [QuantCandidate.from_dict(d) for d in candidates],
        theta=header.get("theta"),
    )
