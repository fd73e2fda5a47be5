"""Checkpoints: a plain-text manifest followed by a little-endian float64 payload.

Layout::

    VCTCKPT 1
    config_hash <hex>
    step <int>
    count <n>
    param <name> <shape> <offset> <nbytes>     (n lines; shape "2x3", "-" for scalars)
    end <payload bytes>
    <payload>

Byte accounting in the manifest is checked on load, so a truncated or padded
file is rejected before any array is built.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tensor

MAGIC = "VCTCKPT"
VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    config_hash: str = ""
    step: int = 0


def _shape_str(shape: tuple[int, ...]) -> str:
    return "x".join(str(s) for s in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(s) for s in text.split("x"))


def save_checkpoint(params: dict[str, Tensor], path, config_hash: str = "", step: int = 0) -> None:
    lines = [f"{MAGIC} {VERSION}", f"config_hash {config_hash or '-'}", f"step {int(step)}", f"count {len(params)}"]
    chunks, offset = [], 0
    for name, t in params.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"parameter name {name!r} contains whitespace")
        data = np.asarray(t.data, dtype=_LE_F64, order="C")  # ascontiguousarray would promote 0-d to 1-d
        lines.append(f"param {name} {_shape_str(data.shape)} {offset} {data.nbytes}")
        chunks.append(data.tobytes())
        offset += data.nbytes
    lines.append(f"end {offset}")
    header = ("\n".join(lines) + "\n").encode("ascii")
    Path(path).write_bytes(header + b"".join(chunks))


def read_manifest(blob: bytes) -> tuple[dict, list[tuple[str, tuple[int, ...], int, int]], int]:
    """Parse the text header; returns (fields, entries, payload start)."""
    pos = 0
    fields: dict[str, str] = {}
    entries = []

    def next_line() -> str:
        nonlocal pos
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise TruncatedCheckpointError("checkpoint manifest ends before its 'end' line")
        line = blob[pos:nl].decode("ascii", errors="replace")
        pos = nl + 1
        return line

    first = next_line().split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if first[1] != str(VERSION):
        raise CheckpointError(f"unsupported checkpoint version {first[1]} (expected {VERSION})")
    while True:
        parts = next_line().split()
        if not parts:
            raise CheckpointError("blank line in checkpoint manifest")
        if parts[0] == "param":
            if len(parts) != 5:
                raise CheckpointError(f"malformed param line: {' '.join(parts)}")
            entries.append((parts[1], _parse_shape(parts[2]), int(parts[3]), int(parts[4])))
        elif parts[0] == "end":
            fields["end"] = parts[1]
            break
        else:
            fields[parts[0]] = parts[1] if len(parts) > 1 else ""
    return fields, entries, pos


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    fields, entries, start = read_manifest(blob)
    if int(fields.get("count", -1)) != len(entries):
        raise CheckpointError(f"manifest lists {len(entries)} params but declares count {fields.get('count')}")
    declared = int(fields["end"])
    actual = len(blob) - start
    if actual < declared:
        raise TruncatedCheckpointError(f"payload has {actual} bytes, manifest declares {declared}")
    if actual > declared:
        raise CheckpointError(f"payload has {actual - declared} trailing bytes beyond the manifest")
    params: dict[str, Tensor] = {}
    expected_offset = 0
    for name, shape, offset, nbytes in entries:
        count = int(np.prod(shape)) if shape else 1
        if offset != expected_offset or nbytes != count * _LE_F64.itemsize:
            raise CheckpointError(f"inconsistent byte accounting for {name}")
        arr = np.frombuffer(blob, dtype=_LE_F64, count=count, offset=start + offset).reshape(shape)
        params[name] = Tensor(arr.astype(np.float64), requires_grad=not name.startswith("stats."))
        expected_offset += nbytes
    if expected_offset != declared:
        raise CheckpointError("param sizes do not add up to the declared payload")
    cfg_hash = fields.get("config_hash", "-")
    return Checkpoint(params, "" if cfg_hash == "-" else cfg_hash, int(fields.get("step", 0)))


def check_compatible(params: dict[str, Tensor], template: dict[str, Tensor], prefixes: tuple[str, ...] = ()) -> None:
    """Pre-flight check that every template parameter exists with the same shape.

    ``prefixes`` restricts the check to names starting with one of them.
    """
    for name, t in template.items():
        if prefixes and not name.startswith(prefixes):
            continue
        if name not in params:
            raise ShapeError(f"checkpoint lacks parameter {name} (expected shape {t.shape})")
        if params[name].shape != t.shape:
            raise ShapeError(f"parameter {name}: checkpoint shape {params[name].shape} != config shape {t.shape}")
