"""Binary tensor snapshots.

Layout of one snapshot (all little-endian)::

    uint32[4]   shape, left-padded with 1s to four entries
    float64[*]  data in row-major order

A weights file is a concatenation of snapshots; the accompanying JSON
manifest lists each tensor's name, true shape and byte offset.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

HEADER = struct.Struct("<4I")


def _shape4(shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    if len(shape) > 4:
        raise ValueError(f"snapshots hold at most 4 dimensions, got {shape}")
    return (1,) * (4 - len(shape)) + tuple(int(s) for s in shape)


def encode(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f8")
    return HEADER.pack(*_shape4(arr.shape)) + arr.tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Read one snapshot at ``offset``; return it (4-d) and the next offset."""
    if len(buf) - offset < HEADER.size:
        raise ValueError(f"truncated snapshot header at byte {offset}")
    shape = HEADER.unpack_from(buf, offset)
    count = int(np.prod(shape))
    start = offset + HEADER.size
    end = start + 8 * count
    if end > len(buf):
        raise ValueError(f"truncated snapshot data at byte {start}: need {8 * count} bytes")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=start).reshape(shape)
    return arr.astype(np.float64), end


def save(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    arr, _ = decode(Path(path).read_bytes())
    return arr


def save_state(weights_path, manifest_path, state: dict[str, np.ndarray]) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in state.items():
        blob = encode(arr)
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    Path(weights_path).write_bytes(b"".join(chunks))
    Path(manifest_path).write_text(json.dumps({"format": "sacseg-snapshot-v1", "tensors": entries},
                                              indent=2))


def load_state(weights_path, manifest_path) -> dict[str, np.ndarray]:
    buf = Path(weights_path).read_bytes()
    manifest = json.loads(Path(manifest_path).read_text())
    state = {}
    for entry in manifest["tensors"]:
        arr, _ = decode(buf, entry["offset"])
        state[entry["name"]] = arr.reshape(entry["shape"])
    return state
