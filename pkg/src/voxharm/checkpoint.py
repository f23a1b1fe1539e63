"""Single-file checkpoint container.

Layout: magic ``MMHC``, version byte, three reserved zero bytes, a uint32
little-endian header length, a JSON header (metadata plus an ordered blob
table of names and shapes), then the named float32 little-endian parameter
blobs concatenated in table order.  Blob names are sorted so identical state
always produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMHC"
VERSION = 0x01


class CheckpointError(Exception):
    pass


def save_container(path: str | Path, meta: dict, blobs: dict[str, np.ndarray]) -> None:
    table = []
    payload = bytearray()
    for name in sorted(blobs):
        arr = np.asarray(blobs[name], dtype="<f4", order="C")
        table.append({"name": name, "shape": list(arr.shape)})
        payload += arr.tobytes()
    header = json.dumps({"meta": meta, "blobs": table}, sort_keys=True).encode("utf-8")
    out = MAGIC + bytes([VERSION, 0, 0, 0]) + struct.pack("<I", len(header)) + header + payload
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(out)


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container (bad magic)")
    if raw[4] != VERSION:
        raise CheckpointError(f"{path}: container version {raw[4]}, expected {VERSION}")
    (header_len,) = struct.unpack("<I", raw[8:12])
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[12:header_end].decode("utf-8"))
    blobs = {}
    offset = header_end
    for entry in header["blobs"]:
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = count * 4
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated blob {entry['name']!r}")
        blobs[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after blobs")
    return header["meta"], blobs
