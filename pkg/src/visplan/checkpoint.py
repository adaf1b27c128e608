"""Self-describing binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"VPCKPT01"
    8 bytes   u64 header length H
    H bytes   UTF-8 JSON header (sorted keys)
    ...       array payloads, C order, at the offsets listed in the header
    4 bytes   u32 CRC-32 of every preceding byte

The header carries the model and training configs, the codebook and colour
map, the seed, phase bookkeeping, RNG states, optimizer scalars and an
``arrays`` table of ``{name, dtype, shape, offset, nbytes}`` entries. Offsets
are relative to the first payload byte.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"VPCKPT01"


class CorruptCheckpoint(ValueError):
    pass


@dataclass
class Checkpoint:
    header: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    table, blobs, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
        blob = arr.astype(dt, copy=False).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = dict(ckpt.header, arrays=table)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 20 or data[:8] != MAGIC:
        raise CorruptCheckpoint("bad magic or truncated file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptCheckpoint("CRC mismatch")
    (hlen,) = struct.unpack("<Q", body[8:16])
    try:
        header = json.loads(body[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from None
    payload = body[16 + hlen:]
    arrays = {}
    for entry in header.pop("arrays"):
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise CorruptCheckpoint(f"array {entry['name']} runs past end of file")
        arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(header, arrays)


def save(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
