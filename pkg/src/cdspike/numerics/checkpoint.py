"""Named-parameter checkpoints in a flat little-endian binary file.

Layout: magic ``CKP1`` (the version tag), u32 entry count, then per
entry u16 name length, UTF-8 name, u8 rank, u32 dims, float32 values.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CKP1"


class CheckpointError(ValueError):
    """Corrupt, truncated, or wrong-format checkpoint file."""


def save_checkpoint(path, params: dict):
    """Write name -> array (float-castable) mappings in dict order."""
    blobs = [MAGIC, struct.pack("<I", len(params))]
    for name, value in params.items():
        # ascontiguousarray would promote rank 0 to rank 1; keep the shape
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"parameter name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError("parameter rank exceeds 255")
        blobs.append(struct.pack("<H", len(raw)))
        blobs.append(raw)
        blobs.append(struct.pack("<B", arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(path) -> dict:
    """Read back name -> float32 ndarray in file order."""
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: missing {what}")
        piece = buf[pos:pos + n]
        pos += n
        return piece

    if take(4, "magic") != MAGIC:
        raise CheckpointError("not a CKP1 checkpoint")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"name length of entry {i}"))
        name = take(nlen, f"name of entry {i}").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        data = np.frombuffer(take(nbytes, f"values of {name}"), dtype="<f4")
        out[name] = data.reshape(dims).copy()
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last entry")
    return out
