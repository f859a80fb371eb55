"""Portable binary array dumps and PPM image export.

The array container is deliberately tiny: a 4-byte magic, a dtype code,
the rank, the dims as u32 and the raw little-endian payload. It exists so
accumulated motion fields, residuals and feature maps can be handed to
other tools without a numpy dependency on the receiving end.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ARR1"

_DTYPE_CODES = {
    np.dtype(np.uint8): 0,
    np.dtype(np.int16): 1,
    np.dtype(np.int32): 2,
    np.dtype(np.float32): 3,
    np.dtype(np.float64): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ArrayFormatError(ValueError):
    """Raised when a dump cannot be parsed."""


def dump_array(arr: np.ndarray) -> bytes:
    """Serialize an array to the ARR1 container (little-endian, row-major)."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise ArrayFormatError(f"unsupported dtype {arr.dtype}")
    head = MAGIC + struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return head + dims + payload


def load_array(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ArrayFormatError("missing ARR1 magic")
    if len(blob) < 6:
        raise ArrayFormatError("truncated header")
    code, rank = struct.unpack("<BB", blob[4:6])
    if code not in _CODE_DTYPES:
        raise ArrayFormatError(f"unknown dtype code {code}")
    need = 6 + 4 * rank
    if len(blob) < need:
        raise ArrayFormatError("truncated dims")
    dims = struct.unpack(f"<{rank}I", blob[6:need])
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(dims)) if rank else 1
    payload = blob[need:]
    if len(payload) != count * dtype.itemsize:
        raise ArrayFormatError(
            f"payload size {len(payload)} != expected {count * dtype.itemsize}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(_CODE_DTYPES[code])


def write_array(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_array(arr))


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return load_array(fh.read())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an H x W x 3 uint8 image as binary PPM (P6)."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ArrayFormatError("PPM export expects HxWx3 uint8")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise ArrayFormatError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return data.reshape(h, w, 3).copy()


def motion_to_rgb(pi: np.ndarray, scale: float | None = None) -> np.ndarray:
    """False-color a HxWx2 motion field: dx -> red, dy -> green, |v| -> blue."""
    pi = pi.astype(np.float64)
    if scale is None:
        scale = max(1.0, float(np.abs(pi).max()))
    dx, dy = pi[..., 0], pi[..., 1]
    mag = np.hypot(dx, dy)
    rgb = np.stack(
        [
            128 + 127 * dx / scale,
            128 + 127 * dy / scale,
            255 * np.minimum(mag / scale, 1.0),
        ],
        axis=-1,
    )
    return np.clip(rgb, 0, 255).astype(np.uint8)


def residual_to_rgb(delta: np.ndarray, scale: float | None = None) -> np.ndarray:
    """False-color a HxWx3 signed residual around mid-gray."""
    delta = delta.astype(np.float64)
    if scale is None:
        scale = max(1.0, float(np.abs(delta).max()))
    rgb = 128 + 127 * delta / scale
    return np.clip(rgb, 0, 255).astype(np.uint8)
