"""Raster file formats: binary PPM for color images, FMAP for float maps.

FMAP layout: ``b"FMAP"``, little-endian u32 width, height, channels, then
``width*height*channels`` little-endian float32 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FMAP_MAGIC = b"FMAP"


class FormatError(ValueError):
    pass


def write_fmap(path, values: np.ndarray) -> None:
    arr = np.asarray(values)
    if arr.ndim == 2:
        h, w, c = arr.shape[0], arr.shape[1], 1
    elif arr.ndim == 3:
        h, w, c = arr.shape
    else:
        raise ValueError("FMAP values must be (H, W) or (H, W, C)")
    header = FMAP_MAGIC + struct.pack("<III", w, h, c)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_fmap(path) -> np.ndarray:
    """Read an FMAP file; single-channel maps come back as ``(H, W)``."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FMAP_MAGIC:
        raise FormatError(f"{path}: not an FMAP file")
    w, h, c = struct.unpack("<III", data[4:16])
    expected = 16 + 4 * w * h * c
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float32)
    return arr[:, :, 0] if c == 1 else arr


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a P6 PPM (maxval 255) as a uint8 ``(H, W, 3)`` array."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise FormatError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    raw = np.frombuffer(data, dtype=np.uint8, offset=pos)
    if raw.size != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return raw.reshape(h, w, 3).copy()
