"""Raster and report I/O.

FLR layout: b"FLR1", then width, height, channels as little-endian u32, then
width*height*channels little-endian float32 values, row-major, channels
interleaved. PNGs are 8-bit sRGB; everything in memory is linear RGB.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

FLR_MAGIC = b"FLR1"


def write_flr(path, arr) -> None:
    a = np.asarray(arr)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError("FLR rasters are (H, W) or (H, W, C)")
    h, w, c = a.shape
    with open(path, "wb") as fh:
        fh.write(FLR_MAGIC)
        fh.write(struct.pack("<III", w, h, c))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_flr(path, squeeze: bool = True) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FLR_MAGIC:
        raise ValueError(f"{path}: not an FLR1 file")
    w, h, c = struct.unpack("<III", data[4:16])
    expected = 16 + 4 * w * h * c
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float32)
    if squeeze and c == 1:
        arr = arr[..., 0]
    return arr


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def write_png(path, linear_rgb) -> None:
    a = np.asarray(linear_rgb, dtype=np.float64)
    u8 = np.round(linear_to_srgb(a) * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        mode = "RGB" if im.mode not in ("L", "I", "F") else "L"
        u8 = np.asarray(im.convert(mode), dtype=np.float64)
    return srgb_to_linear(u8 / 255.0)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".flr":
        return read_flr(path).astype(np.float64)
    return read_png(path)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
