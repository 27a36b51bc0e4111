"""
    roomdistill.exporters
    ~~~~~~~~~~~~~~~~~~~~~

    Image files: 8-bit PNG for color, PFM (portable float map) for depth.

    :license: BSD, see LICENSE for more details.
"""

import os
import re

import numpy as np
from PIL import Image

_PFM_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+(-?[0-9.eE+-]+)\s")


def to_uint8(color: np.ndarray) -> np.ndarray:
    return np.round(np.clip(color, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, color: np.ndarray) -> None:
    """Write an ``(h, w, 3)`` color image in ``[0, 1]``."""
    Image.fromarray(to_uint8(color)).save(os.fspath(path), format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(os.fspath(path)) as image:
        return np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0


def write_pfm(path, image: np.ndarray) -> None:
    """Write an ``(h, w)`` or ``(h, w, 3)`` float image, little-endian,
    bottom row first.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        kind = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        kind = b"PF"
    else:
        raise ValueError(f"PFM holds (h, w) or (h, w, 3) images, got {image.shape}")
    height, width = image.shape[:2]
    with open(os.fspath(path), "wb") as f:
        f.write(kind + b"\n")
        f.write(f"{width} {height}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(image[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as f:
        data = f.read()
    match = _PFM_HEADER.match(data)
    if match is None:
        raise ValueError(f"{path} is not a PFM file")
    kind, width, height, scale = match.groups()
    width, height = int(width), int(height)
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if float(scale) < 0 else ">f4"
    values = np.frombuffer(data, dtype=dtype, offset=match.end())
    if values.size != width * height * channels:
        raise ValueError(
            f"{path} holds {values.size} values, expected {width * height * channels}"
        )
    shape = (height, width, 3) if channels == 3 else (height, width)
    return values.reshape(shape)[::-1].astype(np.float32)
