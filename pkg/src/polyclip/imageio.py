"""Binary PGM (P5) and PPM (P6) image I/O, maxval 255.

Masks travel as PGM with 0 = background and 255 = foreground; images travel
as PPM with RGB in [0, 1] mapped linearly onto [0, 255].
"""

from __future__ import annotations

import os

import numpy as np

from .pathclip import PolygonMask


class ImageFormatError(ValueError):
    pass


def _read_header(data: bytes, magic: bytes, path: str) -> tuple[int, int, int]:
    if not data.startswith(magic):
        raise ImageFormatError(f"{path}: expected magic {magic.decode()}")
    fields: list[int] = []
    i = len(magic)
    while len(fields) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":  # comment line
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and data[i : i + 1].isdigit():
            i += 1
        if start == i:
            raise ImageFormatError(f"{path}: malformed header")
        fields.append(int(data[start:i]))
    if not data[i : i + 1].isspace():
        raise ImageFormatError(f"{path}: header not terminated by whitespace")
    i += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    return w, h, i


def write_pgm(path: str | os.PathLike, mask: PolygonMask) -> None:
    payload = (mask.cells.astype(np.uint8) * 255).tobytes()
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (mask.width, mask.height))
        f.write(payload)


def read_pgm(path: str | os.PathLike) -> PolygonMask:
    with open(path, "rb") as f:
        data = f.read()
    w, h, off = _read_header(data, b"P5", str(path))
    if len(data) - off < w * h:
        raise ImageFormatError(f"{path}: truncated pixel data")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off)
    return PolygonMask(width=w, height=h, cells=(raw.reshape(h, w) >= 128).astype(np.uint8))


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """image: (H, W, 3) float in [0, 1]; values are clipped before quantizing."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected (H, W, 3) image, got shape {img.shape}")
    quantized = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = quantized.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(quantized.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Returns (H, W, 3) float64 in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    w, h, off = _read_header(data, b"P6", str(path))
    if len(data) - off < w * h * 3:
        raise ImageFormatError(f"{path}: truncated pixel data")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=off)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0
