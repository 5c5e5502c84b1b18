"""Binary PGM (P5) / PPM (P6) reading and writing, maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pnm(path, image: np.ndarray) -> None:
    """Write ``uint8`` ``[H, W]`` as P5 or ``[H, W, 3]`` as P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise TypeError("PNM images must be uint8")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    h, w = img.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        out.append(data[start:pos])
    return out, pos + 1


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM type {magic!r}")
    if int(maxval) != 255:
        raise ValueError("only maxval 255 is supported")
    w, h = int(w), int(h)
    ch = 3 if magic == b"P6" else 1
    n = w * h * ch
    body = data[offset:offset + n]
    if len(body) != n:
        raise ValueError("truncated PNM body")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map ``[-1, 1]`` floats to ``[0, 255]`` bytes."""
    return np.clip(np.round((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) / 127.5 - 1.0


def chw_to_image(x: np.ndarray) -> np.ndarray:
    """``[C, H, W]`` floats in ``[-1, 1]`` to a writable uint8 image.

    One channel gives a grey image, three an RGB one; other channel counts
    keep the first channel.
    """
    x = np.asarray(x)
    if x.shape[0] == 3:
        return to_uint8(x.transpose(1, 2, 0))
    return to_uint8(x[0])


def image_to_chw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        return from_uint8(img)[None]
    return from_uint8(img).transpose(2, 0, 1)
