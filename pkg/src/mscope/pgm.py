"""Binary PGM ("P5") image files.

Exam images use maxval 65535 with big-endian 16-bit samples; lesion masks
use maxval 255 (0 background, 255 lesion).
"""

from __future__ import annotations

import numpy as np


def write_pgm16(path, img: np.ndarray):
    img = np.asarray(img)
    if img.dtype != np.uint16:
        raise ValueError(f"expected uint16 image, got {img.dtype}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(img.astype(">u2").tobytes())


def write_pgm8(path, img: np.ndarray):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {img.dtype}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read P5, returning uint16 (maxval > 255) or uint8."""
    with open(path, "rb") as f:
        blob = f.read()
    fields = []
    off = 0
    while len(fields) < 4:
        while off < len(blob) and blob[off:off + 1].isspace():
            off += 1
        if blob[off:off + 1] == b"#":
            while off < len(blob) and blob[off] != 0x0A:
                off += 1
            continue
        start = off
        while off < len(blob) and not blob[off:off + 1].isspace():
            off += 1
        fields.append(blob[start:off])
    off += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255:
        arr = np.frombuffer(blob, dtype=">u2", count=h * w, offset=off)
        return arr.reshape(h, w).astype(np.uint16)
    arr = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=off)
    return arr.reshape(h, w).copy()
