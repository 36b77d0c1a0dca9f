"""Binary PPM/PGM image IO, byte-deterministic for manifest hashing."""

from __future__ import annotations

import numpy as np


class ImageFormatError(ValueError):
    pass


def write_ppm(path, rgb):
    """rgb: (H, W, 3) float in [0,1] or uint8; written as binary P6."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"need an H x W x 3 image, got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = (np.clip(rgb, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb).tobytes())
    return path


def write_pgm(path, gray, maxval=None):
    """gray: (H, W) uint8 or uint16 (16-bit written big-endian per the format)."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"need an H x W image, got {gray.shape}")
    if gray.dtype not in (np.uint8, np.uint16):
        raise ValueError("pgm wants uint8 or uint16 data")
    if maxval is None:
        maxval = 255 if gray.dtype == np.uint8 else 65535
    h, w = gray.shape
    body = gray.astype(">u2") if gray.dtype == np.uint16 else gray
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(np.ascontiguousarray(body).tobytes())
    return path


def _read_header(fh, magic):
    if fh.read(2) != magic:
        raise ImageFormatError(f"not a {magic.decode()} file")
    vals = []
    while len(vals) < 3:
        tok = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":  # comment line
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = fh.read(1)
        if not tok:
            raise ImageFormatError("truncated header")
        vals.append(int(tok))
    return vals  # w, h, maxval


def read_ppm(path):
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P6")
        if maxval != 255:
            raise ImageFormatError("only 8-bit PPM supported")
        data = fh.read(w * h * 3)
    if len(data) != w * h * 3:
        raise ImageFormatError("truncated pixel data")
    return np.frombuffer(data, np.uint8).reshape(h, w, 3).copy()


def read_pgm(path):
    with open(path, "rb") as fh:
        w, h, maxval = _read_header(fh, b"P5")
        wide = maxval > 255
        n = w * h * (2 if wide else 1)
        data = fh.read(n)
    if len(data) != n:
        raise ImageFormatError("truncated pixel data")
    arr = np.frombuffer(data, ">u2" if wide else np.uint8).reshape(h, w)
    return arr.astype(np.uint16) if wide else arr.copy()
