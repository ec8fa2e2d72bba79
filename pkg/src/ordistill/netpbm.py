"""Binary netpbm codecs: PPM (P6) for dataset images, PGM (P5) for heatmaps."""

from __future__ import annotations

import numpy as np

from .errors import DataFormatError


def encode_ppm(pixels: np.ndarray) -> bytes:
    """pixels: uint8 array [H,W,3] -> P6 bytes, maxval 255."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise DataFormatError(f"encode_ppm wants uint8 [H,W,3], got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def encode_pgm(pixels: np.ndarray) -> bytes:
    """pixels: uint8 array [H,W] -> P5 bytes, maxval 255."""
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise DataFormatError(f"encode_pgm wants uint8 [H,W], got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def _parse_header(buf: bytes, magic: bytes, name: str):
    if not buf.startswith(magic):
        raise DataFormatError(f"{name}: bad magic {buf[:2]!r}")
    # header = magic + 3 whitespace-separated ints (width, height, maxval),
    # with optional '#' comment lines
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError(f"{name}: truncated header")
        try:
            fields.append(int(buf[start:pos]))
        except ValueError:
            raise DataFormatError(f"{name}: non-numeric header field {buf[start:pos]!r}")
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DataFormatError(f"{name}: unsupported maxval {maxval}")
    return w, h, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    w, h, pos = _parse_header(buf, b"P6", "decode_ppm")
    need = w * h * 3
    data = buf[pos:pos + need]
    if len(data) != need:
        raise DataFormatError(f"decode_ppm: expected {need} pixel bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


def decode_pgm(buf: bytes) -> np.ndarray:
    w, h, pos = _parse_header(buf, b"P5", "decode_pgm")
    need = w * h
    data = buf[pos:pos + need]
    if len(data) != need:
        raise DataFormatError(f"decode_pgm: expected {need} pixel bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)
