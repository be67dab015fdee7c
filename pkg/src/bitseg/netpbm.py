"""Binary netpbm I/O, restricted to what the datasets need.

Two formats: P5 (grayscale) and P6 (RGB), maxval fixed at 255. The writer
emits the exact header ``P5\\n<width> <height>\\n255\\n`` followed by raw
samples, so files are byte-reproducible. The reader is more forgiving than
the writer, per netpbm convention: any whitespace between header tokens and
``#`` comments through end of line are accepted. Malformed input raises
FormatError carrying the byte offset where parsing stopped.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError

_WS = b" \t\r\n\v\f"


def write_pnm(path: str | os.PathLike, arr: np.ndarray) -> None:
    """Write a P5 (2-d) or P6 (3-d, last axis 3) file from uint8 samples."""
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        raise ValueError(f"netpbm samples must be uint8, got {a.dtype}")
    if a.ndim == 2:
        magic = b"P5"
        h, w = a.shape
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
        h, w = a.shape[:2]
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3) array, got {a.shape}")
    if h < 1 or w < 1:
        raise ValueError(f"image dimensions must be positive, got {w}x{h}")
    header = magic + b"\n" + f"{w} {h}".encode() + b"\n255\n"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(a).tobytes())


def _next_token(buf: bytes, pos: int) -> tuple[bytes, int, int]:
    """Scan past whitespace/comments; return (token, token_start, end)."""
    n = len(buf)
    while pos < n:
        c = buf[pos]
        if c in _WS:
            pos += 1
        elif c == 0x23:  # '#'
            while pos < n and buf[pos] != 0x0A:
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos] not in _WS and buf[pos] != 0x23:
        pos += 1
    return buf[start:pos], start, pos


def _header_int(buf: bytes, pos: int, what: str) -> tuple[int, int]:
    tok, start, end = _next_token(buf, pos)
    if not tok:
        raise FormatError(f"truncated header while reading {what}", offset=start)
    try:
        value = int(tok)
    except ValueError:
        raise FormatError(
            f"bad {what} token {tok!r} in header", offset=start
        ) from None
    return value, end


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a P5 or P6 file; uint8 array shaped (H, W) or (H, W, 3)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, start, pos = _next_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm magic {magic!r}", offset=start)
    channels = 1 if magic == b"P5" else 3
    width, pos = _header_int(buf, pos, "width")
    height, pos = _header_int(buf, pos, "height")
    maxval, pos = _header_int(buf, pos, "maxval")
    if width < 1 or height < 1:
        raise FormatError(f"bad image dimensions {width}x{height}", offset=pos)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (only 255)", offset=pos)
    if pos >= len(buf) or buf[pos] not in _WS:
        raise FormatError("missing whitespace after maxval", offset=pos)
    pos += 1  # exactly one whitespace byte separates header from samples
    need = width * height * channels
    have = len(buf) - pos
    if have < need:
        raise FormatError(
            f"truncated pixel data: expected {need} bytes, got {have}",
            offset=pos,
        )
    if have > need:
        raise FormatError(
            f"{have - need} trailing bytes after pixel data", offset=pos + need
        )
    flat = np.frombuffer(buf, dtype=np.uint8, offset=pos, count=need)
    if channels == 1:
        return flat.reshape(height, width).copy()
    return flat.reshape(height, width, 3).copy()
