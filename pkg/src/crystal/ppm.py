"""Binary PPM (P6, maxval 255) reading and writing."""
from __future__ import annotations

import os

import numpy as np

from .errors import CrystalError


class PPMError(CrystalError, ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


def to_bytes(image: np.ndarray) -> bytes:
    H, W, C = image.shape
    if C != 3:
        raise ValueError("PPM needs 3 channels")
    pix = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P6\n{W} {H}\n255\n".encode("ascii") + pix.tobytes()


def _header_fields(buf: bytes):
    """Yield (token, offset) for the four header fields; stop after the single whitespace."""
    pos = 0
    n = len(buf)
    for _ in range(4):
        while pos < n:
            c = buf[pos : pos + 1]
            if c == b"#":
                while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PPMError("truncated header", start)
        yield buf[start:pos], start
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise PPMError("missing whitespace after maxval", pos)
    yield None, pos + 1


def from_bytes(buf: bytes) -> np.ndarray:
    fields = _header_fields(buf)
    magic, off = next(fields)
    if magic != b"P6":
        raise PPMError(f"bad magic {magic!r}, expected b'P6'", off)
    dims = []
    for label in ("width", "height", "maxval"):
        tok, off = next(fields)
        if not tok.isdigit() or int(tok) <= 0:
            raise PPMError(f"bad {label} {tok!r}", off)
        dims.append(int(tok))
    W, H, maxval = dims
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}", off)
    _, data_start = next(fields)
    need = W * H * 3
    if len(buf) - data_start < need:
        raise PPMError(f"pixel data truncated: need {need} bytes", data_start)
    pix = np.frombuffer(buf, dtype=np.uint8, count=need, offset=data_start)
    return pix.reshape(H, W, 3).astype(np.float64) / 255.0


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(image))


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return from_bytes(f.read())
