"""Binary PPM (P6) and PGM (P5) image files, maxval 255."""

from __future__ import annotations

import numpy as np

from .errors import ParseError


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary P6."""
    h, w, c = image.shape
    assert c == 3
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm(path: str, image: np.ndarray) -> None:
    """Write an (H, W) float image in [0, 1] as binary P5."""
    h, w = image.shape
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_pnm(path: str, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(magic):
        raise ParseError(f"{path}: expected {magic.decode()} header")
    # header = magic, width, height, maxval as whitespace-separated tokens
    tokens, pos = [], len(magic)
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ParseError(f"{path}: bad header tokens {tokens}") from None
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}")
    expected = w * h * channels
    body = raw[pos:pos + expected]
    if len(body) != expected:
        raise ParseError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    return arr.reshape((h, w, channels)) if channels == 3 else arr.reshape((h, w))


def read_ppm(path: str) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path: str) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)
