"""Minimal PGM (P5 binary / P2 ASCII) reader and writer."""
from __future__ import annotations

import numpy as np


class PGMError(ValueError):
    pass


def write_pgm(path, image, maxval: int = 255, binary: bool = True) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise PGMError("PGM images are 2-D")
    if img.size and (img.min() < 0 or img.max() > maxval):
        raise PGMError(f"pixel values must lie in [0, {maxval}]")
    if binary and maxval > 255:
        raise PGMError("only 8-bit P5 is supported")
    h, w = img.shape
    header = f"{'P5' if binary else 'P2'}\n{w} {h}\n{maxval}\n".encode("ascii")
    if binary:
        payload = img.astype(np.uint8).tobytes()
    else:
        lines = [" ".join(str(int(v)) for v in row) for row in img]
        payload = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + payload)


def _header_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens; returns tokens and payload offset."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMError("truncated PGM header")
        tokens.append(data[start:pos])
    if pos >= n or not data[pos:pos + 1].isspace():
        raise PGMError("missing whitespace after maxval")
    return tokens, pos + 1


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Returns (image of shape (height, width), maxval)."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _header_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P2"):
        raise PGMError(f"unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMError("non-integer PGM header field") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise PGMError("bad PGM dimensions or maxval")
    if magic == b"P5":
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        nbytes = w * h * np.dtype(dtype).itemsize
        if len(data) - offset < nbytes:
            raise PGMError("truncated P5 payload")
        img = np.frombuffer(data, dtype=dtype, count=w * h, offset=offset)
    else:
        vals = data[offset:].split()
        if len(vals) < w * h:
            raise PGMError("truncated P2 payload")
        img = np.array([int(v) for v in vals[:w * h]])
    img = img.astype(np.int64).reshape(h, w)
    if img.max() > maxval:
        raise PGMError("pixel exceeds maxval")
    return img, maxval


def write_prob_map(path, p) -> None:
    """Probabilities in [0, 1] as an 8-bit P5 image, value round(255 p)."""
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    write_pgm(path, np.floor(255.0 * p + 0.5).astype(np.int64))
