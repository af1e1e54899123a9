"""Binary netpbm I/O: P5 (grayscale / label maps) and P6 (RGB images), maxval 255."""

import numpy as np

from .errors import ParseError

_WHITESPACE = b" \t\n\r\v\f"


def _header(raw):
    """Return (magic, width, height, maxval, payload offset)."""
    if len(raw) < 2:
        raise ParseError("file too short for a netpbm magic number", len(raw))
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported netpbm magic {magic!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise ParseError("header ended early", pos)
        ch = raw[pos : pos + 1]
        if ch in _WHITESPACE:
            pos += 1
        elif ch == b"#":
            nl = raw.find(b"\n", pos)
            pos = len(raw) if nl < 0 else nl + 1
        elif ch.isdigit():
            start = pos
            while pos < len(raw) and raw[pos : pos + 1].isdigit():
                pos += 1
            fields.append((int(raw[start:pos]), start))
        else:
            raise ParseError(f"unexpected byte {ch!r} in header", pos)
    if pos >= len(raw) or raw[pos : pos + 1] not in _WHITESPACE:
        raise ParseError("expected a single whitespace byte after maxval", pos)
    (width, wpos), (height, hpos), (maxval, mpos) = fields
    if width < 1:
        raise ParseError("width must be positive", wpos)
    if height < 1:
        raise ParseError("height must be positive", hpos)
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}", mpos)
    return magic, width, height, maxval, pos + 1


def parse_pnm(raw):
    """Decode P5/P6 bytes into a uint8 array of shape (H, W) or (H, W, 3)."""
    magic, width, height, _, start = _header(raw)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = raw[start : start + need]
    if len(payload) < need:
        raise ParseError(
            f"payload truncated: expected {need} bytes, found {len(payload)}",
            start + len(payload),
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr[:, :, 0].copy() if channels == 1 else arr.copy()


def encode_pgm(gray):
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM data must be 2-D, got shape {gray.shape}")
    if gray.min(initial=0) < 0 or gray.max(initial=0) > 255:
        raise ValueError("PGM values must lie in [0, 255]")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode() + gray.astype(np.uint8).tobytes()


def quantize(image):
    """Map [0, 1] reals to bytes via round(255 v)."""
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def encode_ppm(image):
    q = quantize(image)
    if q.ndim != 3 or q.shape[2] != 3:
        raise ValueError(f"PPM data must be H x W x 3, got shape {q.shape}")
    h, w, _ = q.shape
    return f"P6\n{w} {h}\n255\n".encode() + q.tobytes()


def read_pgm(path):
    with open(path, "rb") as fh:
        arr = parse_pnm(fh.read())
    if arr.ndim != 2:
        raise ParseError(f"{path}: expected P5 grayscale, found P6", 0)
    return arr


def write_pgm(gray, path):
    with open(path, "wb") as fh:
        fh.write(encode_pgm(gray))


def read_ppm(path):
    """Read a P6 file as float64 RGB in [0, 1]."""
    with open(path, "rb") as fh:
        arr = parse_pnm(fh.read())
    if arr.ndim != 3:
        raise ParseError(f"{path}: expected P6 colour, found P5", 0)
    return arr.astype(np.float64) / 255.0


def write_ppm(image, path):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))
