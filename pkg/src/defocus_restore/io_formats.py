"""Readers and writers for on-disk artifacts.

16-bit (and 8-bit, widened) binary PGM for images, binary PPM for plots,
and comma-separated text with ``\\n`` line endings for tables.
"""

from __future__ import annotations

import csv
import math
import os

import numpy as np

from .errors import DimensionError, FormatError

_WHITESPACE = b" \t\n\r\v\f"


class _HeaderReader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def token(self):
        data, n = self.data, len(self.data)
        while self.pos < n:
            ch = data[self.pos:self.pos + 1]
            if ch == b"#":
                while self.pos < n and data[self.pos:self.pos + 1] not in (b"\n", b"\r"):
                    self.pos += 1
            elif ch in _WHITESPACE:
                self.pos += 1
            else:
                break
        start = self.pos
        while self.pos < n and data[self.pos:self.pos + 1] not in _WHITESPACE + b"#":
            self.pos += 1
        if start == self.pos:
            raise FormatError("unexpected end of header", start)
        return data[start:self.pos], start

    def integer(self, what):
        tok, offset = self.token()
        if not tok.isdigit():
            raise FormatError(f"bad {what} {tok!r}", offset)
        return int(tok)


def parse_pgm(data):
    """Decode the bytes of a binary PGM into a ``uint16`` array."""
    if data[:2] != b"P5":
        raise FormatError(f"bad magic {data[:2]!r}, expected b'P5'", 0)
    reader = _HeaderReader(data)
    reader.pos = 2
    if data[2:3] not in _WHITESPACE and data[2:3] != b"#":
        raise FormatError("missing whitespace after magic", 2)
    width = reader.integer("width")
    height = reader.integer("height")
    maxval_tok, max_offset = reader.token()
    if not maxval_tok.isdigit():
        raise FormatError(f"bad maxval {maxval_tok!r}", max_offset)
    maxval = int(maxval_tok)
    if maxval not in (255, 65535):
        raise FormatError(f"unsupported maxval {maxval}", max_offset)
    if width == 0 or height == 0:
        raise FormatError("image has zero size", max_offset)
    if reader.pos >= len(data) or data[reader.pos:reader.pos + 1] not in _WHITESPACE:
        raise FormatError("missing whitespace after maxval", reader.pos)
    start = reader.pos + 1
    depth = 1 if maxval == 255 else 2
    need = width * height * depth
    payload = data[start:start + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: {len(payload)} of {need} bytes", start + len(payload))
    if depth == 1:
        img = np.frombuffer(payload, dtype=np.uint8).astype(np.uint16) * np.uint16(257)
    else:
        img = np.frombuffer(payload, dtype=">u2").astype(np.uint16)
    return img.reshape(height, width)


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return parse_pgm(data)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc.detail}", exc.offset) from None


def encode_pgm(image):
    img = np.asarray(image)
    if img.ndim != 2 or img.size == 0:
        raise DimensionError(f"cannot write image of shape {img.shape}")
    if img.dtype != np.uint16:
        if np.any(img < 0) or np.any(img > 65535) or np.any(img != np.round(img)):
            raise DimensionError("PGM samples must be integers in [0, 65535]")
        img = img.astype(np.uint16)
    h, w = img.shape
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + img.astype(">u2").tobytes()


def write_pgm(image, path):
    """Write the canonical ``P5`` / maxval 65535 / big-endian form."""
    blob = encode_pgm(image)
    with open(path, "wb") as fh:
        fh.write(blob)


def write_ppm(rgb, path):
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.size == 0:
        raise DimensionError(f"expected an (H, W, 3) array, got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def format_number(value):
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path, header, rows):
    """Write a table; floats use their shortest round-trip representation."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow(header)
        for row in rows:
            writer.writerow([format_number(v) for v in row])


def read_csv(path):
    """Return ``(header, rows)`` with every field left as a string."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return [], []
    return rows[0], rows[1:]


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
