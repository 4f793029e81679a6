"""Binary PPM (P6) frame reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .vision import Frame

_WS = b" \t\n\r\v\f"


class PPMError(ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def _skip_ws(data, i):
    while i < len(data):
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c in _WS:
            i += 1
        else:
            break
    return i


def _read_int(data, i, what, path):
    i = _skip_ws(data, i)
    j = i
    while j < len(data) and data[j : j + 1].isdigit():
        j += 1
    if j == i:
        raise PPMError(path, i, f"expected {what}")
    return int(data[i:j]), j


def parse_ppm(data: bytes, path="<bytes>"):
    """Decode a P6 image into an ``(height, width, 3)`` uint8 array."""
    if data[:2] != b"P6":
        raise PPMError(path, 0, "missing P6 magic")
    i = 2
    if i >= len(data) or (data[i : i + 1] not in _WS and data[i : i + 1] != b"#"):
        raise PPMError(path, i, "expected whitespace after magic")
    width, i = _read_int(data, i, "width", path)
    height, i = _read_int(data, i, "height", path)
    maxval, i = _read_int(data, i, "maxval", path)
    if width < 1 or height < 1:
        raise PPMError(path, i, f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise PPMError(path, i, f"maxval {maxval} unsupported (need 255)")
    if i >= len(data) or data[i : i + 1] not in _WS:
        raise PPMError(path, i, "expected single whitespace before raster")
    i += 1
    need = width * height * 3
    if len(data) - i < need:
        raise PPMError(path, len(data), f"truncated raster: {len(data) - i} of {need} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=i).reshape(height, width, 3).copy()


def write_ppm(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def load_frames(directory):
    """All ``*.ppm`` files of ``directory`` in lexicographic order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise PPMError(directory, 0, "not a directory")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".ppm")
    if not paths:
        raise PPMError(directory, 0, "no frames")
    frames = []
    first = None
    for idx, p in enumerate(paths):
        pix = parse_ppm(p.read_bytes(), p)
        if first is None:
            first = (p, pix.shape)
        elif pix.shape != first[1]:
            raise PPMError(p, 0, f"size {pix.shape[1]}x{pix.shape[0]} differs from {first[0]} "
                                 f"({first[1][1]}x{first[1][0]})")
        frames.append(Frame(pix, idx))
    return frames, [p.name for p in paths]
