"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""
from __future__ import annotations

import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def encode_pnm(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise FormatError(f"expected uint8 data, got {arr.dtype}")
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise FormatError(f"unsupported array shape {arr.shape}")
    h, w = arr.shape[:2]
    return b"%s\n%d %d\n255\n" % (magic, w, h) + np.ascontiguousarray(arr).tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    fields = []
    pos = 0
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise FormatError("truncated header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise FormatError("non-numeric header field") from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(data) or data[pos:pos + 1] not in b" \t\r\n":
        raise FormatError("missing whitespace after header")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    size = w * h * channels
    body = data[pos:pos + size]
    if len(body) != size:
        raise FormatError(f"expected {size} data bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).copy()
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def _write_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_image(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as PPM, or float data in [0, 1] scaled to 8 bits."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = to_uint8(image)
    if image.ndim != 3:
        raise FormatError("PPM images must be (H, W, 3)")
    _write_atomic(path, encode_pnm(image))


def read_image(path) -> np.ndarray:
    arr = decode_pnm(Path(path).read_bytes())
    if arr.ndim != 3:
        raise FormatError(f"{path} is not a PPM image")
    return arr


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise FormatError("masks must be 2-D with ids in [0, 255]")
    _write_atomic(path, encode_pnm(mask.astype(np.uint8)))


def read_mask(path) -> np.ndarray:
    arr = decode_pnm(Path(path).read_bytes())
    if arr.ndim != 2:
        raise FormatError(f"{path} is not a PGM mask")
    return arr


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
