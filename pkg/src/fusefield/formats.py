"""Deterministic binary and text file formats.

All binary containers share one layout so they stay byte-identical for
identical content (no timestamps, no compression):

* 8-byte magic tag, then a little-endian uint32 format version (always 1);
* uint32 entry count;
* per entry: name (uint32 length + UTF-8 bytes), dtype code (uint8:
  0 = float64, 1 = int64), rank (uint32), dims (uint64 each), then the raw
  C-order array bytes, little-endian.

Entries are written sorted by name.  Containers in use:

* ``FFCKPT\\n\\0`` — named parameter tensors (training checkpoints);
* ``FFVOLM\\n\\0`` — voxel volume snapshots (grid spec + channel data);
* ``FFFUSE\\n\\0`` — fusion state snapshots;
* ``FFFRMS\\n\\0`` — rendered frame archives.

Images use binary PPM (P6) / PGM (P5) with maxval 255.
"""

from __future__ import annotations

import csv
import struct

import numpy as np

from .errors import FormatError

VERSION = 1

CHECKPOINT_MAGIC = b"FFCKPT\n\x00"
VOLUME_MAGIC = b"FFVOLM\n\x00"
FUSION_MAGIC = b"FFFUSE\n\x00"
FRAMES_MAGIC = b"FFFRMS\n\x00"

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("int64"): 1}


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODES:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
    code = _CODES[arr.dtype]
    raw_name = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw_name)))
    fh.write(raw_name)
    fh.write(struct.pack("<BI", code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(_DTYPES[code], copy=False).tobytes())


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError("truncated container file")
    return raw


def _read_entry(fh):
    (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
    name = _read_exact(fh, name_len).decode("utf-8")
    code, rank = struct.unpack("<BI", _read_exact(fh, 5))
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read_exact(fh, count * 8)
    arr = np.frombuffer(raw, dtype=_DTYPES[code]).reshape(shape)
    return name, arr.astype(arr.dtype.newbyteorder("="), copy=True)


def save_arrays(path, magic: bytes, named: dict) -> None:
    """Write named arrays to a deterministic binary container."""
    if len(magic) != 8:
        raise FormatError("magic must be 8 bytes")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", VERSION, len(named)))
        for name in sorted(named):
            _write_entry(fh, name, np.asarray(named[name]))


def load_arrays(path, magic: bytes) -> dict:
    with open(path, "rb") as fh:
        tag = fh.read(8)
        if tag != magic:
            raise FormatError(
                f"bad magic {tag!r}; expected {magic!r}"
            )
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise FormatError(f"unsupported container version {version}")
        out = {}
        for _ in range(count):
            name, arr = _read_entry(fh)
            if name in out:
                raise FormatError(f"duplicate entry {name!r}")
            out[name] = arr
        if fh.read(1):
            raise FormatError("trailing bytes after container entries")
    return out


def save_checkpoint(path, named_tensors: dict) -> None:
    """Persist named float64 parameter arrays."""
    save_arrays(path, CHECKPOINT_MAGIC, named_tensors)


def load_checkpoint(path) -> dict:
    return load_arrays(path, CHECKPOINT_MAGIC)


# ---------------------------------------------------------------------------
# Images (PPM P6 for color, PGM P5 for grayscale), values quantized to 8 bit.


def save_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) array of [0, 1] floats as binary PPM."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FormatError("PPM needs an (H, W, 3) array")
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, offset = _pnm_header(raw, b"P6", 3)
    w, h = tokens
    pixels = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=offset)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def save_pgm(path, gray: np.ndarray, scale: float = 1.0) -> None:
    """Write an (H, W) array as binary PGM; values divided by ``scale`` then
    clipped to [0, 1]."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise FormatError("PGM needs an (H, W) array")
    data = np.clip(np.round(gray / scale * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, offset = _pnm_header(raw, b"P5", 1)
    w, h = tokens
    pixels = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=offset)
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def _pnm_header(raw: bytes, magic: bytes, channels: int):
    if not raw.startswith(magic):
        raise FormatError(f"not a {magic.decode()} file")
    fields = []
    pos = len(magic)
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError("only maxval 255 is supported")
    if len(raw) - pos < w * h * channels:
        raise FormatError("truncated image data")
    return (w, h), pos


# ---------------------------------------------------------------------------
# CSV reports.


def save_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def load_csv(path):
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise FormatError("empty CSV file")
    return rows[0], rows[1:]
