"""Binary artifact formats.

TSR1 tensors: magic `TSR1`, u8 dtype tag (0 = f32, 1 = f64), u32 rank,
rank x u32 extents, then row-major little-endian scalars.

CKPT checkpoints: magic `CKPT`, u32 entry count, then per entry a u16 name
length, the UTF-8 name, and an embedded TSR1 tensor. Round-trips are
bitwise exact.

PGM (16-bit, big-endian per the netpbm spec) and PPM (8-bit color) cover
heatmap and difference-map export.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

TSR_MAGIC = b"TSR1"
CKPT_MAGIC = b"CKPT"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def tsr_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_FOR:
        raise ValueError(f"TSR1 stores f32/f64 only, got {arr.dtype}")
    head = TSR_MAGIC + struct.pack("<BI", _TAG_FOR[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def write_tsr(path, arr: np.ndarray):
    Path(path).write_bytes(tsr_bytes(arr))


def tsr_from_bytes(buf: bytes, offset: int = 0):
    """Parse one TSR1 record; returns (array, next_offset)."""
    if buf[offset : offset + 4] != TSR_MAGIC:
        raise ValueError("not a TSR1 record")
    tag, rank = struct.unpack_from("<BI", buf, offset + 4)
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"unknown TSR1 dtype tag {tag}")
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 9)
    dt = _DTYPE_TAGS[tag]
    start = offset + 9 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    end = start + count * dt.itemsize
    arr = np.frombuffer(buf[start:end], dtype=dt).reshape(shape)
    return arr.astype(dt.newbyteorder("=")), end


def read_tsr(path) -> np.ndarray:
    arr, _ = tsr_from_bytes(Path(path).read_bytes())
    return arr


def write_ckpt(path, named):
    """named: mapping name -> ndarray (or a ParamStore state_dict)."""
    items = list(named.items())
    blob = CKPT_MAGIC + struct.pack("<I", len(items))
    for name, arr in items:
        raw = name.encode("utf-8")
        blob += struct.pack("<H", len(raw)) + raw + tsr_bytes(arr)
    Path(path).write_bytes(blob)


def read_ckpt(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError("not a CKPT file")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        arr, off = tsr_from_bytes(buf, off)
        out[name] = arr
    return out


def write_pgm16(path, grid: np.ndarray):
    """Max-normalized 16-bit grayscale PGM (binary P5, big-endian)."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"PGM needs a 2-D grid, got {grid.shape}")
    peak = grid.max()
    scaled = np.zeros_like(grid) if peak <= 0 else grid / peak
    pix = np.round(scaled * 65535).astype(">u2")
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + pix.tobytes())


def write_ppm(path, rgb: np.ndarray):
    """8-bit binary P6 color image from an (H, W, 3) uint8 array."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3), got {rgb.shape}")
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.tobytes())


# difference-map legend: true positives yellow, false negatives blue,
# false positives red, background black
DIFF_COLORS = {
    "tp": (255, 255, 0),
    "fn": (0, 0, 255),
    "fp": (255, 0, 0),
    "tn": (0, 0, 0),
}


def difference_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    rgb = np.zeros((*pred.shape, 3), dtype=np.uint8)
    rgb[gt & pred] = DIFF_COLORS["tp"]
    rgb[gt & ~pred] = DIFF_COLORS["fn"]
    rgb[~gt & pred] = DIFF_COLORS["fp"]
    return rgb


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_atomic(path, payload: dict):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
