"""File formats: Netpbm images, Middlebury ``.flo`` flow, key-value configs.

All writers are byte-deterministic; all readers validate headers and raise
``ValueError`` on malformed input.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

FLO_MAGIC = 202021.25
# Middlebury convention: components above this magnitude mark unknown flow
FLO_UNKNOWN = 1e10
FLO_UNKNOWN_THRESH = 1e9


def _open_write(path, force: bool = True):
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"refusing to overwrite {path} (use --force)")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "wb")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# --- Netpbm ------------------------------------------------------------------


def _read_netpbm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated Netpbm header")
        tokens.append(data[start:pos])
    pos += 1  # the single whitespace byte after maxval
    magic = tokens[0].decode()
    width, height, maxval = (int(t) for t in tokens[1:])
    return magic, width, height, maxval, data[pos:]


def write_pgm(path, img: np.ndarray, maxval: int = 255, force: bool = True):
    """Write a 2-D array as binary P5. Floats in [0, 1] are scaled to maxval."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {img.shape}")
    if not 0 < maxval < 65536:
        raise ValueError(f"bad maxval {maxval}")
    if np.issubdtype(img.dtype, np.floating):
        img = np.rint(np.clip(img, 0, 1) * maxval)
    img = img.astype(np.int64)
    if img.min(initial=0) < 0 or img.max(initial=0) > maxval:
        raise ValueError(f"PGM values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = img.shape
    with _open_write(path, force) as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        f.write(img.astype(dtype).tobytes())


def read_pgm(path) -> Tuple[np.ndarray, int]:
    """Return (integer array, maxval)."""
    magic, w, h, maxval, body = _read_netpbm(path)
    if magic != "P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic})")
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(body, dtype=dtype, count=w * h)
    return arr.reshape(h, w).astype(np.int64), maxval


def write_ppm(path, img: np.ndarray, force: bool = True):
    """Write an (H, W, 3) image as binary P6; floats in [0, 1] are scaled."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) array, got {img.shape}")
    if np.issubdtype(img.dtype, np.floating):
        img = np.rint(np.clip(img, 0, 1) * 255)
    img = img.astype(np.uint8)
    h, w = img.shape[:2]
    with _open_write(path, force) as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Return an (H, W, 3) uint8 array."""
    magic, w, h, maxval, body = _read_netpbm(path)
    if magic != "P6" or maxval != 255:
        raise ValueError(f"{path}: expected 8-bit P6 image")
    return np.frombuffer(body, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


# --- Middlebury flow ---------------------------------------------------------


def write_flo(path, flow: np.ndarray, valid: np.ndarray | None = None, force: bool = True):
    """Write (H, W, 2) flow; invalid pixels are stored as the unknown marker."""
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    if valid is not None:
        flow = np.where(np.asarray(valid, bool)[..., None], flow, np.float32(FLO_UNKNOWN))
    h, w = flow.shape[:2]
    with _open_write(path, force) as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(flow.astype("<f4").tobytes())


def read_flo(path) -> Tuple[np.ndarray, np.ndarray]:
    """Return (flow (H, W, 2) float32, validity mask)."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ValueError(f"{path}: truncated .flo header")
    magic, w, h = struct.unpack("<fii", data[:12])
    if magic != FLO_MAGIC:
        raise ValueError(f"{path}: bad .flo magic {magic!r}")
    if w <= 0 or h <= 0 or len(data) != 12 + 8 * w * h:
        raise ValueError(f"{path}: size {w}x{h} inconsistent with file length")
    flow = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)
    valid = np.all(np.abs(flow) < FLO_UNKNOWN_THRESH, axis=2)
    return np.where(valid[..., None], flow, 0).astype(np.float32), valid


# --- key-value text ----------------------------------------------------------


def format_kv(values: Dict[str, object]) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(_fmt_scalar(x) for x in v)
        else:
            v = _fmt_scalar(v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def _fmt_scalar(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_kv(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {n}: empty key")
        if key in out:
            raise ValueError(f"line {n}: duplicate key {key!r}")
        out[key] = val
    return out


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
