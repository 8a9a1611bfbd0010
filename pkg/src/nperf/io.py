"""Bit-exact file formats: NPC1 point clouds, DPTH depth rasters, PPM/PGM
images and masks, MSK3 index sets, JSON manifests. All little-endian."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .scene import DepthMap, Mask2D, Mask3D, NeuralPointCloud

NPC_MAGIC = b"NPC1"
NPC_VERSION = 1
DEPTH_MAGIC = b"DPTH"
MASK3_MAGIC = b"MSK3"


class FormatError(ValueError):
    """Malformed or inconsistent file contents."""


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write(path, data: bytes) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _header(buf: bytes, magic: bytes, fmt: str, path):
    dt = np.dtype(fmt)
    if len(buf) < 4 + dt.itemsize or buf[:4] != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")
    return np.frombuffer(buf, dtype=dt, count=1, offset=4)[0], 4 + dt.itemsize


# ----------------------------------------------------------------------
# NPC1


def _npc_dtype(F: int) -> np.dtype:
    return np.dtype([("pos", "<f4", (3,)), ("conf", "<f4"), ("feat", "<f4", (F,))])


def encode_npc(cloud: NeuralPointCloud) -> bytes:
    F = cloud.feature_dim
    rec = np.zeros(len(cloud), dtype=_npc_dtype(F))
    rec["pos"] = cloud.positions
    rec["conf"] = cloud.confidences
    rec["feat"] = cloud.features
    head = np.array((NPC_VERSION, len(cloud), F), dtype=[("v", "<u4"), ("n", "<u8"), ("f", "<u4")])
    return NPC_MAGIC + head.tobytes() + rec.tobytes()


def decode_npc(buf: bytes, path="<bytes>") -> NeuralPointCloud:
    head, off = _header(buf, NPC_MAGIC, "<u4, <u8, <u4", path)
    version, n, F = (int(x) for x in head)
    if version != NPC_VERSION:
        raise FormatError(f"{path}: unsupported NPC1 version {version}")
    dt = _npc_dtype(F)
    if len(buf) != off + n * dt.itemsize:
        raise FormatError(f"{path}: expected {n} points of dim {F}, size mismatch")
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=off)
    try:
        return NeuralPointCloud(
            rec["pos"].astype(np.float64),
            rec["conf"].astype(np.float64),
            rec["feat"].astype(np.float64).reshape(n, F),
        )
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


def write_npc(path, cloud: NeuralPointCloud) -> None:
    _write(path, encode_npc(cloud))


def read_npc(path) -> NeuralPointCloud:
    return decode_npc(_read(path), path)


# ----------------------------------------------------------------------
# DPTH


def write_depth(path, depth: DepthMap) -> None:
    h, w = depth.values.shape
    head = np.array((w, h), dtype="<u4").tobytes()
    _write(path, DEPTH_MAGIC + head + depth.values.astype("<f4").tobytes())


def read_depth(path) -> DepthMap:
    buf = _read(path)
    head, off = _header(buf, DEPTH_MAGIC, "<u4, <u4", path)
    w, h = int(head[0]), int(head[1])
    if len(buf) != off + 4 * w * h:
        raise FormatError(f"{path}: size does not match {w}x{h}")
    vals = np.frombuffer(buf, dtype="<f4", offset=off).astype(np.float64).reshape(h, w)
    try:
        return DepthMap(vals)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


# ----------------------------------------------------------------------
# PPM / PGM


def quantize(img) -> np.ndarray:
    """[0, 1] floats -> uint8, rounding halves away from zero."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8)


def _pnm_encode(magic: bytes, data: np.ndarray) -> bytes:
    h, w = data.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + data.tobytes()


def _pnm_decode(buf: bytes, magic: bytes, channels: int, path) -> np.ndarray:
    if buf[:2] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} image")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed header")
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace before the raster
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    n = w * h * channels
    if len(buf) - pos != n:
        raise FormatError(f"{path}: raster size mismatch")
    arr = np.frombuffer(buf, dtype=np.uint8, offset=pos, count=n)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def write_ppm(path, img) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) image")
    data = img if img.dtype == np.uint8 else quantize(img)
    _write(path, _pnm_encode(b"P6", data))


def read_ppm(path) -> np.ndarray:
    """Float image in [0, 1]."""
    return _pnm_decode(_read(path), b"P6", 3, path).astype(np.float64) / 255.0


def write_pgm_mask(path, mask: Mask2D) -> None:
    _write(path, _pnm_encode(b"P5", np.where(mask.raster, 255, 0).astype(np.uint8)))


def read_pgm_mask(path) -> Mask2D:
    """Nonzero pixels are masked."""
    return Mask2D(_pnm_decode(_read(path), b"P5", 1, path) > 0)


# ----------------------------------------------------------------------
# MSK3


def write_mask3d(path, mask: Mask3D) -> None:
    idx = np.asarray(mask.indices, dtype="<u8")
    _write(path, MASK3_MAGIC + np.array(len(idx), dtype="<u8").tobytes() + idx.tobytes())


def read_mask3d(path) -> Mask3D:
    buf = _read(path)
    n, off = _header(buf, MASK3_MAGIC, "<u8", path)
    n = int(n)
    if len(buf) != off + 8 * n:
        raise FormatError(f"{path}: expected {n} indices")
    idx = np.frombuffer(buf, dtype="<u8", offset=off).astype(np.int64)
    if n and np.any(np.diff(idx) <= 0):
        raise FormatError(f"{path}: indices must be strictly increasing")
    return Mask3D(idx)


# ----------------------------------------------------------------------
# manifest


def write_json(path, obj) -> None:
    _write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path) -> dict:
    try:
        return json.loads(_read(path))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from e
