"""Intensity projections of B-scans and volumes, plus an 8-bit PGM writer.

A B-scan is an ``H x W`` array with rows along depth (axial, z) and columns
along the lateral axis (x). The *axial* profile collapses depth and has
length W; the *lateral* profile collapses x and has length H.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ShapeError
from .volume import Volume

KINDS = ("max", "avg")
AXES = ("axial", "lateral")
# numpy axis collapsed by each projection
COLLAPSED_AXIS = {"axial": 0, "lateral": 1}


def _check_bscan(b):
    b = np.asarray(b)
    if b.ndim != 2 or b.shape[0] < 1 or b.shape[1] < 1:
        raise ShapeError(f"expected a non-empty H x W B-scan, got shape {b.shape}")
    return b


def _reduce(b, axis: int, kind: str) -> np.ndarray:
    if kind == "max":
        return b.max(axis=axis)
    if kind == "avg":
        # sequential 64-bit sum: fixed order, independent of numpy's pairwise blocking
        lines = np.moveaxis(np.asarray(b, dtype=np.float64), axis, 0)
        acc = np.zeros(lines.shape[1:])
        for line in lines:
            acc += line
        return acc / b.shape[axis]
    raise ValueError(f"unknown projection kind {kind!r}")


def axial_profile(b, kind: str = "max") -> np.ndarray:
    return _reduce(_check_bscan(b), 0, kind)


def lateral_profile(b, kind: str = "max") -> np.ndarray:
    return _reduce(_check_bscan(b), 1, kind)


def profile(b, axis: str, kind: str) -> np.ndarray:
    if axis == "axial":
        return axial_profile(b, kind)
    if axis == "lateral":
        return lateral_profile(b, kind)
    raise ValueError(f"unknown projection axis {axis!r}")


def enface_mip(v: Volume | np.ndarray) -> np.ndarray:
    """``N x W`` image whose pixel ``(n, x)`` is the depth maximum of slice ``n``."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    if data.ndim != 3:
        raise ShapeError(f"expected a 3-D volume, got shape {data.shape}")
    return data.max(axis=1)


def to_uint8(img) -> np.ndarray:
    """Linear quantisation of [0, 1] to 0..255 with round-half-up."""
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def write_image(img, path) -> None:
    """Write a 2-D image in [0, 1] as binary 8-bit PGM (P5)."""
    a = np.asarray(img)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {a.shape}")
    pixels = a if a.dtype == np.uint8 else to_uint8(a)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read back an 8-bit P5 file written by :func:`write_image`."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
