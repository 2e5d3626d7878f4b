"""Volume data model, ``.octav`` persistence, slice stacks and vessel phantoms.

Axis convention everywhere in the package: ``data[n, z, x]`` with ``n`` the
slow (B-scan) axis, ``z`` the axial/depth axis (rows, length H) and ``x`` the
lateral axis (columns, length W).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ShapeError, TruncationError, VolumeFormatError

MAGIC = b"OCTAVOL1"
_HEADER_LEN = struct.Struct("<I")


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """An ``n_slices x height x width`` stack of B-scans with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be a non-empty 3-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise DataError(
                f"volume intensities must lie in [0, 1], got [{data.min()}, {data.max()}]"
            )
        object.__setattr__(self, "data", _readonly(data))

    @property
    def n_slices(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))


def normalize(data) -> np.ndarray:
    """Min-max rescale an array to [0, 1]; a constant array maps to zeros."""
    a = np.asarray(data, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros(a.shape, dtype=np.float32)
    return ((a - lo) / (hi - lo)).astype(np.float32)


# --------------------------------------------------------------------------
# persistence


def _header_bytes(v: Volume) -> bytes:
    header = {"n_slices": v.n_slices, "height": v.height, "width": v.width, "dtype": "f32le"}
    return json.dumps(header, separators=(",", ":")).encode("utf-8")


def save_volume(v: Volume, path) -> None:
    """Write ``MAGIC | u32 header length | JSON header | f32le payload``."""
    header = _header_bytes(v)
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER_LEN.pack(len(header)))
        fh.write(header)
        fh.write(payload)


def load_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic, expected {MAGIC!r}")
    pos = len(MAGIC)
    if len(raw) < pos + _HEADER_LEN.size:
        raise TruncationError(f"{path}: file ends inside the header length field")
    (hlen,) = _HEADER_LEN.unpack_from(raw, pos)
    pos += _HEADER_LEN.size
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
        dims = (int(header["n_slices"]), int(header["height"]), int(header["width"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"{path}: unreadable header ({exc})") from exc
    if header.get("dtype") != "f32le":
        raise VolumeFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    if min(dims) < 1:
        raise VolumeFormatError(f"{path}: non-positive dimensions {dims}")
    pos += hlen
    payload = raw[pos:]
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(payload) != expected:
        raise TruncationError(
            f"{path}: payload has {len(payload)} bytes, header {dims} requires {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: payload contains non-finite values")
    return Volume(data)


# --------------------------------------------------------------------------
# validity masks


@dataclass(frozen=True, eq=False)
class ValidityMask:
    """Per-slice validity flags; ``True`` means the B-scan was sampled."""

    flags: np.ndarray

    def __post_init__(self):
        flags = np.array(self.flags, dtype=bool, copy=True)
        if flags.ndim != 1:
            raise ShapeError("validity flags must be one-dimensional")
        object.__setattr__(self, "flags", _readonly(flags))

    @classmethod
    def all_valid(cls, n_slices: int) -> ValidityMask:
        return cls(np.ones(n_slices, dtype=bool))

    @classmethod
    def from_corrupted(cls, n_slices: int, corrupted) -> ValidityMask:
        flags = np.ones(n_slices, dtype=bool)
        idx = np.asarray(list(corrupted), dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= n_slices):
            raise IndexError(f"corrupted index outside [0, {n_slices})")
        flags[idx] = False
        return cls(flags)

    @property
    def n_slices(self) -> int:
        return self.flags.shape[0]

    @property
    def corrupted(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(~self.flags)]

    def __len__(self):
        return self.n_slices

    def __eq__(self, other):
        if not isinstance(other, ValidityMask):
            return NotImplemented
        return np.array_equal(self.flags, other.flags)

    def __hash__(self):
        return hash(self.flags.tobytes())

    def to_json(self) -> dict:
        return {"n_slices": self.n_slices, "corrupted": self.corrupted}

    @classmethod
    def from_json(cls, obj: dict) -> ValidityMask:
        try:
            return cls.from_corrupted(int(obj["n_slices"]), obj["corrupted"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed mask document: {exc}") from exc


def save_mask(mask: ValidityMask, path) -> None:
    Path(path).write_text(json.dumps(mask.to_json()) + "\n")


def load_mask(path) -> ValidityMask:
    return ValidityMask.from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# slice stacks


@dataclass(frozen=True, eq=False)
class SliceStack:
    slices: np.ndarray
    center_index: int
    stack_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.slices.shape[0]


def stack_indices(target: int, n_slices: int, S: int) -> np.ndarray:
    """Global slice index for each stack position, clamped to the volume edges."""
    half = S // 2
    return np.clip(np.arange(target - half, target + half + 1), 0, n_slices - 1)


def extract_stack(v: Volume, mask: ValidityMask, target: int, S: int = 9,
                  blank_center: bool = True) -> SliceStack:
    """Gather ``S`` neighbours of ``target``; invalid slices become zeros.

    Out-of-range positions replicate the nearest edge slice and inherit its
    masking, so a clamped copy of the blanked target is blank as well.
    """
    if S < 1 or S % 2 == 0:
        raise ConfigError(f"stack size must be a positive odd integer, got {S}")
    if not 0 <= target < v.n_slices:
        raise IndexError(f"target {target} outside [0, {v.n_slices})")
    if len(mask) != v.n_slices:
        raise ShapeError(f"mask length {len(mask)} != n_slices {v.n_slices}")
    idx = stack_indices(target, v.n_slices, S)
    keep = mask.flags[idx].copy()
    if blank_center:
        keep &= idx != target
    slices = v.data[idx] * keep[:, None, None].astype(np.float32)
    return SliceStack(_readonly(slices), int(target), _readonly(keep))


# --------------------------------------------------------------------------
# vessel phantoms


@dataclass(frozen=True)
class PhantomConfig:
    n_slices: int = 64
    height: int = 48
    width: int = 96
    n_vessels: int = 14
    radius_range: tuple[float, float] = (1.0, 2.5)
    noise_level: float = 0.05
    peak_range: tuple[float, float] = (0.6, 1.0)
    step: float = 0.25
    turn_sigma: float = 0.04

    def validate(self):
        if min(self.n_slices, self.height, self.width) < 1:
            raise ConfigError("phantom dimensions must be positive")
        if self.n_vessels < 1:
            raise ConfigError("phantom needs at least one vessel")
        r0, r1 = self.radius_range
        if not 0 < r0 <= r1:
            raise ConfigError(f"bad radius range {self.radius_range}")
        p0, p1 = self.peak_range
        if not 0.6 <= p0 <= p1 <= 1.0:
            raise ConfigError(f"peak range must lie inside [0.6, 1.0], got {self.peak_range}")
        if not 0 <= self.noise_level <= 0.15:
            raise ConfigError("noise_level must lie in [0, 0.15]")


@dataclass(frozen=True, eq=False)
class Vessel:
    """Rendered tube: centreline samples in ``(n, z, x)`` voxel coordinates."""

    points: np.ndarray
    radius: float
    peak: float


@dataclass(frozen=True, eq=False)
class Phantom:
    volume: Volume
    vessels: list[Vessel] = field(default_factory=list)


def _random_curve(rng, cfg: PhantomConfig, radius: float) -> np.ndarray:
    dims = np.array([cfg.n_slices, cfg.height, cfg.width], dtype=float)
    start = rng.uniform([0, radius, 0], dims - [1, 1 + radius, 1])
    # mostly en face direction with a shallow depth tilt
    theta = rng.uniform(0, 2 * np.pi)
    d0 = np.array([np.cos(theta), rng.uniform(-0.15, 0.15), np.sin(theta)])
    d0 /= np.linalg.norm(d0)
    z_lo, z_hi = radius, cfg.height - 1 - radius
    max_steps = int(4 * dims.sum() / cfg.step)
    halves = []
    for sign in (1.0, -1.0):
        p, d = start.copy(), sign * d0
        pts = []
        for _ in range(max_steps):
            p = p + cfg.step * d
            if not (-radius <= p[0] <= dims[0] - 1 + radius and -radius <= p[2] <= dims[2] - 1 + radius):
                break
            if p[1] < z_lo or p[1] > z_hi:
                p[1] = np.clip(p[1], z_lo, z_hi)
                d[1] = -d[1]
            pts.append(p.copy())
            d = d + rng.normal(0.0, cfg.turn_sigma, 3) * np.array([1.0, 0.3, 1.0])
            d /= np.linalg.norm(d)
        halves.append(pts)
    pts = halves[1][::-1] + [start] + halves[0]
    return np.asarray(pts)


def _render_distance(points: np.ndarray, radius: float, shape) -> np.ndarray:
    dist = np.full(shape, np.inf)
    reach = int(np.ceil(radius)) + 1
    for p in points:
        lo = np.maximum(np.floor(p).astype(int) - reach, 0)
        hi = np.minimum(np.floor(p).astype(int) + reach + 1, shape)
        if np.any(hi <= lo):
            continue
        n, z, x = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        d = np.sqrt((n - p[0]) ** 2 + (z - p[1]) ** 2 + (x - p[2]) ** 2)
        box = dist[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        np.minimum(box, d, out=box)
    return dist


def generate_phantom_with_vessels(cfg: PhantomConfig, seed: int) -> Phantom:
    cfg.validate()
    rng = np.random.default_rng(seed)
    shape = (cfg.n_slices, cfg.height, cfg.width)
    vessels_img = np.zeros(shape)
    vessels = []
    for _ in range(cfg.n_vessels):
        radius = float(rng.uniform(*cfg.radius_range))
        peak = float(rng.uniform(*cfg.peak_range))
        points = _random_curve(rng, cfg, radius)
        dist = _render_distance(points, radius, shape)
        sigma = radius / 2.0
        inside = dist <= radius
        tube = np.where(inside, peak * np.exp(-0.5 * (np.where(inside, dist, 0.0) / sigma) ** 2), 0.0)
        np.maximum(vessels_img, tube, out=vessels_img)
        vessels.append(Vessel(_readonly(points), radius, peak))
    if cfg.noise_level > 0:
        background = np.clip(rng.exponential(cfg.noise_level, shape), 0.0, 1.0)
    else:
        background = np.zeros(shape)
    data = np.clip(vessels_img + background, 0.0, 1.0).astype(np.float32)
    return Phantom(Volume(data), vessels)


def generate_phantom(cfg: PhantomConfig, seed: int) -> Volume:
    return generate_phantom_with_vessels(cfg, seed).volume
