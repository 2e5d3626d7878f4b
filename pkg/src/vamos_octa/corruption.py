"""Synthetic bulk-motion corruption: truncated-geometric blocks of dropped B-scans."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError, ShapeError
from .volume import ValidityMask, Volume

MAX_REJECTIONS = 10_000


@dataclass(frozen=True)
class CorruptionConfig:
    p: float = 0.4
    max_block: int = 6
    mode: str = "dynamic"  # or "fixed"
    seed: int = 0
    truncation: str = "renormalize"  # or "clamp"

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ConfigError(f"p must lie strictly inside (0, 1), got {self.p}")
        if self.max_block < 1:
            raise ConfigError(f"max_block must be >= 1, got {self.max_block}")
        if self.mode not in ("dynamic", "fixed"):
            raise ConfigError(f"unknown corruption mode {self.mode!r}")
        if self.truncation not in ("renormalize", "clamp"):
            raise ConfigError(f"unknown truncation {self.truncation!r}")


def block_length_pmf(p: float, max_block: int, truncation: str = "renormalize") -> np.ndarray:
    """Probabilities of block lengths ``1..max_block`` (index 0 is length 1)."""
    k = np.arange(1, max_block + 1)
    pmf = p * (1.0 - p) ** (k - 1)
    if truncation == "renormalize":
        return pmf / (1.0 - (1.0 - p) ** max_block)
    pmf[-1] += (1.0 - p) ** max_block
    return pmf


def block_length_mean(p: float, max_block: int, truncation: str = "renormalize") -> float:
    pmf = block_length_pmf(p, max_block, truncation)
    return float(np.dot(np.arange(1, max_block + 1), pmf))


def sample_block_length(cfg: CorruptionConfig, rng: np.random.Generator) -> int:
    if cfg.truncation == "clamp":
        return int(min(rng.geometric(cfg.p), cfg.max_block))
    # inverse CDF of the geometric law restricted to 1..max_block
    u = rng.random()
    tail = 1.0 - (1.0 - cfg.p) ** cfg.max_block
    k = int(np.ceil(np.log1p(-u * tail) / np.log1p(-cfg.p)))
    return min(max(k, 1), cfg.max_block)


def block_start_for_target(k: int, target: int, n_slices: int, rng: np.random.Generator) -> int:
    """Uniform start among blocks of length ``k`` inside the volume that contain ``target``."""
    k = min(k, n_slices)
    lo = max(0, target - k + 1)
    hi = min(target, n_slices - k)
    return int(rng.integers(lo, hi + 1))


def corrupt_for_target(cfg: CorruptionConfig, target: int, n_slices: int,
                       rng: np.random.Generator, k: int | None = None) -> ValidityMask:
    if not 0 <= target < n_slices:
        raise IndexError(f"target {target} outside [0, {n_slices})")
    if k is None:
        k = sample_block_length(cfg, rng)
    k = min(k, n_slices)
    start = block_start_for_target(k, target, n_slices, rng)
    flags = np.ones(n_slices, dtype=bool)
    flags[start:start + k] = False
    return ValidityMask(flags)


def target_rng(seed: int, epoch: int, volume: int, target: int) -> np.random.Generator:
    """Independent stream per (seed, epoch, volume, target) for dynamic corruption."""
    return np.random.default_rng([seed, epoch, volume, target])


def fixed_blocks(cfg: CorruptionConfig, n_slices: int, n_events: int) -> list[range]:
    """Place ``n_events`` disjoint truncated-geometric blocks, rejecting overlaps."""
    if n_events < 1:
        raise ConfigError("n_events must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    free = np.ones(n_slices, dtype=bool)
    blocks = []
    rejections = 0
    while len(blocks) < n_events:
        k = min(sample_block_length(cfg, rng), n_slices)
        start = int(rng.integers(0, n_slices - k + 1))
        if free[start:start + k].all():
            free[start:start + k] = False
            blocks.append(range(start, start + k))
            continue
        rejections += 1
        if rejections >= MAX_REJECTIONS:
            raise CapacityError(
                f"could not place {n_events} disjoint blocks in {n_slices} slices "
                f"({len(blocks)} placed after {rejections} rejections)"
            )
    return blocks


def generate_fixed_masks(cfg: CorruptionConfig, n_slices: int, n_events: int) -> ValidityMask:
    """Union of ``n_events`` disjoint blocks, a pure function of ``cfg.seed``."""
    blocks = fixed_blocks(cfg, n_slices, n_events)
    return ValidityMask.from_corrupted(n_slices, [i for b in blocks for i in b])


def fixed_block_mask(n_slices: int, length: int, start: int | None = None) -> ValidityMask:
    """A single block of exactly ``length`` slices, centred unless ``start`` is given."""
    if not 0 <= length <= n_slices:
        raise ConfigError(f"block length {length} does not fit in {n_slices} slices")
    if start is None:
        start = (n_slices - length) // 2
    flags = np.ones(n_slices, dtype=bool)
    flags[start:start + length] = False
    return ValidityMask(flags)


def apply_mask(v: Volume, mask: ValidityMask) -> Volume:
    if len(mask) != v.n_slices:
        raise ShapeError(f"mask length {len(mask)} != n_slices {v.n_slices}")
    return Volume(v.data * mask.flags[:, None, None].astype(np.float32))
