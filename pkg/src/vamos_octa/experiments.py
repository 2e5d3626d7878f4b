"""Experiment drivers shared by the CLI, ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .corruption import CorruptionConfig, apply_mask, fixed_block_mask, generate_fixed_masks
from .errors import ConfigError
from .loss import LossConfig
from .network import ModelConfig, TrainConfig, build_model, infer_volume, train
from .projection import enface_mip
from .volume import PhantomConfig, Volume, generate_phantom

log = logging.getLogger(__name__)


def derive_seed(seed: int, *keys: int) -> int:
    """Stable 32-bit child seed for ``(seed, *keys)``."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def make_dataset(cfg: PhantomConfig, k: int = 7, seed: int = 0) -> list[Volume]:
    return [generate_phantom(cfg, derive_seed(seed, i)) for i in range(k)]


def fold_split(k: int, fold: int) -> dict[str, list[int]]:
    """Rotating train/val/test assignment: test = fold, val = next volume, rest train."""
    if k < 3:
        raise ConfigError("fold rotation needs at least 3 volumes")
    if not 0 <= fold < k:
        raise ConfigError(f"fold {fold} outside [0, {k})")
    test, val = fold, (fold + 1) % k
    return {"train": [i for i in range(k) if i not in (test, val)], "val": [val], "test": [test]}


ABLATIONS = ("wmse", "wmse_axial", "vamos")


def ablation_loss(name: str, base: LossConfig = LossConfig()) -> LossConfig:
    if name == "wmse":
        return replace(base, lambda_proj=0.0)
    if name == "wmse_axial":
        return replace(base, projection_axes=("axial",))
    if name == "vamos":
        return replace(base, projection_axes=("axial", "lateral"))
    if name == "mse":
        return replace(base, lambda_proj=0.0, alpha_w=0.0, target_weight=0.0, c=1.0)
    raise ConfigError(f"unknown ablation {name!r}")


@dataclass(frozen=True)
class AblationConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=1000, max_steps=2000))
    loss: LossConfig = field(default_factory=LossConfig)
    n_volumes: int = 7
    fold: int = 0
    test_events: int = 6
    mask_seed: int = 1234
    seed: int = 0
    variants: tuple[str, ...] = ABLATIONS


def test_masks(cfg: AblationConfig, volumes, indices):
    corr = CorruptionConfig(mode="fixed", seed=cfg.mask_seed)
    return {
        i: generate_fixed_masks(replace(corr, seed=derive_seed(cfg.mask_seed, i)),
                                volumes[i].n_slices, cfg.test_events)
        for i in indices
    }


def run_ablation(cfg: AblationConfig, progress=None) -> dict:
    """Train each loss variant at a matched step budget; evaluate on fixed test masks.

    Evaluation pools the held-out validation and test volumes of the fold.
    Returns ``{"variants": {name: {...}}, "corrupted": {...}, "models": {...}}``.
    """
    volumes = make_dataset(cfg.phantom, cfg.n_volumes, cfg.seed)
    split = fold_split(cfg.n_volumes, cfg.fold)
    held_out = split["test"] + split["val"]
    masks = test_masks(cfg, volumes, held_out)
    train_set = [volumes[i] for i in split["train"]]

    def pooled(restore):
        reports = [
            metrics.evaluate_pair(restore(i), volumes[i], masks[i], f"phantom_{i}", cfg.mask_seed)
            for i in held_out
        ]
        keys = reports[0].mip_metrics.keys() - {"lpips"}
        out = {f"mip_{k}": float(np.mean([r.mip_metrics[k] for r in reports])) for k in keys}
        for k in reports[0].bscan_metrics:
            out[f"bscan_{k}"] = float(np.mean([r.bscan_metrics[k] for r in reports]))
        return out, reports

    result = {"split": split, "variants": {}, "models": {}}
    result["corrupted"], _ = pooled(lambda i: apply_mask(volumes[i], masks[i]))
    for name in cfg.variants:
        lc = ablation_loss(name, cfg.loss)
        model = build_model(cfg.model)
        t0 = time.time()
        tr = train(model, train_set, cfg.train, lc, progress=progress)
        summary, reports = pooled(lambda i: infer_volume(model, apply_mask(volumes[i], masks[i]), masks[i]))
        summary["train_seconds"] = time.time() - t0
        summary["steps"] = tr.steps
        summary["final_log"] = tr.log[-1] if tr.log else None
        result["variants"][name] = summary
        result["models"][name] = model
        log.info("ablation %s: %s", name, summary)
    result["volumes"] = volumes
    result["masks"] = masks
    return result


def severity_sweep(model, volume: Volume, lengths=range(1, 11)) -> list[dict]:
    """En face MIE of corrupted and restored volumes for centred blocks of each length."""
    gt_mip = enface_mip(volume)
    rows = []
    for length in lengths:
        mask = fixed_block_mask(volume.n_slices, int(length))
        corrupted = apply_mask(volume, mask)
        restored = infer_volume(model, corrupted, mask) if length else corrupted
        rows.append({
            "block_length": int(length),
            "mie_corrupted": metrics.mie(enface_mip(corrupted), gt_mip),
            "mie_restored": metrics.mie(enface_mip(restored), gt_mip),
        })
    return rows
