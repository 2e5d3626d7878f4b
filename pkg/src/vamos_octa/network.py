"""2.5D U-Net, its training loop, checkpoints and sliding-window restoration.

The network sees ``S`` neighbouring B-scans as channels and predicts the
centre one. Training drives the parameters with the analytic VAMOS gradient
from :mod:`vamos_octa.loss`, injected at the network output.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .corruption import CorruptionConfig, corrupt_for_target, target_rng
from .errors import ConfigError, DataError, TrainingDivergedError, VolumeFormatError
from .loss import LossBreakdown, LossConfig, vamos_loss_batch
from .volume import ValidityMask, Volume, extract_stack

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VAMOSCK1"
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class ModelConfig:
    s_in: int = 9
    depth: int = 3
    base_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.s_in < 1 or self.s_in % 2 == 0:
            raise ConfigError(f"s_in must be a positive odd integer, got {self.s_in}")
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError("depth and base_channels must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    seed: int = 0
    checkpoint_every: int = 0
    max_steps: int | None = None
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.corruption, dict):
            object.__setattr__(self, "corruption", CorruptionConfig(**self.corruption))
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs, batch_size and learning_rate must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive when given")
        if self.corruption.mode != "dynamic":
            raise ConfigError("training requires dynamic corruption")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def set_deterministic(enabled: bool = True):
    """Single-threaded, deterministic torch kernels (acceptance/reproducibility mode)."""
    if enabled:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)


# --------------------------------------------------------------------------
# model


def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


class ConvBlock(nn.Sequential):
    """Two 3x3 conv + GroupNorm + ReLU layers; GroupNorm keeps batch items independent."""

    def __init__(self, cin, cout):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(_groups(cout), cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(_groups(cout), cout), nn.ReLU(inplace=True),
        )


class UNet25D(nn.Module):
    """Encoder-decoder with skip connections; ``(B, S, H, W) -> (B, 1, H, W)`` in (0, 1)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        widths = [b * 2 ** i for i in range(cfg.depth)]
        self.encoders = nn.ModuleList()
        cin = cfg.s_in
        for w in widths:
            self.encoders.append(ConvBlock(cin, w))
            cin = w
        self.bottleneck = ConvBlock(cin, 2 * cin)
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for w in reversed(widths):
            self.upsamplers.append(nn.ConvTranspose2d(2 * w, w, 2, stride=2))
            self.decoders.append(ConvBlock(2 * w, w))
        self.head = nn.Conv2d(b, 1, 1)

    @property
    def multiple(self) -> int:
        return 2 ** self.cfg.depth

    def forward(self, x):
        h, w = x.shape[-2:]
        m = self.multiple
        pad_h, pad_w = (-h) % m, (-w) % m
        if pad_h or pad_w:
            mode = "reflect" if pad_h < h and pad_w < w else "replicate"
            x = F.pad(x, (0, pad_w, 0, pad_h), mode=mode)
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upsamplers, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return torch.sigmoid(self.head(x))[..., :h, :w]


def build_model(cfg: ModelConfig) -> UNet25D:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return UNet25D(cfg)


def parameter_blob(model: nn.Module) -> bytes:
    return b"".join(
        p.detach().cpu().numpy().astype("<f4").tobytes() for p in model.state_dict().values()
    )


def parameter_checksum(model: nn.Module) -> str:
    return hashlib.sha256(parameter_blob(model)).hexdigest()


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: UNet25D, train_cfg: TrainConfig | None = None,
                    loss_cfg: LossConfig | None = None, epoch: int = 0, step: int = 0) -> None:
    state = model.state_dict()
    header = {
        "model": asdict(model.cfg),
        "train": train_cfg.to_dict() if train_cfg else None,
        "loss": loss_cfg.to_dict() if loss_cfg else None,
        "epoch": epoch,
        "step": step,
        "parameters": [[name, list(t.shape)] for name, t in state.items()],
    }
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_U32.pack(len(hbytes)))
        fh.write(hbytes)
        fh.write(parameter_blob(model))


def load_checkpoint(path):
    """Return ``(model, header)``; the header holds the configs stored at save time."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise VolumeFormatError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = _U32.unpack_from(raw, 8)
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    model = build_model(ModelConfig(**header["model"]))
    blob = np.frombuffer(raw[12 + hlen:], dtype="<f4")
    state, pos = {}, 0
    for name, shape in header["parameters"]:
        n = math.prod(shape)
        if pos + n > blob.size:
            raise DataError(f"{path}: parameter blob truncated at {name}")
        state[name] = torch.from_numpy(blob[pos:pos + n].reshape(shape).copy())
        pos += n
    if pos != blob.size:
        raise DataError(f"{path}: {blob.size - pos} trailing parameter values")
    model.load_state_dict(state)
    return model, header


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: UNet25D
    log: list = field(default_factory=list)
    steps: int = 0


def _check_finite(bd: LossBreakdown, step: int):
    for name, value in bd.as_dict().items():
        if not math.isfinite(value):
            raise TrainingDivergedError(step, name, value)


def training_step(model, optimizer, inputs, targets, loss_cfg: LossConfig, step: int = 0):
    """One optimiser update; returns the batch-mean breakdown before the update."""
    model.train()
    out = model(torch.from_numpy(np.array(inputs, dtype=np.float32)))
    pred = out[:, 0].detach().double().numpy()
    bd, grad = vamos_loss_batch(pred, targets, loss_cfg)
    _check_finite(bd, step)
    optimizer.zero_grad(set_to_none=True)
    out.backward(torch.from_numpy(grad[:, None].astype(np.float32)))
    optimizer.step()
    return bd


def make_optimizer(model, tc: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=tc.learning_rate, betas=tc.betas, eps=tc.eps)


def corrupted_sample(v: Volume, target: int, s_in: int, cfg: CorruptionConfig,
                     rng: np.random.Generator):
    mask = corrupt_for_target(cfg, target, v.n_slices, rng)
    return extract_stack(v, mask, target, s_in).slices


def _mean_breakdown(rows):
    keys = rows[0].as_dict().keys()
    return {k: float(np.mean([r.as_dict()[k] for r in rows])) for k in keys}


def train(model: UNet25D, dataset, tc: TrainConfig, lc: LossConfig, out_dir=None,
          progress=None) -> TrainResult:
    """Train on ``dataset`` (a list of volumes) with fresh corruption every epoch.

    One epoch visits every (volume, slice) pair once in a seeded random order.
    With ``out_dir`` set, writes ``train_log.jsonl`` and ``checkpoint.vck``
    (plus ``checkpoint_eNNN.vck`` every ``checkpoint_every`` epochs).
    """
    if not dataset:
        raise ConfigError("training needs at least one volume")
    if tc.deterministic:
        set_deterministic(True)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(tc.seed)
        return _train(model, list(dataset), tc, lc, out_dir, progress)


def _train(model, dataset, tc, lc, out_dir, progress):
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train_log.jsonl").write_text("")
    optimizer = make_optimizer(model, tc)
    s_in = model.cfg.s_in
    pairs = [(vi, t) for vi, v in enumerate(dataset) for t in range(v.n_slices)]
    result = TrainResult(model)
    step = 0
    for epoch in range(tc.epochs):
        order = np.random.default_rng([tc.seed, epoch]).permutation(len(pairs))
        rows = []
        for start in range(0, len(order), tc.batch_size):
            if tc.max_steps is not None and step >= tc.max_steps:
                break
            batch = [pairs[i] for i in order[start:start + tc.batch_size]]
            inputs = np.stack([
                corrupted_sample(dataset[vi], t, s_in, tc.corruption,
                                 target_rng(tc.corruption.seed, epoch, vi, t))
                for vi, t in batch
            ])
            targets = np.stack([dataset[vi].data[t] for vi, t in batch])
            rows.append(training_step(model, optimizer, inputs, targets, lc, step))
            step += 1
            if progress is not None:
                progress(step, rows[-1])
        if not rows:
            break
        record = {"epoch": epoch, "steps": step, **_mean_breakdown(rows)}
        result.log.append(record)
        log.info("epoch %d: %s", epoch, record)
        if out_dir is not None:
            with open(out_dir / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(record) + "\n")
            if tc.checkpoint_every and (epoch + 1) % tc.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_e{epoch:03d}.vck", model, tc, lc, epoch, step)
    result.steps = step
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.vck", model, tc, lc, len(result.log), step)
    return result


def overfit(model: UNet25D, inputs, targets, lc: LossConfig, steps: int = 300,
            tc: TrainConfig | None = None) -> list[LossBreakdown]:
    """Repeatedly fit one fixed batch; returns the per-step breakdown history."""
    tc = tc or TrainConfig()
    if tc.deterministic:
        set_deterministic(True)
    optimizer = make_optimizer(model, tc)
    inputs = np.asarray(inputs, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float64)
    return [training_step(model, optimizer, inputs, targets, lc, i) for i in range(steps)]


# --------------------------------------------------------------------------
# inference


def predict(model: UNet25D, inputs) -> np.ndarray:
    """``(B, S, H, W)`` stacks to ``(B, H, W)`` float32 predictions."""
    model.eval()
    with torch.no_grad():
        out = model(torch.from_numpy(np.array(inputs, dtype=np.float32)))
    return out[:, 0].numpy()


def infer_volume(model: UNet25D, v: Volume, mask: ValidityMask, batch_size: int = 16) -> Volume:
    """Replace every invalid slice with the model output; valid slices pass through.

    Each corrupted slice is predicted from the original corrupted context,
    never from slices restored earlier in the same pass.
    """
    if len(mask) != v.n_slices:
        raise DataError("mask length does not match the volume")
    targets = mask.corrupted
    if not targets:
        return v
    if len(targets) == v.n_slices:
        raise DataError("every slice is corrupted; there is no valid context to restore from")
    out = np.array(v.data, copy=True)
    s_in = model.cfg.s_in
    for start in range(0, len(targets), batch_size):
        chunk = targets[start:start + batch_size]
        stacks = np.stack([extract_stack(v, mask, t, s_in).slices for t in chunk])
        out[chunk] = predict(model, stacks)
    return Volume(out)
