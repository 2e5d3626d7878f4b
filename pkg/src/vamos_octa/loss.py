"""Vessel-weighted MSE, projection L1 terms and their composite, with gradients.

All functions take a single B-scan pair (``H x W``, rows = depth) and return
``(value, d value / d pred)`` evaluated in float64. Batch reduction is the mean
over items (:func:`vamos_loss_batch`).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .projection import AXES, COLLAPSED_AXIS, KINDS, profile

TERM_NAMES = ("mip_ax", "mip_lat", "aip_ax", "aip_lat")
_TERM_SPEC = {
    "mip_ax": ("axial", "max"),
    "mip_lat": ("lateral", "max"),
    "aip_ax": ("axial", "avg"),
    "aip_lat": ("lateral", "avg"),
}


@dataclass(frozen=True)
class LossConfig:
    alpha_w: float = 100.0
    gamma_w: float = 1.0 / 3.0
    c: float = 0.5
    lambda_proj: float = 3.0
    detach_pred_weight: bool = True
    epsilon_pow: float = 1e-8
    # coefficient of the target-based weight; 1 everywhere except the plain-MSE baseline
    target_weight: float = 1.0
    projection_axes: tuple[str, ...] = AXES

    def __post_init__(self):
        object.__setattr__(self, "projection_axes", tuple(self.projection_axes))
        if self.alpha_w < 0 or self.c < 0 or self.target_weight < 0:
            raise ConfigError("alpha_w, c and target_weight must be non-negative")
        if not 0 < self.gamma_w <= 1:
            raise ConfigError(f"gamma_w must lie in (0, 1], got {self.gamma_w}")
        if self.lambda_proj < 0:
            raise ConfigError("lambda_proj must be non-negative")
        if self.epsilon_pow <= 0:
            raise ConfigError("epsilon_pow must be positive")
        bad = set(self.projection_axes) - set(AXES)
        if bad:
            raise ConfigError(f"unknown projection axes {sorted(bad)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["projection_axes"] = list(self.projection_axes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LossConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    wmse: float
    mip_ax: float = 0.0
    mip_lat: float = 0.0
    aip_ax: float = 0.0
    aip_lat: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def _pair(pred, target):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2:
        raise ShapeError(f"pred {p.shape} and target {t.shape} must be equal 2-D shapes")
    return p, t


def loss_weight(pred, target, cfg: LossConfig) -> np.ndarray:
    g = cfg.gamma_w
    return cfg.alpha_w * pred ** g + cfg.target_weight * target ** g + cfg.c


def weighted_mse(pred, target, cfg: LossConfig = LossConfig(), weight_pred=None):
    """Vessel-weighted squared error, normalised by the pixel count of the B-scan.

    ``weight_pred`` evaluates the prediction-based weight on a different array
    and holds it constant; with it set, the returned gradient is that of the
    frozen-weight objective regardless of ``detach_pred_weight``.
    """
    p, t = _pair(pred, target)
    if (p < 0).any() or (t < 0).any():
        raise DataError("weighted_mse is defined for non-negative intensities only")
    wp = p if weight_pred is None else np.asarray(weight_pred, dtype=np.float64)
    w = loss_weight(wp, t, cfg)
    r = p - t
    n = p.size
    value = float(np.sum(w * r * r) / n)
    grad = 2.0 * w * r / n
    if weight_pred is None and not cfg.detach_pred_weight:
        g = cfg.gamma_w
        dw = cfg.alpha_w * g * np.maximum(p, cfg.epsilon_pow) ** (g - 1.0)
        grad = grad + dw * r * r / n
    return value, grad


def projection_l1(pred, target, axis: str, kind: str):
    """Mean absolute difference between projection profiles of pred and target.

    The max-projection gradient is the subgradient that sends each line's
    contribution to the first (lowest-index) argmax of the predicted line.
    """
    if axis not in AXES or kind not in KINDS:
        raise ValueError(f"unknown projection {axis!r}/{kind!r}")
    p, t = _pair(pred, target)
    ax = COLLAPSED_AXIS[axis]
    d = profile(p, axis, kind) - profile(t, axis, kind)
    length = d.shape[0]
    value = float(np.abs(d).sum() / length)
    s = np.sign(d) / length
    grad = np.zeros_like(p)
    if kind == "avg":
        grad += np.expand_dims(s / p.shape[ax], ax)
    else:
        first = np.argmax(p, axis=ax)
        lines = np.arange(length)
        if ax == 0:
            grad[first, lines] = s
        else:
            grad[lines, first] = s
    return value, grad


def active_terms(cfg: LossConfig) -> tuple[str, ...]:
    if cfg.lambda_proj == 0:
        return ()
    return tuple(n for n in TERM_NAMES if _TERM_SPEC[n][0] in cfg.projection_axes)


def vamos_loss(pred, target, cfg: LossConfig = LossConfig(), weight_pred=None):
    """Composite loss; inactive projection terms are reported as exactly 0."""
    wmse, grad = weighted_mse(pred, target, cfg, weight_pred=weight_pred)
    terms = dict.fromkeys(TERM_NAMES, 0.0)
    proj_grad = np.zeros_like(grad)
    for name in active_terms(cfg):
        terms[name], g = projection_l1(pred, target, *_TERM_SPEC[name])
        proj_grad += g
    total = wmse + cfg.lambda_proj * (
        terms["mip_ax"] + terms["mip_lat"] + terms["aip_ax"] + terms["aip_lat"]
    )
    return LossBreakdown(total=total, wmse=wmse, **terms), grad + cfg.lambda_proj * proj_grad


def vamos_loss_batch(preds, targets, cfg: LossConfig = LossConfig()):
    """Batch mean of :func:`vamos_loss` over ``B x H x W`` arrays."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 3:
        raise ShapeError(f"batch shapes {preds.shape} vs {targets.shape}")
    b = preds.shape[0]
    sums = dict.fromkeys(("total", "wmse") + TERM_NAMES, 0.0)
    grads = np.empty_like(preds)
    for i in range(b):
        bd, grads[i] = vamos_loss(preds[i], targets[i], cfg)
        for k, v in bd.as_dict().items():
            sums[k] += v
    return LossBreakdown(**{k: v / b for k, v in sums.items()}), grads / b


# --------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckReport:
    op_id: str
    trials: int
    threshold: float
    max_rel_error: float = 0.0
    n_checked: int = 0
    excluded: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error < self.threshold

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.op_id}: trials={self.trials} checked={self.n_checked} "
                f"excluded={len(self.excluded)} max_rel_err={self.max_rel_error:.3e} "
                f"threshold={self.threshold:.0e}")


@dataclass(frozen=True)
class _Op:
    analytic: object  # (pred, target) -> (value, grad)
    objective: object  # (pred, target, base_pred) -> value
    terms: tuple  # projection terms whose kinks must be excluded


def _total_and_grad(pred, target, cfg):
    bd, grad = vamos_loss(pred, target, cfg)
    return bd.total, grad


def _make_ops():
    detached = LossConfig()
    full = LossConfig(detach_pred_weight=False)
    ops = {
        "weighted_mse": _Op(
            lambda p, t: weighted_mse(p, t, detached),
            lambda p, t, p0: weighted_mse(p, t, detached, weight_pred=p0)[0],
            (),
        ),
        "weighted_mse_full": _Op(
            lambda p, t: weighted_mse(p, t, full),
            lambda p, t, p0: weighted_mse(p, t, full)[0],
            (),
        ),
        "vamos": _Op(
            lambda p, t: _total_and_grad(p, t, detached),
            lambda p, t, p0: vamos_loss(p, t, detached, weight_pred=p0)[0].total,
            TERM_NAMES,
        ),
        "vamos_full": _Op(
            lambda p, t: _total_and_grad(p, t, full),
            lambda p, t, p0: vamos_loss(p, t, full)[0].total,
            TERM_NAMES,
        ),
    }
    for name, (axis, kind) in _TERM_SPEC.items():
        op_id = f"{'mip' if kind == 'max' else 'aip'}_{axis}"
        ops[op_id] = _Op(
            lambda p, t, a=axis, k=kind: projection_l1(p, t, a, k),
            lambda p, t, p0, a=axis, k=kind: projection_l1(p, t, a, k)[0],
            (name,),
        )
    return ops


GRADCHECK_OPS = _make_ops()


def kink_pixels(pred, target, terms, h: float) -> np.ndarray:
    """Pixels whose +-h perturbation may cross a kink of an L1/max projection term."""
    p, t = _pair(pred, target)
    bad = np.zeros(p.shape, dtype=bool)
    for name in terms:
        axis, kind = _TERM_SPEC[name]
        ax = COLLAPSED_AXIS[axis]
        d = profile(p, axis, kind) - profile(t, axis, kind)
        near = np.abs(d) <= 2 * h
        if kind == "max" and p.shape[ax] > 1:
            top2 = np.sort(p, axis=ax).take([-1, -2], axis=ax)
            gap = top2.take(0, axis=ax) - top2.take(1, axis=ax)
            near |= gap <= 2 * h
        bad |= np.expand_dims(near, ax)
    return bad


def check_gradient(analytic, objective, pred, target, terms=(), h: float = 1e-4):
    """Compare an analytic gradient against central differences.

    Returns ``(abs_err, scale, excluded)``: per-pixel absolute errors (NaN on
    excluded pixels) and the infinity norm of the gradient over checked pixels,
    which is the denominator of the relative error.
    """
    p0, t = _pair(pred, target)
    _, grad = analytic(p0, t)
    excluded = kink_pixels(p0, t, terms, h) if terms else np.zeros(p0.shape, dtype=bool)
    err = np.full(p0.shape, np.nan)
    scale = 0.0
    for idx in np.ndindex(p0.shape):
        if excluded[idx]:
            continue
        up, dn = p0.copy(), p0.copy()
        up[idx] += h
        dn[idx] -= h
        numeric = (objective(up, t, p0) - objective(dn, t, p0)) / (2 * h)
        err[idx] = abs(grad[idx] - numeric)
        scale = max(scale, abs(grad[idx]), abs(numeric))
    return err, scale, excluded


def _random_pair(rng, shape, tied: bool):
    pred = rng.uniform(0.05, 0.95, shape)
    target = rng.uniform(0.0, 1.0, shape)
    if tied:
        # duplicate the maximum of every other column and row: exact ties
        for x in range(0, shape[1], 2):
            col = pred[:, x]
            z = int(np.argmax(col))
            col[(z + 1) % shape[0]] = col[z]
        for zrow in range(1, shape[0], 2):
            row = pred[zrow]
            x = int(np.argmax(row))
            row[(x + 1) % shape[1]] = row[x]
    return pred, target


def grad_check(op_id: str, trials: int = 100, seed: int = 0, shape=(8, 8), h: float = 1e-4,
               threshold: float = 1e-4, tied: bool = False, grad_scale: float = 1.0,
               ) -> GradCheckReport:
    """Central-difference check of a registered loss op on random float64 inputs.

    The relative error of a pixel is its absolute error divided by the largest
    gradient magnitude of that trial; pointwise ratios are meaningless where
    the two weight terms of the gradient cancel. ``grad_scale`` multiplies the analytic gradient and exists for negative
    controls. Pixels next to a kink or max tie are reported as excluded.
    """
    try:
        op = GRADCHECK_OPS[op_id]
    except KeyError:
        raise KeyError(f"unknown op {op_id!r}; choose from {sorted(GRADCHECK_OPS)}") from None

    def analytic(p, t):
        value, grad = op.analytic(p, t)
        return value, grad_scale * grad

    rng = np.random.default_rng(seed)
    report = GradCheckReport(op_id, trials, threshold)
    for trial in range(trials):
        pred, target = _random_pair(rng, shape, tied)
        err, scale, excluded = check_gradient(analytic, op.objective, pred, target, op.terms, h)
        report.excluded.extend((trial, *map(int, ij)) for ij in np.argwhere(excluded))
        checked = ~excluded
        report.n_checked += int(checked.sum())
        if not checked.any():
            continue
        rel = err / max(scale, 1e-300)
        report.max_rel_error = max(report.max_rel_error, float(np.nanmax(rel)))
        for ij in np.argwhere(checked & (rel >= threshold)):
            report.failures.append((trial, *map(int, ij), float(rel[tuple(ij)])))
    return report
