"""Image-quality metrics for en face projections and B-scans, and the eval report.

Flag conventions: PSNR of identical images is ``math.inf``; NCC of a
zero-variance image and the paired t-test of zero-variance differences are
``math.nan``. Reports serialise these as ``"inf"`` and ``null``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage, stats

from .errors import ShapeError
from .projection import enface_mip
from .volume import ValidityMask, Volume

LAPLACIAN_KERNEL = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)


@dataclass(frozen=True)
class MetricResult:
    name: str
    value: float
    higher_is_better: bool
    n_samples: int = 1


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ShapeError("empty images")
    return a, b


def l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def mie(a, b) -> float:
    """Mean intensity error: absolute difference of the global means."""
    a, b = _pair(a, b)
    return float(abs(a.mean() - b.mean()))


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img, win):
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over valid window positions."""
    a, b = _pair(a, b)
    if min(a.shape) < win_size:
        raise ShapeError(f"SSIM needs images of at least {win_size}x{win_size}, got {a.shape}")
    win = gaussian_window(win_size, sigma)
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a ** 2
    var_b = _filter_valid(b * b, win) - mu_b ** 2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def ncc(a, b) -> float:
    a, b = _pair(a, b)
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if denom == 0.0:
        return math.nan
    return float(np.sum(da * db)) / denom


def sobel_magnitude(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    gz = ndimage.sobel(img, axis=0, mode="reflect")
    gx = ndimage.sobel(img, axis=1, mode="reflect")
    return np.hypot(gz, gx)


def gradient_l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(sobel_magnitude(a) - sobel_magnitude(b))))


def laplacian_variance(img) -> float:
    resp = ndimage.convolve(np.asarray(img, dtype=np.float64), LAPLACIAN_KERNEL, mode="reflect")
    return float(resp.var())


def laplacian_blur_diff(a, b) -> float:
    a, b = _pair(a, b)
    return abs(laplacian_variance(a) - laplacian_variance(b))


def sobel_edge_preservation(pred, gt, percentile: float = 90.0) -> float:
    """Fraction of ground-truth edge strength retained on its strongest edges.

    Argument order matters: edges are selected from ``gt``.
    """
    pred, gt = _pair(pred, gt)
    g_pred, g_gt = sobel_magnitude(pred), sobel_magnitude(gt)
    edges = g_gt >= np.percentile(g_gt, percentile)
    denom = float(g_gt[edges].sum())
    if denom == 0.0:
        return math.nan
    return float(np.minimum(g_pred[edges], g_gt[edges]).sum()) / denom


def paired_t_test(xs, ys) -> float:
    """Two-sided p-value of the paired-difference t statistic (n - 1 dof)."""
    d = np.asarray(xs, dtype=np.float64) - np.asarray(ys, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ShapeError("paired t-test needs two equal-length samples of size >= 2")
    sd = d.std(ddof=1)
    if sd == 0.0:
        return math.nan
    t = d.mean() / (sd / math.sqrt(d.size))
    return float(2.0 * stats.t.sf(abs(t), d.size - 1))


# --------------------------------------------------------------------------
# reports

MIP_METRICS = {
    "l1": (l1, False),
    "mie": (mie, False),
    "ssim": (ssim, True),
    "ncc": (ncc, True),
    "psnr": (psnr, True),
}
BSCAN_METRICS = {
    "gradient_l1": (gradient_l1, False),
    "laplacian_blur_diff": (laplacian_blur_diff, False),
    "sobel_edge_preservation": (sobel_edge_preservation, True),
    "psnr": (psnr, True),
}


def _json_value(v):
    if v is None:
        return None
    v = float(v)
    if math.isnan(v):
        return None
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


@dataclass
class EvalReport:
    volume_id: str
    mask_seed: int | None
    bscan_metrics: dict
    mip_metrics: dict
    per_slice: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "volume_id": self.volume_id,
            "mask_seed": self.mask_seed,
            "bscan_metrics": {k: _json_value(v) for k, v in self.bscan_metrics.items()},
            "mip_metrics": {k: _json_value(v) for k, v in self.mip_metrics.items()},
            "per_slice": [
                {k: (v if k == "index" else _json_value(v)) for k, v in row.items()}
                for row in self.per_slice
            ],
            "config": self.config,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2) + "\n"

    def results(self) -> list[MetricResult]:
        out = []
        n = len(self.per_slice)
        for name, (_, hib) in BSCAN_METRICS.items():
            out.append(MetricResult(f"bscan_{name}", self.bscan_metrics[name], hib, n))
        for name, (_, hib) in MIP_METRICS.items():
            out.append(MetricResult(f"mip_{name}", self.mip_metrics[name], hib, 1))
        return out


def _mean(values):
    """Mean ignoring undefined (NaN) entries; a single infinite PSNR makes it infinite."""
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def evaluate_pair(restored: Volume, gt: Volume, mask: ValidityMask, volume_id: str = "",
                  mask_seed: int | None = None, config: dict | None = None) -> EvalReport:
    """B-scan metrics on corrupted slices only; en face metrics on full MIPs."""
    if restored.shape != gt.shape:
        raise ShapeError(f"restored {restored.shape} vs ground truth {gt.shape}")
    if len(mask) != gt.n_slices:
        raise ShapeError("mask length does not match the volume")
    per_slice = []
    for n in mask.corrupted:
        row = {"index": n}
        for name, (fn, _) in BSCAN_METRICS.items():
            row[name] = fn(restored.data[n], gt.data[n])
        per_slice.append(row)
    bscan = {name: _mean([row[name] for row in per_slice]) for name in BSCAN_METRICS}
    mip_r, mip_g = enface_mip(restored), enface_mip(gt)
    mip = {name: fn(mip_r, mip_g) for name, (fn, _) in MIP_METRICS.items()}
    mip["lpips"] = None
    return EvalReport(volume_id, mask_seed, bscan, mip, per_slice, dict(config or {}))
