"""Image fidelity metrics: grayscale conversion, PSNR, SSIM and the per-pose report."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

LUMA = np.array([0.299, 0.587, 0.114])
PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


class MetricError(ValueError):
    pass


def to_grayscale(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.ndim < 1 or img.shape[-1] != 3:
        raise MetricError(f"grayscale conversion needs 3 channels, got shape {img.shape}")
    return img @ LUMA


def _same_shape(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1/MSE) for images in [0, 1]; identical images report the 99 dB cap."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gauss_taps() -> np.ndarray:
    x = np.arange(SSIM_WIN) - SSIM_WIN // 2
    k = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return k / k.sum()


_TAPS = _gauss_taps()


def _filter_valid(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter keeping only windows fully inside the image."""
    y = correlate1d(x, _TAPS, axis=0, mode="constant")
    y = correlate1d(y, _TAPS, axis=1, mode="constant")
    h = SSIM_WIN // 2
    return y[h : x.shape[0] - h, h : x.shape[1] - h]


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    a, b = _same_shape(a, b)
    if a.ndim != 2:
        raise MetricError(f"ssim expects single-channel images, got shape {a.shape}")
    if min(a.shape) < SSIM_WIN:
        raise MetricError(f"image {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a), _filter_valid(b)
    saa = _filter_valid(a * a) - mu_a * mu_a
    sbb = _filter_valid(b * b) - mu_b * mu_b
    sab = _filter_valid(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03)."""
    a, b = _same_shape(a, b)
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(ssim_map(a, b, data_range).mean(), -1.0, 1.0))


def normalize_depth_pair(d1, d2) -> tuple[np.ndarray, np.ndarray]:
    """Divide both depth maps by their joint maximum."""
    d1, d2 = _same_shape(d1, d2)
    peak = max(float(d1.max(initial=0.0)), float(d2.max(initial=0.0)))
    if peak <= 0:
        return np.zeros_like(d1), np.zeros_like(d2)
    return d1 / peak, d2 / peak


def ssim_depth(d1, d2) -> float:
    return ssim(*normalize_depth_pair(d1, d2))


def ssim_gray(c1, c2) -> float:
    return ssim(to_grayscale(c1), to_grayscale(c2))


def pose_metrics(color, depth, ref_color, ref_depth) -> dict:
    return {
        "ssim_depth": ssim_depth(depth, ref_depth),
        "ssim_gray": ssim_gray(color, ref_color),
        "psnr": psnr(np.clip(color, 0, 1), ref_color),
    }


REPORT_KEYS = ("ssim_depth", "ssim_gray", "psnr")


def metric_report(renders: list, references: list, ids=None) -> dict:
    """Per-pose and mean metrics for aligned ``(color, depth)`` render lists."""
    if len(renders) != len(references):
        raise MetricError(f"{len(renders)} renders but {len(references)} reference poses")
    ids = list(range(len(renders))) if ids is None else list(ids)
    if len(ids) != len(renders):
        raise MetricError("one id per pose required")
    rows = []
    for pid, (c, d), (rc, rd) in zip(ids, renders, references):
        rows.append({"id": pid, **pose_metrics(c, d, rc, rd)})
    mean = {k: (float(np.mean([r[k] for r in rows])) if rows else None) for k in REPORT_KEYS}
    return {"poses": rows, "mean": mean, "lpips": None}


def validate_report(report: dict) -> None:
    """Raise MetricError unless ``report`` follows the documented schema."""
    if set(report) != {"poses", "mean", "lpips"} or report["lpips"] is not None:
        raise MetricError("report must have exactly poses, mean and a null lpips")
    if set(report["mean"]) != set(REPORT_KEYS):
        raise MetricError("mean block has the wrong keys")
    for row in report["poses"]:
        if set(row) != {"id", *REPORT_KEYS}:
            raise MetricError(f"bad pose row keys {sorted(row)}")
