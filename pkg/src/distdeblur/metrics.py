"""Reference-based image quality: SNR in dB and mean SSIM."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

__all__ = ["SNR_CAP_DB", "snr", "ssim", "QualityReport", "write_reports"]

SNR_CAP_DB = 300.0


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def snr(reference: np.ndarray, estimate: np.ndarray) -> float:
    """``10 log10(||ref||^2 / ||ref - est||^2)``, capped at ``SNR_CAP_DB``."""
    _same_shape(reference, estimate)
    signal = float(np.sum(reference * reference))
    if signal == 0.0:
        raise ValueError("reference image is all zero")
    err = reference - estimate
    noise = float(np.sum(err * err))
    if noise == 0.0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * math.log10(signal / noise))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img, k):
    n = len(k)
    h, w = img.shape
    rows = sum(k[j] * img[j:h - n + 1 + j, :] for j in range(n))
    return sum(k[j] * rows[:, j:w - n + 1 + j] for j in range(n))


def ssim(reference, estimate, dynamic_range=6000.0, window=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Mean structural similarity with a Gaussian window (valid positions only).

    Images smaller than the window use the largest odd window that fits.
    """
    _same_shape(reference, estimate)
    if dynamic_range <= 0:
        raise ValueError("dynamic range must be positive")
    x = np.asarray(reference, dtype=np.float64)
    y = np.asarray(estimate, dtype=np.float64)
    side = min(window, x.shape[0], x.shape[1])
    if side % 2 == 0:
        side -= 1
    k = _gaussian_window(side, sigma)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mx * mx
    syy = _filter_valid(y * y, k) - my * my
    sxy = _filter_valid(x * y, k) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class QualityReport:
    method: str
    lam: float
    snr_db: float
    ssim: float


def write_reports(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "lambda", "snr_db", "ssim"])
        for r in reports:
            d = asdict(r)
            writer.writerow([d["method"], repr(d["lam"]), repr(d["snr_db"]), repr(d["ssim"])])
