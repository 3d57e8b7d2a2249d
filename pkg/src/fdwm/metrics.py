"""PSNR, SSIM and the equality indicator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_VAL = 1.0
SSIM_WINDOW = 8
C1 = (0.01 * MAX_VAL) ** 2
C2 = (0.03 * MAX_VAL) ** 2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with MAX = 1; ``inf`` for identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(MAX_VAL ** 2 / mse)


def ssim(a, b) -> float:
    """Single-scale SSIM: uniform 8x8 window, stride 1, averaged over windows and channels."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    wa = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW), axis=(0, 1))
    wb = sliding_window_view(b, (SSIM_WINDOW, SSIM_WINDOW), axis=(0, 1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa ** 2).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a ** 2 + mu_b ** 2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


def delta(x, y) -> int:
    return int(x == y)


@dataclass(frozen=True)
class QualityReport:
    psnr: np.ndarray
    ssim: np.ndarray
    ids: np.ndarray

    @property
    def infinite_count(self) -> int:
        return int(np.sum(np.isinf(self.psnr)))

    @property
    def mean_psnr(self) -> float:
        """Mean over finite values; identical pairs are excluded and counted separately."""
        finite = self.psnr[np.isfinite(self.psnr)]
        return float(finite.mean()) if finite.size else math.inf

    @property
    def mean_ssim(self) -> float:
        return float(self.ssim.mean())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair_id", "psnr_db", "ssim"])
            for i, p, s in zip(self.ids, self.psnr, self.ssim):
                writer.writerow([int(i), "inf" if math.isinf(p) else f"{p:.6f}", f"{s:.6f}"])


def quality_report(originals, perturbed, ids=None) -> QualityReport:
    originals = np.asarray(originals)
    perturbed = np.asarray(perturbed)
    if len(originals) != len(perturbed):
        raise ValueError("image sets differ in length")
    ids = np.arange(len(originals)) if ids is None else np.asarray(ids)
    p = np.array([psnr(a, b) for a, b in zip(originals, perturbed)])
    s = np.array([ssim(a, b) for a, b in zip(originals, perturbed)])
    return QualityReport(p, s, ids)
