"""Band-averaged PSNR and SSIM for hyperspectral cubes."""

from __future__ import annotations

from typing import Union

import numpy as np
from skimage.metrics import mean_squared_error, peak_signal_noise_ratio, structural_similarity

from .cassi_model import HsiCube
from .errors import DimensionError, DomainError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

CubeLike = Union[HsiCube, np.ndarray]


def _pair(ref: CubeLike, test: CubeLike) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(ref.data if isinstance(ref, HsiCube) else ref, dtype=np.float64)
    b = np.asarray(test.data if isinstance(test, HsiCube) else test, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"extent mismatch: {a.shape} vs {b.shape}", axis="shape")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.ndim != 3:
        raise DimensionError(f"expected H x W x bands, got shape {a.shape}", axis="rank")
    return a, b


def band_psnr(ref: CubeLike, test: CubeLike, peak: float = 1.0) -> np.ndarray:
    """PSNR of every band in dB, capped at PSNR_CAP (zero error reports the cap)."""
    if peak <= 0:
        raise DomainError(f"peak must be > 0, got {peak}")
    a, b = _pair(ref, test)
    values = []
    for n in range(a.shape[2]):
        if mean_squared_error(a[:, :, n], b[:, :, n]) == 0.0:
            values.append(PSNR_CAP)
        else:
            db = peak_signal_noise_ratio(a[:, :, n], b[:, :, n], data_range=peak)
            values.append(min(float(db), PSNR_CAP))
    return np.array(values)


def psnr(ref: CubeLike, test: CubeLike, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) per band, averaged over bands."""
    return float(np.mean(band_psnr(ref, test, peak)))


def band_ssim(ref: CubeLike, test: CubeLike) -> np.ndarray:
    a, b = _pair(ref, test)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise DimensionError(
            f"SSIM needs spatial extents >= {SSIM_WINDOW}, got {a.shape[:2]}", axis="height"
        )
    return np.array([
        structural_similarity(
            a[:, :, n], b[:, :, n], data_range=1.0, gaussian_weights=True, sigma=SSIM_SIGMA,
            use_sample_covariance=False, K1=SSIM_K1, K2=SSIM_K2,
        )
        for n in range(a.shape[2])
    ])


def ssim(ref: CubeLike, test: CubeLike) -> float:
    """Single-scale SSIM (Gaussian window 11, sigma 1.5) per band, averaged."""
    return float(np.mean(band_ssim(ref, test)))


def evaluate(ref: CubeLike, test: CubeLike) -> dict[str, float]:
    out = {"psnr": psnr(ref, test)}
    a, _ = _pair(ref, test)
    out["ssim"] = ssim(ref, test) if min(a.shape[:2]) >= SSIM_WINDOW else float("nan")
    return out
