"""Full-reference quality metrics for ``[lines, cols, bands]`` cubes."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

WINDOW = 11
SIGMA = 1.5


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    ssim: float
    sam: float

    def as_row(self) -> str:
        return f"psnr={self.psnr:.4f} ssim={self.ssim:.6f} sam={self.sam:.6f}"


def _check(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; ``inf`` when the inputs are equal."""
    x, y = _check(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(x, y, peak: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), per band then averaged.

    Only windows lying fully inside the image contribute.
    """
    x, y = _check(x, y)
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if x.shape[0] < WINDOW or x.shape[1] < WINDOW:
        raise ValueError(f"image {x.shape[:2]} is smaller than the {WINDOW}x{WINDOW} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    r = WINDOW // 2
    crop = (slice(r, -r), slice(r, -r))

    def blur(a):
        return gaussian_filter(a, SIGMA, truncate=r / SIGMA, mode="reflect")[crop]

    scores = []
    for b in range(x.shape[2]):
        p, q = x[..., b], y[..., b]
        mp, mq = blur(p), blur(q)
        vp = blur(p * p) - mp * mp
        vq = blur(q * q) - mq * mq
        cov = blur(p * q) - mp * mq
        s = ((2 * mp * mq + c1) * (2 * cov + c2)) / ((mp * mp + mq * mq + c1) * (vp + vq + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


def sam(x, y) -> float:
    """Mean spectral angle in radians over pixels whose spectra are nonzero in both."""
    x, y = _check(x, y)
    a = x.reshape(-1, x.shape[-1])
    b = y.reshape(-1, y.shape[-1])
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    keep = (na > 0) & (nb > 0)
    if not keep.any():
        raise ValueError("every spectrum is zero; the spectral angle is undefined")
    cos = np.einsum("ij,ij->i", a[keep], b[keep]) / (na[keep] * nb[keep])
    return float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))


def zero_spectra(x) -> int:
    """Number of all-zero spectra (skipped by :func:`sam`)."""
    x = np.asarray(x)
    return int((~x.reshape(-1, x.shape[-1]).any(axis=1)).sum())


def quality(x, y, peak: float = 1.0) -> QualityReport:
    return QualityReport(psnr(x, y, peak), ssim(x, y, peak), sam(x, y))
