"""Synthetic degradations for ``[lines, cols, bands]`` cubes in [0, 1].

Applied in a fixed order: Gaussian, impulse, stripe, deadline. Gaussian
noise is non-i.i.d. across bands (one sigma per band, drawn from a range on
the 0-255 scale). The other three each act on their own random third of the
bands (``ceil(bands / 3)``):

* impulse: salt and pepper at a per-band density in [0.10, 0.70]
* stripe: additive per-column offsets U[-0.25, 0.25] on 5-15 % of columns
* deadline: 5-15 % of columns set to zero
"""
from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSpec:
    sigma: tuple = (0.0, 0.0)
    impulse: bool = False
    stripe: bool = False
    deadline: bool = False
    impulse_range: tuple = (0.10, 0.70)
    column_range: tuple = (0.05, 0.15)
    stripe_amplitude: float = 0.25
    band_fraction: float = 1 / 3
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma", "impulse_range", "column_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.impulse_range[1] > 1 or self.column_range[1] > 1:
            raise ValueError("fractions must lie in [0, 1]")
        if not 0 < self.band_fraction <= 1:
            raise ValueError("band_fraction must lie in (0, 1]")

    @classmethod
    def gaussian(cls, lo: float, hi: float, seed: int = 0) -> "NoiseSpec":
        return cls(sigma=(lo, hi), seed=seed)

    @classmethod
    def mixture(cls, seed: int = 0) -> "NoiseSpec":
        """Gaussian sigma in [0, 95] plus impulse, stripe and deadline."""
        return cls(sigma=(0.0, 95.0), impulse=True, stripe=True, deadline=True, seed=seed)

    def replace(self, **kw) -> "NoiseSpec":
        return dataclasses.replace(self, **kw)


def _band_subset(rng, bands: int, fraction: float) -> np.ndarray:
    k = min(bands, math.ceil(bands * fraction))
    return np.sort(rng.choice(bands, size=k, replace=False))


def _columns(rng, cols: int, frac_range) -> np.ndarray:
    frac = rng.uniform(*frac_range)
    k = min(cols, max(1, round(frac * cols)))
    return np.sort(rng.choice(cols, size=k, replace=False))


def add_noise(x: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Noisy copy of ``x``; identical ``(x, spec)`` give identical bits."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a [lines, cols, bands] cube, got shape {x.shape}")
    if x.size and (x.min() < 0 or x.max() > 1 or not np.isfinite(x).all()):
        raise ValueError("clean cube must lie in [0, 1]")
    lines, cols, bands = x.shape
    y = x.copy()
    gauss, imp, stripe, dead = np.random.SeedSequence(spec.seed).spawn(4)

    if spec.sigma[1] > 0:
        for b, child in enumerate(gauss.spawn(bands)):
            rng = np.random.default_rng(child)
            sigma = rng.uniform(*spec.sigma) / 255.0
            y[:, :, b] += sigma * rng.standard_normal((lines, cols))

    if spec.impulse:
        rng = np.random.default_rng(imp)
        for b in _band_subset(rng, bands, spec.band_fraction):
            density = rng.uniform(*spec.impulse_range)
            hit = rng.random((lines, cols)) < density
            salt = rng.random((lines, cols)) < 0.5
            y[:, :, b][hit & salt] = 1.0
            y[:, :, b][hit & ~salt] = 0.0

    if spec.stripe:
        rng = np.random.default_rng(stripe)
        for b in _band_subset(rng, bands, spec.band_fraction):
            c = _columns(rng, cols, spec.column_range)
            y[:, c, b] += rng.uniform(-spec.stripe_amplitude, spec.stripe_amplitude, size=c.size)

    if spec.deadline:
        rng = np.random.default_rng(dead)
        for b in _band_subset(rng, bands, spec.band_fraction):
            y[:, _columns(rng, cols, spec.column_range), b] = 0.0
    return y


def _pair(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise ValueError(f"expected 'lo, hi', got {text!r}")
    return float(parts[0]), float(parts[1])


def spec_from_config(parser: configparser.ConfigParser, section: str = "noise") -> NoiseSpec:
    """Read a ``[noise]`` section: sigma = lo, hi; impulse/stripe/deadline = yes|no; seed."""
    if not parser.has_section(section):
        return NoiseSpec()
    s = parser[section]
    kw = {}
    for key in ("sigma", "impulse_range", "column_range"):
        if key in s:
            kw[key] = _pair(s[key])
    for key in ("impulse", "stripe", "deadline"):
        if key in s:
            kw[key] = s.getboolean(key)
    for key in ("stripe_amplitude", "band_fraction"):
        if key in s:
            kw[key] = s.getfloat(key)
    if "seed" in s:
        kw["seed"] = s.getint("seed")
    known = {f.name for f in dataclasses.fields(NoiseSpec)}
    unknown = set(s) - known - set(parser.defaults())
    if unknown:
        raise ValueError(f"unknown [{section}] keys: {sorted(unknown)}")
    return NoiseSpec(**kw)


def load_spec(path) -> NoiseSpec:
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    return spec_from_config(parser)
