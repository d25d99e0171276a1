"""Procedural hyperspectral cubes and training patches.

A cube is a sum of a few materials. Each material has a smooth spectrum
(a sum of Gaussian bumps over the band axis) and an abundance map (white
noise smoothed at a random scale), so neighbouring pixels and bands are
strongly correlated as in real scenes.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter


def synth_cube(lines: int, cols: int, bands: int, seed: int = 0, materials: int = 4) -> np.ndarray:
    """``[lines, cols, bands]`` float64 cube with values in [0.05, 0.95]."""
    if min(lines, cols, bands) < 1:
        raise ValueError("lines, cols and bands must be positive")
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, bands)
    cube = np.zeros((lines, cols, bands))
    for _ in range(materials):
        spectrum = np.zeros(bands)
        for _ in range(rng.integers(1, 4)):
            centre = rng.uniform(-0.2, 1.2)
            width = rng.uniform(0.1, 0.5)
            spectrum += rng.uniform(0.3, 1.0) * np.exp(-0.5 * ((grid - centre) / width) ** 2)
        scale = rng.uniform(1.5, 6.0)
        field = gaussian_filter(rng.standard_normal((lines, cols)), scale, mode="wrap")
        field = (field - field.min()) / (np.ptp(field) or 1.0)
        cube += field[:, :, None] * spectrum[None, None, :]
    lo, hi = cube.min(), cube.max()
    return 0.05 + 0.9 * (cube - lo) / ((hi - lo) or 1.0)


def synth_set(count: int, lines: int, cols: int, bands: int, seed: int = 0) -> list[np.ndarray]:
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [synth_cube(lines, cols, bands, int(s)) for s in seeds]


def sample_patches(cubes, rng: np.random.Generator, batch: int, lines: int, cols: int) -> np.ndarray:
    """``[batch, lines, cols, bands]`` random crops, one cube drawn per patch."""
    out = []
    for _ in range(batch):
        cube = cubes[rng.integers(len(cubes))]
        if cube.shape[0] < lines or cube.shape[1] < cols:
            raise ValueError(f"cube {cube.shape} is smaller than the {lines}x{cols} patch")
        l0 = rng.integers(cube.shape[0] - lines + 1)
        c0 = rng.integers(cube.shape[1] - cols + 1)
        out.append(cube[l0:l0 + lines, c0:c0 + cols])
    return np.stack(out)
