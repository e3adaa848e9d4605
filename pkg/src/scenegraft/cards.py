"""Synthetic test cards for the toy pipeline and the test-suite."""

from __future__ import annotations

import numpy as np


def scene_card(size: int = 64, seed: int = 0) -> np.ndarray:
    """A dark outdoor-ish scene (luminance stays below 0.45): sky, ground, a road."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    horizon = 0.35 + 0.1 * rng.random()
    sky = np.stack([0.10 + 0.15 * (1 - yy), 0.15 + 0.15 * (1 - yy), 0.30 + 0.10 * (1 - yy)], -1)
    ground = np.stack([0.18 + 0.05 * yy, 0.22 + 0.04 * yy, 0.10 + 0.02 * yy], -1)
    img = np.where((yy < horizon)[..., None], sky, ground)
    road = np.abs(xx - 0.5 - 0.3 * (yy - horizon)) < 0.08 + 0.25 * np.clip(yy - horizon, 0, None)
    img = np.where((road & (yy >= horizon))[..., None], np.array([0.25, 0.25, 0.27]), img)
    img = img + 0.03 * rng.normal(size=img.shape)
    return np.clip(img, 0.02, 0.42)


def reference_card(size: int = 64, seed: int = 0) -> np.ndarray:
    """A bright, coloured stick figure on a near-black background."""
    rng = np.random.default_rng(seed)
    img = np.full((size, size, 3), 0.04) + 0.01 * rng.random((size, size, 3))
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    cx = size * (0.45 + 0.1 * rng.random())
    s = size / 64
    head = (yy - 14 * s) ** 2 + (xx - cx) ** 2 < (6 * s) ** 2
    torso = (np.abs(xx - cx) < 8 * s) & (yy > 20 * s) & (yy < 40 * s)
    legs = ((np.abs(xx - cx - 4 * s) < 3 * s) | (np.abs(xx - cx + 4 * s) < 3 * s)) & (yy >= 40 * s) & (yy < 58 * s)
    shirt = rng.uniform(0.3, 0.6), rng.uniform(0.55, 0.8), 1.0
    img[head] = (1.0, 0.85, 0.7)
    img[torso] = shirt
    img[legs] = (0.95, 0.85, 0.35)
    return img


def square_card(size: int = 32, lo: int = 8, hi: int = 24) -> np.ndarray:
    """White square ``[lo, hi)`` on black."""
    img = np.zeros((size, size, 3))
    img[lo:hi, lo:hi] = 1.0
    return img


def gradient_card(size: int = 64) -> np.ndarray:
    """Horizontal grey ramp from 0 (left column) to 1 (right column)."""
    ramp = np.linspace(0.0, 1.0, size)
    return np.repeat(np.broadcast_to(ramp, (size, size))[..., None], 3, axis=-1).copy()
