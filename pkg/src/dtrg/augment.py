"""Mixup / CutMix interpolation producing (x_mixed, y_a, y_b, lam) batches.

Convention throughout: ``lam`` is the weight of the *second* source,
``x_mixed = (1 - lam) * x_a + lam * x_b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MODES = ("none", "mixup", "cutmix")
DEFAULT_ALPHA = {"mixup": 0.1, "cutmix": 1.0}


@dataclass
class MixedBatch:
    x: np.ndarray
    y_a: np.ndarray
    y_b: np.ndarray
    lam: np.ndarray  # one entry per sample
    mode: str = "none"


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """One Beta(alpha, alpha) draw built from two Gamma(alpha) draws."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    while True:
        g1 = rng.gamma(alpha)
        g2 = rng.gamma(alpha)
        if g1 + g2 > 0:  # both can underflow for tiny alpha
            return float(g1 / (g1 + g2))


def mixup(x_a, x_b, lam):
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    if x_a.shape != x_b.shape:
        raise ValueError(f"shape mismatch {x_a.shape} vs {x_b.shape}")
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam.reshape((-1,) + (1,) * (x_a.ndim - 1))
    return (1.0 - lam) * x_a + lam * x_b


def random_box(height: int, width: int, area: float, rng: np.random.Generator):
    """Box of ``area`` fraction with the image's aspect ratio, uniform centre, clipped.

    Returns (top, bottom, left, right) with exclusive ends.
    """
    side = np.sqrt(area)
    cut_h = int(round(height * side))
    cut_w = int(round(width * side))
    cy = int(rng.integers(height))
    cx = int(rng.integers(width))
    top = int(np.clip(cy - cut_h // 2, 0, height))
    bottom = int(np.clip(cy - cut_h // 2 + cut_h, 0, height))
    left = int(np.clip(cx - cut_w // 2, 0, width))
    right = int(np.clip(cx - cut_w // 2 + cut_w, 0, width))
    return top, bottom, left, right


def paste_box(x_a, x_b, box):
    """Copy region ``box`` of ``x_b`` into ``x_a``; images are (..., H, W, C).

    Returns the pasted image and the pasted-area fraction.
    """
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    if x_a.ndim < 3 or x_a.shape != x_b.shape:
        raise ValueError("cutmix needs two image arrays of equal (..., H, W, C) shape")
    top, bottom, left, right = box
    height, width = x_a.shape[-3], x_a.shape[-2]
    out = x_a.copy()
    out[..., top:bottom, left:right, :] = x_b[..., top:bottom, left:right, :]
    area = (bottom - top) * (right - left)
    return out, area / (height * width)


def cutmix(x_a, x_b, lam_raw: float, rng: np.random.Generator):
    """Paste a random box of area ``lam_raw`` from ``x_b``; return (x_mixed, actual fraction)."""
    x_a = np.asarray(x_a)
    if x_a.ndim < 3:
        raise ValueError("cutmix needs image inputs shaped (..., H, W, C)")
    if not 0.0 <= lam_raw <= 1.0:
        raise ValueError("lam_raw must lie in [0, 1]")
    box = random_box(x_a.shape[-3], x_a.shape[-2], lam_raw, rng)
    return paste_box(x_a, x_b, box)


def mix_batch(x, y, mode: str, alpha: float, rng: np.random.Generator,
              fixed_lambda: float | None = None) -> MixedBatch:
    """Pair every sample with a partner from a seeded permutation of the batch and mix.

    One coefficient is drawn per batch. ``fixed_lambda`` bypasses the Beta draw.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    n = len(y)
    if mode not in MODES:
        raise ValueError(f"unknown augmentation mode {mode!r}")
    if mode == "none":
        return MixedBatch(x, y, y.copy(), np.zeros(n), mode)
    perm = rng.permutation(n)
    lam = sample_lambda(alpha, rng) if fixed_lambda is None else float(fixed_lambda)
    if mode == "mixup":
        mixed = mixup(x, x[perm], lam)
    else:
        mixed, lam = cutmix(x, x[perm], lam, rng)
    return MixedBatch(mixed, y, y[perm], np.full(n, lam), mode)
