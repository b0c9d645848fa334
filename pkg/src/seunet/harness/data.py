"""Synthetic multi-scale segmentation data.

``regions``: Voronoi cells, each filled with one of five equal-mean
textures (flat, horizontal/vertical/diagonal stripes, dots) whose period
varies from cell to cell, so every image contains a range of scales.

``blobs``: nuclei-like bright ellipses of varied size on a dark
background; binary masks.

Textures are sinusoids with periods well above two pixels and the additive
noise is low-pass filtered, so images stay band-limited.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import DATASETS, ConfigError

REGION_CLASSES = ("flat", "horizontal", "vertical", "diagonal", "dots")


@dataclass
class SyntheticSample:
    image: np.ndarray  # (1, H, W) in [0, 1]
    mask: np.ndarray  # (H, W) int
    metadata: dict = field(default_factory=dict)


def _texture(kind: int, yy, xx, period: float, phase: float) -> np.ndarray:
    w = 2.0 * np.pi / period
    if kind == 0:
        return np.zeros_like(yy)
    if kind == 1:
        return np.sin(w * yy + phase)
    if kind == 2:
        return np.sin(w * xx + phase)
    if kind == 3:
        return np.sin(w * (xx + yy) / np.sqrt(2.0) + phase)
    return np.cos(w * xx + phase) * np.cos(w * yy + phase)


def regions_sample(rng: np.random.Generator, size: int, n_classes: int = 5,
                   n_cells: tuple[int, int] = (6, 9), period: tuple[float, float] = (5.0, 12.0),
                   noise: float = 0.04) -> SyntheticSample:
    if not 2 <= n_classes <= len(REGION_CLASSES):
        raise ConfigError(f"regions supports 2..{len(REGION_CLASSES)} classes, got {n_classes}")
    k = int(rng.integers(n_cells[0], n_cells[1] + 1))
    k = max(k, n_classes)
    centres = rng.uniform(0, size, (k, 2))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d = (yy[None] - centres[:, 0, None, None]) ** 2 + (xx[None] - centres[:, 1, None, None]) ** 2
    cell = np.argmin(d, axis=0)
    labels = np.concatenate([rng.permutation(n_classes), rng.integers(0, n_classes, k - n_classes)])
    periods = rng.uniform(*period, k)
    phases = rng.uniform(0, 2 * np.pi, k)
    img = np.full((size, size), 0.5)
    for c in range(k):
        sel = cell == c
        img[sel] += 0.4 * _texture(int(labels[c]), yy, xx, periods[c], phases[c])[sel]
    img += noise * gaussian_filter(rng.standard_normal((size, size)), 0.7) / 0.4
    mask = labels[cell].astype(np.int64)
    meta = {"generator": "regions", "cells": k, "cell_labels": labels.tolist(),
            "periods": periods.round(6).tolist()}
    return SyntheticSample(np.clip(img, 0.0, 1.0)[None], mask, meta)


def blobs_sample(rng: np.random.Generator, size: int, radius: tuple[float, float] = (2.0, 8.0),
                 fraction: tuple[float, float] = (0.15, 0.45), noise: float = 0.04) -> SyntheticSample:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    target = rng.uniform(*fraction)
    mask = np.zeros((size, size), dtype=bool)
    radii = []
    for _ in range(1000):
        if mask.mean() >= target:
            break
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(*radius) * rng.uniform(0.7, 1.3, 2)
        t = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        ell = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        if (mask | ell).mean() > 0.5:
            continue
        mask |= ell
        radii.append(float(np.sqrt(rx * ry)))
    img = 0.25 + 0.5 * gaussian_filter(mask.astype(np.float64), 0.8)
    img += noise * gaussian_filter(rng.standard_normal((size, size)), 0.7) / 0.4
    meta = {"generator": "blobs", "n_blobs": len(radii), "radii": np.round(radii, 6).tolist(),
            "foreground": float(mask.mean())}
    return SyntheticSample(np.clip(img, 0.0, 1.0)[None], mask.astype(np.int64), meta)


def generate_samples(spec: str, seed: int, n: int, size: int = 64, classes: int = 5) -> list[SyntheticSample]:
    if spec not in DATASETS:
        raise ConfigError(f"unknown dataset generator {spec!r}; expected one of {DATASETS}")
    if spec == "blobs" and classes != 2:
        raise ConfigError(f"blobs is binary, classes must be 2 (got {classes})")
    rng = np.random.default_rng(seed)
    if spec == "regions":
        return [regions_sample(rng, size, classes) for _ in range(n)]
    return [blobs_sample(rng, size) for _ in range(n)]


def generate_dataset(spec: str, seed: int, n_train: int = 200, n_test: int = 50, size: int = 64,
                     classes: int = 5) -> tuple[list[SyntheticSample], list[SyntheticSample]]:
    """Deterministic train/test split; the two halves use independent streams."""
    train = generate_samples(spec, seed * 2 + 0, n_train, size, classes)
    test = generate_samples(spec, seed * 2 + 1, n_test, size, classes)
    return train, test


def dataset_for(config) -> tuple[list[SyntheticSample], list[SyntheticSample]]:
    return generate_dataset(config.dataset, config.data_seed, config.n_train, config.n_test,
                            config.image_size, config.classes)


def stack(samples) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


class BatchIterator:
    """Shuffled mini-batches of the training set, served as-is.

    ``transforms`` is part of the public surface so callers can verify that
    no augmentation (in particular no rescaling) is applied.
    """

    transforms: tuple = ()

    def __init__(self, samples, batch_size: int, rng: np.random.Generator):
        self.images, self.masks = stack(samples)
        self.batch_size, self.rng = batch_size, rng

    def __len__(self):
        return -(-len(self.images) // self.batch_size)

    def __iter__(self):
        order = self.rng.permutation(len(self.images))
        for i in range(0, len(order), self.batch_size):
            idx = order[i:i + self.batch_size]
            yield self.images[idx], self.masks[idx]
