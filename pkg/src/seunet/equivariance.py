"""Image rescaling and scale-equivariance error measurement."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import conv2d_array

log = logging.getLogger(__name__)


def _scaled_dim(n: int, s: float) -> int:
    m = int(round(n * s))
    if m < 1:
        raise ValueError(f"rescale by {s} collapses a dimension of size {n} to {m}")
    return m


def _linear_matrix(n_in: int, n_out: int, s: float) -> np.ndarray:
    """Rows map output pixels to input pixels with pixel-centre alignment;
    coordinates outside the input are clamped to the border."""
    src = (np.arange(n_out) + 0.5) / s - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def rescale(image: np.ndarray, s: float) -> np.ndarray:
    """Bilinear rescale of the last two axes by factor ``s`` (s > 1 enlarges).

    Output spatial dims are ``round(s * H) x round(s * W)``.
    """
    if not s > 0:
        raise ValueError(f"scale factor must be positive, got {s}")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    ho, wo = _scaled_dim(h, s), _scaled_dim(w, s)
    if s == 1.0:
        return image.copy()
    ry = _linear_matrix(h, ho, s)
    rx = _linear_matrix(w, wo, s)
    return np.matmul(np.matmul(ry, image), rx.T)


def rescale_labels(labels: np.ndarray, s: float) -> np.ndarray:
    """Nearest-neighbour rescale of an integer label map (last two axes)."""
    if not s > 0:
        raise ValueError(f"scale factor must be positive, got {s}")
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    ho, wo = _scaled_dim(h, s), _scaled_dim(w, s)
    iy = np.minimum(np.floor((np.arange(ho) + 0.5) / s).astype(int), h - 1)
    ix = np.minimum(np.floor((np.arange(wo) + 0.5) / s).astype(int), w - 1)
    return labels[..., iy[:, None], ix[None, :]]


def _crop_common(a: np.ndarray, b: np.ndarray):
    h = min(a.shape[-2], b.shape[-2])
    w = min(a.shape[-1], b.shape[-1])
    return a[..., :h, :w], b[..., :h, :w]


def relative_errors(
    extractor: Callable[[np.ndarray], np.ndarray],
    images: Sequence[np.ndarray],
    s: float,
    extractor_prime: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[list[float], int]:
    """Per-image ||S_s Phi(f) - Phi'(S_s f)||^2 / ||S_s Phi(f)||^2.

    Returns the list of ratios and the number of images dropped because
    ``S_s Phi(f)`` was identically zero.
    """
    extractor_prime = extractor_prime or extractor
    ratios, excluded = [], 0
    for f in images:
        ref = rescale(extractor(f), s)
        other = extractor_prime(rescale(f, s))
        ref, other = _crop_common(ref, other)
        denom = float(np.sum(ref * ref))
        if denom == 0.0:
            excluded += 1
            continue
        ratios.append(float(np.sum((ref - other) ** 2)) / denom)
    if excluded:
        log.warning("equivariance error: %d image(s) with blank features excluded", excluded)
    return ratios, excluded


def equivariance_error(extractor, images, s, extractor_prime=None) -> float:
    """Mean normalised squared discrepancy between rescale-then-extract and
    extract-then-rescale. NaN when every image was excluded."""
    ratios, _ = relative_errors(extractor, images, s, extractor_prime)
    return float(np.mean(ratios)) if ratios else float("nan")


def _filter_extractor(filt: np.ndarray):
    filt = np.asarray(filt, dtype=np.float64)
    if filt.ndim == 2:
        filt = filt[None, None]

    def apply(img):
        img = np.asarray(img, dtype=np.float64)
        x = img[None, None] if img.ndim == 2 else img[None]
        return conv2d_array(x, filt)[0]

    return apply


def pair_error_matrix(filters: Sequence[np.ndarray], images: Sequence[np.ndarray], s: float) -> np.ndarray:
    """gamma x gamma grid; entry (k, k') pairs filter k on the original images
    with filter k' on the rescaled images."""
    ex = [_filter_extractor(f) for f in filters]
    g = len(ex)
    out = np.empty((g, g))
    for k in range(g):
        for kp in range(g):
            out[k, kp] = equivariance_error(ex[k], images, s, ex[kp])
    return out


@dataclass
class EquivarianceReport:
    scale_factors: list
    per_scale_error: list
    pair_matrices: list = field(default_factory=list)
    argmin_pairs: list = field(default_factory=list)
    excluded: list = field(default_factory=list)
    sigmas: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def mean_error(self) -> float:
        return float(np.nanmean(self.per_scale_error))

    def to_dict(self) -> dict:
        return {
            "scale_factors": [float(s) for s in self.scale_factors],
            "per_scale_error": [float(e) for e in self.per_scale_error],
            "mean_error": self.mean_error,
            "excluded": [int(e) for e in self.excluded],
            "sigmas": [float(v) for v in self.sigmas],
            "pair_matrices": [np.asarray(m).ravel().tolist() for m in self.pair_matrices],
            "pair_matrix_shape": list(np.asarray(self.pair_matrices[0]).shape) if self.pair_matrices else [],
            "argmin_pairs": [list(map(int, p)) for p in self.argmin_pairs],
            "metadata": self.metadata,
        }


def argmin_pair(matrix: np.ndarray) -> tuple[int, int]:
    k, kp = np.unravel_index(int(np.argmin(matrix)), matrix.shape)
    return int(k), int(kp)


def build_report(
    scales: Sequence[float],
    images: Sequence[np.ndarray],
    extractor: Callable,
    extractor_prime_for: Callable[[float], Callable] | None = None,
    filters: Sequence[np.ndarray] | None = None,
    sigmas: Sequence[float] = (),
    metadata: dict | None = None,
) -> EquivarianceReport:
    """Sweep ``scales``: Delta_s of ``extractor`` (against
    ``extractor_prime_for(s)`` when given) and, if ``filters`` are supplied,
    the per-pair matrix at each scale."""
    errors, excluded, mats, pairs = [], [], [], []
    for s in scales:
        prime = extractor_prime_for(s) if extractor_prime_for else None
        ratios, n_ex = relative_errors(extractor, images, s, prime)
        errors.append(float(np.mean(ratios)) if ratios else float("nan"))
        excluded.append(n_ex)
        if filters is not None:
            m = pair_error_matrix(filters, images, s)
            mats.append(m)
            pairs.append(argmin_pair(m))
    return EquivarianceReport(list(scales), errors, mats, pairs, excluded, list(sigmas), metadata or {})


def blob_images(n: int, size: int, seed: int = 0, n_blobs: int = 6,
                sigma_range: tuple[float, float] = (2.0, 4.0)) -> list[np.ndarray]:
    """Smooth test images: sums of isotropic Gaussian blobs with random
    signs, kept well below Nyquist by the blob width."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = []
    for _ in range(n):
        img = np.zeros((size, size))
        for _ in range(n_blobs):
            cy, cx = rng.uniform(0, size, 2)
            sd = rng.uniform(*sigma_range)
            amp = rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0])
            img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sd * sd))
        out.append(img)
    return out
