"""Sampled Gaussian derivative kernels at continuous scale.

With ``normalization="none"`` kernels are the continuous functions sampled at
integer pixel offsets, nothing more. ``normalization="scale"`` rescales each
1D factor so its n-th moment matches the continuous kernel (undoing the mass
lost to truncation and coarse sampling) and multiplies by sigma**n, giving
scale-normalised derivatives whose responses commute with image rescaling.
Moment correction is only defined up to order ``MAX_SCALE_ORDER``: beyond
that the truncated grid (half-width about 2 sigma) cuts off so much of the
kernel that the sampled moment changes sign as sigma varies.

Arrays are indexed ``[row, col]`` with the x coordinate running along
columns, so ``kernels[(i, j)][y, x] = g_i(x) * g_j(y)`` where ``g_n`` is the
n-th x-derivative of the 1D Gaussian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import hermite_e

MAX_ORDER = 4
NORMALIZATIONS = ("none", "scale")
MAX_SCALE_ORDER = 2


def _check_sigma(sigma):
    if not np.all(np.asarray(sigma) > 0) or not np.all(np.isfinite(sigma)):
        raise ValueError(f"sigma must be positive and finite, got {sigma}")


def gaussian_1d(x, sigma: float, order: int = 0):
    """n-th derivative of the unit-integral 1D Gaussian, evaluated at ``x``.

    Uses d^n/dx^n G(x) = (-1/sigma)^n He_n(x/sigma) G(x) with He_n the
    probabilists' Hermite polynomial. ``x`` may be a scalar or an array.
    """
    _check_sigma(sigma)
    if order < 0:
        raise ValueError(f"derivative order must be >= 0, got {order}")
    x = np.asarray(x, dtype=np.float64)
    u = x / sigma
    g = np.exp(-0.5 * u * u) / (sigma * math.sqrt(2.0 * math.pi))
    if order == 0:
        out = g
    else:
        coef = np.zeros(order + 1)
        coef[order] = 1.0
        out = (-1.0 / sigma) ** order * hermite_e.hermeval(u, coef) * g
    return float(out) if out.ndim == 0 else out


def filter_size(sigma: float) -> int:
    """Odd filter side length 2*ceil(2*sigma) + 1."""
    _check_sigma(sigma)
    return 2 * math.ceil(2.0 * sigma) + 1


def basis_indices(order: int) -> list[tuple[int, int]]:
    """Derivative index pairs (i, j) with i + j <= order.

    Ordered by total degree, then by decreasing x-order:
    (0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...
    """
    return [(n - j, j) for n in range(order + 1) for j in range(n + 1)]


def grid(size: int) -> np.ndarray:
    half = (size - 1) // 2
    return np.arange(-half, half + 1, dtype=np.float64)


def kernels_1d(sigma: float, size: int, max_order: int) -> np.ndarray:
    """Stack of sampled 1D derivative kernels, shape ``(max_order + 1, size)``."""
    xs = grid(size)
    return np.stack([gaussian_1d(xs, sigma, n) for n in range(max_order + 1)])


def factor_kernels(sigma: float, size: int, order: int, normalization: str = "none"):
    """1D factors up to ``order`` and their sigma-derivatives at fixed size.

    Returns two ``(order + 1, size)`` arrays. The raw derivative uses the
    heat-equation identity dG^(n)/dsigma = sigma * G^(n+2).
    """
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}")
    if normalization == "scale" and order > MAX_SCALE_ORDER:
        raise ValueError(f"scale normalization supports order <= {MAX_SCALE_ORDER}, got {order}")
    g = kernels_1d(sigma, size, order + 2)
    dg = sigma * g[2:]
    g = g[:order + 1]
    if normalization == "none":
        return g, dg
    xs = grid(size)
    h = np.empty_like(g)
    dh = np.empty_like(g)
    for n in range(order + 1):
        w = (-xs) ** n / math.factorial(n)
        m, dm = w @ g[n], w @ dg[n]
        c = sigma ** n / m
        dc = (n * sigma ** (n - 1) if n else 0.0) / m - sigma ** n * dm / (m * m)
        h[n] = c * g[n]
        dh[n] = dc * g[n] + c * dg[n]
    return h, dh


@dataclass(frozen=True)
class GaussianBasis:
    sigma: float
    order: int
    size: int
    kernels: dict = field(repr=False)
    dkernels_dsigma: dict = field(repr=False)
    normalization: str = "none"

    @property
    def indices(self):
        return list(self.kernels)

    def stack(self) -> np.ndarray:
        """Kernels as one array of shape ``(n_basis, size, size)``."""
        return np.stack([self.kernels[ij] for ij in self.indices])

    def dstack(self) -> np.ndarray:
        return np.stack([self.dkernels_dsigma[ij] for ij in self.indices])


def build_basis(sigma: float, order: int, size: int | None = None,
                normalization: str = "none") -> GaussianBasis:
    """Gaussian derivative kernels of total order <= ``order`` at ``sigma``.

    ``size`` defaults to :func:`filter_size`; passing it explicitly holds the
    grid fixed, which is how the sigma-derivative is defined. Kernels are
    outer products of 1D factors and their sigma-derivatives follow from the
    product rule.
    """
    _check_sigma(sigma)
    if not 0 <= order <= MAX_ORDER:
        raise ValueError(f"order must be in [0, {MAX_ORDER}], got {order}")
    if size is None:
        size = filter_size(sigma)
    elif size < 1 or size % 2 == 0:
        raise ValueError(f"size must be a positive odd integer, got {size}")
    g, dg = factor_kernels(sigma, size, order, normalization)
    kernels, dkernels = {}, {}
    for i, j in basis_indices(order):
        kernels[(i, j)] = np.outer(g[j], g[i])
        dkernels[(i, j)] = np.outer(dg[j], g[i]) + np.outer(g[j], dg[i])
    return GaussianBasis(float(sigma), order, size, kernels, dkernels, normalization)
