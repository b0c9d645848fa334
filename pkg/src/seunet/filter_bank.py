"""Scale-grouped Gaussian-derivative filter banks.

A bank holds one coefficient tensor ``alpha`` of shape
``(n_basis, out_per_group, in_per_group)`` shared by all groups, plus one
scale parameter per group. Group k convolves with
``sum_b alpha[b] * G_b(sigma_k)``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.ndimage import convolve1d, correlate1d

from . import autodiff as ad
from .scale_space import NORMALIZATIONS, basis_indices, build_basis, factor_kernels, filter_size

MODES = ("constrained", "fixed", "free")
FREE_FLOOR = 0.3


def _inv_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class SigmaParam:
    """Trainable scale with a bounded (constrained), frozen (fixed) or
    positive-only (free) parameterisation of a raw latent."""

    def __init__(self, lower: float, upper: float, mode: str = "constrained", raw: float | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown sigma mode {mode!r}; expected one of {MODES}")
        if not (upper > lower >= 0):
            raise ValueError(f"sigma bounds need upper > lower >= 0, got ({lower}, {upper})")
        self.lower, self.upper, self.mode = float(lower), float(upper), mode
        if raw is None:
            # free mode starts at the interval midpoint too
            raw = _inv_softplus(self.midpoint - FREE_FLOOR) if mode == "free" else 0.0
        self.raw = ad.Tensor(raw, requires_grad=True, name="sigma_raw")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.upper + self.lower)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.upper - self.lower)

    def tensor(self) -> ad.Tensor:
        if self.mode == "constrained":
            return ad.tanh(self.raw) * self.half_width + self.midpoint
        if self.mode == "fixed":
            return ad.Tensor(self.midpoint)
        return ad.softplus(self.raw) + FREE_FLOOR

    def value(self) -> float:
        r = float(self.raw.data)
        if self.mode == "constrained":
            return self.half_width * math.tanh(r) + self.midpoint
        if self.mode == "fixed":
            return self.midpoint
        return float(np.logaddexp(0.0, r)) + FREE_FLOOR

    def in_bounds(self) -> bool:
        return self.lower < self.value() < self.upper

    def __repr__(self):
        return f"SigmaParam({self.value():.4f} in ({self.lower}, {self.upper}), {self.mode})"


class ScaleFilterBank:
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        bounds: Sequence[tuple[float, float]],
        order: int = 1,
        mode: str = "constrained",
        first_layer: bool = False,
        rng: np.random.Generator | None = None,
        normalization: str = "none",
    ):
        """``in_channels``/``out_channels`` are per group; for a first layer
        ``in_channels`` is the image channel count fed to every group.
        ``normalization`` selects the basis variant (see ``scale_space``)."""
        if normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}, got {normalization!r}")
        self.normalization = normalization
        self.gamma = len(bounds)
        if self.gamma < 1:
            raise ValueError("a filter bank needs at least one scale group")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.order, self.mode, self.first_layer = order, mode, first_layer
        self.indices = basis_indices(order)
        if mode == "constrained":
            ordered = sorted(bounds)
            for (b0, a0), (b1, a1) in zip(ordered, ordered[1:]):
                if b1 < a0:
                    raise ValueError(f"constrained sigma intervals overlap: ({b0}, {a0}) and ({b1}, {a1})")
        self.sigmas = [SigmaParam(b, a, mode) for b, a in bounds]
        rng = rng or np.random.default_rng()
        n_basis = len(self.indices)
        # He-uniform over input channels: with scale-normalised bases nearly all
        # response energy sits in the order-0 term, so dividing by n_basis too
        # would shrink activations about tenfold per layer
        limit = math.sqrt(6.0 / in_channels)
        self.alpha = ad.Tensor(
            rng.uniform(-limit, limit, size=(n_basis, out_channels, in_channels)),
            requires_grad=True, name="alpha")

    @property
    def n_basis(self) -> int:
        return len(self.indices)

    def sigma_values(self) -> list[float]:
        return [s.value() for s in self.sigmas]

    def parameters(self) -> list[ad.Tensor]:
        return [self.alpha] + [s.raw for s in self.sigmas]

    def realize_filters(self, sigma_scale: float = 1.0) -> list[np.ndarray]:
        """Per-group filter stacks of shape (out, in, t_k, t_k)."""
        out = []
        for s in self.sigma_values():
            basis = build_basis(s * sigma_scale, self.order, normalization=self.normalization).stack()
            out.append(np.tensordot(self.alpha.data, basis, axes=([0], [0])))
        return out

    def __call__(self, x: ad.Tensor, sigma_scale: float = 1.0, method: str = "separable") -> ad.Tensor:
        if method == "separable":
            return scale_group_conv(x, self, sigma_scale)
        if method == "direct":
            return scale_group_conv_direct(x, self, sigma_scale)
        raise ValueError(f"unknown convolution method {method!r}")

    def __repr__(self):
        return (f"ScaleFilterBank(gamma={self.gamma}, in={self.in_channels}, out={self.out_channels}, "
                f"order={self.order}, mode={self.mode}, sigmas={self.sigma_values()})")


def _split_input(x: np.ndarray, bank: ScaleFilterBank) -> tuple[np.ndarray, bool]:
    """Normalise to (N, G, C, H, W); returns the array and whether a batch
    axis was added."""
    added = False
    expected_ndim = 4 if bank.first_layer else 5
    if x.ndim == expected_ndim - 1:
        x, added = x[None], True
    if x.ndim != expected_ndim:
        raise ValueError(f"scale_group_conv input must have {expected_ndim - 1} or {expected_ndim} "
                         f"dims, got shape {x.shape}")
    if bank.first_layer:
        if x.shape[1] != bank.in_channels:
            raise ValueError(f"first-layer input: expected {bank.in_channels} image channels, "
                             f"got {x.shape[1]} (shape {x.shape})")
        return x[:, None], added
    if x.shape[1] != bank.gamma or x.shape[2] != bank.in_channels:
        raise ValueError(f"grouped input: expected (N, {bank.gamma}, {bank.in_channels}, H, W), "
                         f"got {x.shape}")
    return x, added


def _corr(a, k, axis):
    return correlate1d(a, k, axis=axis, mode="constant", cval=0.0)


def _conv(a, k, axis):
    return convolve1d(a, k, axis=axis, mode="constant", cval=0.0)


def scale_group_conv(x: ad.Tensor, bank: ScaleFilterBank, sigma_scale: float = 1.0) -> ad.Tensor:
    """Group-wise convolution f_k -> F_k * f_k via separable basis responses.

    Each group's input is filtered by every separable basis kernel, then the
    responses are mixed by ``alpha``. Output is (N, gamma, out, H, W) (no
    batch axis if the input had none). Gradients flow to ``alpha``, every
    sigma tensor and the input.
    """
    xd, added = _split_input(x.data, bank)
    sig_tensors = [s.tensor() for s in bank.sigmas]
    alpha = bank.alpha.data
    idx = bank.indices
    order = bank.order
    n, _, _, h, w = xd.shape
    out = np.empty((n, bank.gamma, bank.out_channels, h, w))
    saved = []
    for k, st in enumerate(sig_tensors):
        sigma = float(st.data) * sigma_scale
        size = filter_size(sigma)
        g, dg = factor_kernels(sigma, size, order, bank.normalization)
        xk = xd[:, 0 if bank.first_layer else k]
        rows = [_corr(xk, g[i], -1) for i in range(order + 1)]
        resp = np.stack([_corr(rows[i], g[j], -2) for i, j in idx], axis=1)  # N,B,C,H,W
        out[:, k] = np.einsum("boc,nbchw->nohw", alpha, resp)
        saved.append((g, dg, xk, rows, resp))

    def bwd(gout):
        if added:
            gout = gout[None]
        galpha = np.zeros_like(alpha)
        gx = np.zeros_like(xd) if x.requires_grad else None
        gsig = []
        for k, (g, dg, xk, rows, resp) in enumerate(saved):
            gk = gout[:, k]
            galpha += np.einsum("nohw,nbchw->boc", gk, resp)
            a = np.einsum("boc,nohw->nbchw", alpha, gk)
            # d(response)/d(sigma) at fixed size, product rule over the two factors
            drows = [_corr(xk, dg[i], -1) for i in range(order + 1)]
            ds = 0.0
            for b, (i, j) in enumerate(idx):
                dresp = _corr(drows[i], g[j], -2) + _corr(rows[i], dg[j], -2)
                ds += np.sum(a[:, b] * dresp)
            gsig.append(np.asarray(ds * sigma_scale))
            if gx is not None:
                gin = sum(_conv(_conv(a[:, b], g[j], -2), g[i], -1) for b, (i, j) in enumerate(idx))
                gx[:, 0 if bank.first_layer else k] += gin
        if gx is not None:
            gx = gx[:, 0] if bank.first_layer else gx
            gx = gx[0] if added else gx
        return (gx, galpha, *gsig)

    data = out[0] if added else out
    return ad._emit(data, (x, bank.alpha, *sig_tensors), bwd)


def realize(bank: ScaleFilterBank, k: int, sigma_tensor: ad.Tensor, sigma_scale: float = 1.0) -> ad.Tensor:
    """Differentiable realisation of group k's filter stack (out, in, t, t)."""
    sigma = float(sigma_tensor.data) * sigma_scale
    basis = build_basis(sigma, bank.order, normalization=bank.normalization)
    kb, dkb = basis.stack(), basis.dstack()
    alpha = bank.alpha.data
    filt = np.tensordot(alpha, kb, axes=([0], [0]))

    def bwd(g):
        galpha = np.einsum("ocyx,byx->boc", g, kb)
        dfilt = np.tensordot(alpha, dkb, axes=([0], [0]))
        return galpha, np.asarray(np.sum(g * dfilt) * sigma_scale)

    return ad._emit(filt, (bank.alpha, sigma_tensor), bwd)


def scale_group_conv_direct(x: ad.Tensor, bank: ScaleFilterBank, sigma_scale: float = 1.0) -> ad.Tensor:
    """Reference path: realise each group's full 2D filter and run conv2d."""
    xd, added = _split_input(x.data, bank)
    xt = x if not added else _unsqueeze(x)
    outs = []
    for k, sp in enumerate(bank.sigmas):
        w = realize(bank, k, sp.tensor(), sigma_scale)
        xk = xt if bank.first_layer else ad.take(xt, k, axis=1)
        outs.append(ad.conv2d(xk, w))
    y = ad.stack(outs, axis=1)
    return ad.take(y, 0, axis=0) if added else y


def _unsqueeze(x: ad.Tensor) -> ad.Tensor:
    return ad.stack([x], axis=0)


def sigma_gradients(bank: ScaleFilterBank, x, upstream_grad) -> dict:
    """Gradients of <upstream_grad, bank(x)> w.r.t. alpha, the raw sigma
    latents and the input."""
    xt = ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    for p in bank.parameters():
        p.zero_grad()
    with ad.Graph() as g:
        y = scale_group_conv(xt, bank)
        loss = ad.sum(ad.mul(y, ad.Tensor(upstream_grad)))
        g.backward(loss)
    return {
        "alpha": bank.alpha.grad.copy(),
        "sigma_raw": np.array([s.raw.grad for s in bank.sigmas], dtype=np.float64),
        "input": xt.grad.copy(),
    }
