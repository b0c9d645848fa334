"""SEUNet and a plain-CNN UNet baseline on the same skeleton.

Layer order for ``depth`` encoder levels (4 * depth + 2 conv layers):
two per encoder level, two in the bottleneck, two per decoder level. Each
decoder level upsamples (nearest, 2x), concatenates the matching encoder
output, then runs its two convs. SEUNet feature maps carry a group axis,
``(N, gamma, C, H, W)``, and groups never mix.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .filter_bank import ScaleFilterBank


def n_layers(depth: int) -> int:
    return 4 * depth + 2


def layer_levels(depth: int) -> list[int]:
    """Resolution level (0 = full) of every conv layer, in order."""
    enc = [d for d in range(depth + 1) for _ in range(2)]
    dec = [d for d in range(depth - 1, -1, -1) for _ in range(2)]
    return enc + dec


def sigma_schedule(depth: int, gamma: int, base: float = 0.4, step: float = 0.5,
                   half_width: float = 0.2) -> list[list[tuple[float, float]]]:
    """Per-layer (lower, upper) sigma intervals: group k is centred on
    (base + step*k) * 2**(level/3), growing through the encoder and shrinking
    back through the decoder."""
    out = []
    for level in layer_levels(depth):
        f = 2.0 ** (level / 3.0)
        out.append([(round((base + step * k) * f - half_width, 4), round((base + step * k) * f + half_width, 4))
                    for k in range(gamma)])
    return out


def _layer_channels(depth: int, channels: Sequence[int], in_channels: int):
    """(in, out) channel counts per conv layer, in the layer order above."""
    pairs = []
    prev = in_channels
    for d in range(depth + 1):
        pairs += [(prev, channels[d]), (channels[d], channels[d])]
        prev = channels[d]
    for d in range(depth - 1, -1, -1):
        pairs += [(channels[d] + channels[d + 1], channels[d]), (channels[d], channels[d])]
    return pairs


class _UNet:
    group_axis: int  # channel axis of feature maps (2 for grouped, 1 for plain)

    def __init__(self, in_channels: int, num_classes: int, channels: Sequence[int], depth: int):
        if len(channels) != depth + 1:
            raise ValueError(f"channel plan needs depth + 1 = {depth + 1} entries, got {list(channels)}")
        self.in_channels, self.num_classes = in_channels, num_classes
        self.channels, self.depth = list(channels), depth

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected image(s) of shape (N, {self.in_channels}, H, W), got {x.shape}")
        m = 2 ** self.depth
        h, w = x.shape[-2:]
        if h % m or w % m:
            raise ValueError(f"spatial dims must be divisible by 2**depth = {m}, got {h}x{w}")
        return x

    def _conv(self, i: int, x: ad.Tensor, sigma_scale: float) -> ad.Tensor:
        raise NotImplementedError

    def features(self, x, sigma_scale: float = 1.0) -> ad.Tensor:
        """Last decoder layer output (before the heads)."""
        x = ad.Tensor(self._check_input(np.asarray(x, dtype=np.float64)))
        layer = 0

        def block(h):
            nonlocal layer
            for _ in range(2):
                h = ad.relu(self._conv(layer, h, sigma_scale))
                layer += 1
            return h

        skips = []
        h = x
        for _ in range(self.depth):
            h = block(h)
            skips.append(h)
            h = ad.max_pool2x2(h)
        h = block(h)
        for skip in reversed(skips):
            h = ad.concat([skip, ad.upsample2x(h)], axis=self.group_axis)
            h = block(h)
        return h

    def parameters(self) -> dict:
        raise NotImplementedError

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters().values()))

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def predict(self, images, batch_size: int = 8) -> list[np.ndarray]:
        """Probability maps per head as numpy arrays (N, classes, H, W)."""
        images = np.asarray(images, dtype=np.float64)
        outs = []
        for i in range(0, len(images), batch_size):
            outs.append([p.data for p in self.forward(images[i:i + batch_size])])
        return [np.concatenate([o[k] for o in outs]) for k in range(len(outs[0]))]


class SEUNet(_UNet):
    group_axis = 2

    def __init__(
        self,
        in_channels: int = 1,
        num_classes: int = 5,
        channels: Sequence[int] = (15, 30, 60, 120, 240),
        depth: int = 4,
        gamma: int = 5,
        order: int = 1,
        sigma_mode: str = "constrained",
        bounds: Sequence[Sequence[tuple[float, float]]] | None = None,
        normalization: str = "scale",
        seed: int = 0,
    ):
        super().__init__(in_channels, num_classes, channels, depth)
        bad = [c for c in channels if c % gamma]
        if bad:
            raise ValueError(f"every channel count must be divisible by gamma={gamma}; offending: {bad}")
        bounds = bounds if bounds is not None else sigma_schedule(depth, gamma)
        if len(bounds) != n_layers(depth):
            raise ValueError(f"need sigma bounds for {n_layers(depth)} layers, got {len(bounds)}")
        self.gamma, self.order, self.sigma_mode, self.normalization = gamma, order, sigma_mode, normalization
        rng = np.random.default_rng(seed)
        self.banks = []
        for i, ((cin, cout), b) in enumerate(zip(_layer_channels(depth, channels, in_channels), bounds)):
            if len(b) != gamma:
                raise ValueError(f"layer {i + 1}: expected {gamma} sigma intervals, got {len(b)}")
            first = i == 0
            self.banks.append(ScaleFilterBank(
                cin if first else cin // gamma, cout // gamma, b, order=order, mode=sigma_mode,
                first_layer=first, rng=rng, normalization=normalization))
        c0 = channels[0] // gamma
        self.head_weight = ad.Tensor(np.zeros((gamma, num_classes, c0)), requires_grad=True, name="head_weight")
        self.head_bias = ad.Tensor(np.zeros((gamma, num_classes)), requires_grad=True, name="head_bias")
        self.eta_raw = ad.Tensor(np.zeros(gamma), requires_grad=True, name="eta_raw")

    def _conv(self, i, x, sigma_scale):
        return self.banks[i](x, sigma_scale)

    def forward(self, x, sigma_scale: float = 1.0) -> list[ad.Tensor]:
        """One probability map per scale group, each (N, classes, H, W)."""
        feats = self.features(x, sigma_scale)
        probs = []
        for k in range(self.gamma):
            fk = ad.take(feats, k, axis=1)
            logits = ad.conv1x1(fk, ad.take(self.head_weight, k, 0), ad.take(self.head_bias, k, 0))
            probs.append(ad.softmax_channels(logits, axis=1))
        return probs

    def eta_tilde(self) -> ad.Tensor:
        return ad.softmax(self.eta_raw) * 0.5 + 0.5 / self.gamma

    def combined_loss(self, probs: Sequence[ad.Tensor], target) -> ad.Tensor:
        target = one_hot(target, self.num_classes) if np.ndim(target) == 3 else target
        losses = [ad.cross_entropy(p, target) for p in probs]
        return ad.weighted_sum(losses, self.eta_tilde())

    def sigma_values(self) -> list[list[float]]:
        return [b.sigma_values() for b in self.banks]

    def sigma_bounds(self) -> list[list[tuple[float, float]]]:
        return [[(s.lower, s.upper) for s in b.sigmas] for b in self.banks]

    def parameters(self) -> dict:
        params = {}
        for i, b in enumerate(self.banks):
            params[f"layer{i + 1:02d}.alpha"] = b.alpha
            for k, s in enumerate(b.sigmas):
                params[f"layer{i + 1:02d}.sigma_raw.{k}"] = s.raw
        params["heads.weight"] = self.head_weight
        params["heads.bias"] = self.head_bias
        params["eta_raw"] = self.eta_raw
        return params

    def eta_tilde_values(self) -> np.ndarray:
        return eta_tilde(self.eta_raw.data)


class BaselineUNet(_UNet):
    """Same skeleton with ordinary trainable 3x3 kernels and a single head."""

    group_axis = 1
    gamma = 1

    def __init__(self, in_channels: int = 1, num_classes: int = 5,
                 channels: Sequence[int] = (15, 30, 60, 120, 240), depth: int = 4,
                 kernel_size: int = 3, seed: int = 0):
        super().__init__(in_channels, num_classes, channels, depth)
        rng = np.random.default_rng(seed)
        self.weights = []
        for cin, cout in _layer_channels(depth, channels, in_channels):
            limit = math.sqrt(6.0 / (cin * kernel_size ** 2))
            self.weights.append(ad.Tensor(rng.uniform(-limit, limit, (cout, cin, kernel_size, kernel_size)),
                                          requires_grad=True, name="weight"))
        self.head_weight = ad.Tensor(np.zeros((num_classes, channels[0])), requires_grad=True, name="head_weight")
        self.head_bias = ad.Tensor(np.zeros(num_classes), requires_grad=True, name="head_bias")

    def _conv(self, i, x, sigma_scale):
        return ad.conv2d(x, self.weights[i])

    def forward(self, x, sigma_scale: float = 1.0) -> list[ad.Tensor]:
        logits = ad.conv1x1(self.features(x), self.head_weight, self.head_bias)
        return [ad.softmax_channels(logits, axis=1)]

    def combined_loss(self, probs, target) -> ad.Tensor:
        target = one_hot(target, self.num_classes) if np.ndim(target) == 3 else target
        return ad.cross_entropy(probs[0], target)

    def parameters(self) -> dict:
        params = {f"layer{i + 1:02d}.weight": w for i, w in enumerate(self.weights)}
        params["head.weight"] = self.head_weight
        params["head.bias"] = self.head_bias
        return params


def eta_tilde(eta_raw) -> np.ndarray:
    """Bounded head weights (softmax(eta_raw) + 1/gamma) / 2.

    Written as 0.5 * softmax + 0.5 / gamma: the halving is exact and the sum
    is monotone in the softmax, so in floating point the result never drops
    below 1 / (2 gamma), the value reached when a head's softmax weight is 0.
    """
    eta_raw = np.asarray(eta_raw, dtype=np.float64)
    z = np.exp(eta_raw - eta_raw.max(axis=-1, keepdims=True))
    eta = z / z.sum(axis=-1, keepdims=True)
    return eta * 0.5 + 0.5 / eta_raw.shape[-1]


def one_hot(labels, num_classes: int) -> np.ndarray:
    """(N, H, W) integer labels -> (N, C, H, W) one-hot floats."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return np.moveaxis(np.eye(num_classes)[labels], -1, -3)
