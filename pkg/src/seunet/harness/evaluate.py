"""Multi-scale evaluation: rescale the test set, predict, fuse, score.

Rescaled inputs whose sides are not multiples of 2**depth are reflect-padded
up to the next multiple and predictions are cropped back, so every test
scale sees the full rescaled image.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..equivariance import build_report, rescale, rescale_labels
from ..inference import STRATEGIES, confusion, fuse, iou_from_confusion
from ..unet import SEUNet

METRICS_SCHEMA_VERSION = 1


def max_threads() -> int:
    """Worker cap from ``SE_THREADS`` (default 1)."""
    raw = os.environ.get("SE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"SE_THREADS must be a positive integer, got {raw!r}") from None


def pad_to_multiple(x: np.ndarray, m: int) -> np.ndarray:
    h, w = x.shape[-2:]
    ph, pw = -h % m, -w % m
    if not ph and not pw:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, pad, mode="reflect" if min(h, w) > 1 else "edge")


def predict_maps(model, images: np.ndarray, sigma_scale: float = 1.0, batch_size: int = 8) -> np.ndarray:
    """(gamma, N, classes, H, W) probabilities for arbitrary H, W."""
    h, w = images.shape[-2:]
    x = pad_to_multiple(images, 2 ** model.depth)
    outs = []
    for i in range(0, len(x), batch_size):
        probs = model.forward(x[i:i + batch_size], sigma_scale) if isinstance(model, SEUNet) \
            else model.forward(x[i:i + batch_size])
        outs.append(np.stack([p.data for p in probs]))
    return np.concatenate(outs, axis=1)[..., :h, :w]


def strategies_for(gamma: int) -> list[str]:
    if gamma == 1:
        return ["head:1"]
    return list(STRATEGIES) + [f"head:{k + 1}" for k in range(gamma)]


def evaluate_scale(model, images, masks, s: float, num_classes: int, strategies=None) -> dict:
    """Dataset-level mIoU per strategy at one test scale (confusion matrices
    are accumulated over all images before taking IoU)."""
    imgs = np.stack([rescale(im, s) for im in images]) if s != 1.0 else np.asarray(images)
    labs = np.stack([rescale_labels(m, s) for m in masks]) if s != 1.0 else np.asarray(masks)
    strategies = strategies or strategies_for(getattr(model, "gamma", 1))
    maps = predict_maps(model, imgs)
    cms = {st: np.zeros((num_classes, num_classes), dtype=np.int64) for st in strategies}
    for n in range(len(imgs)):
        per_image = maps[:, n]
        for st in strategies:
            cms[st] += confusion(fuse(per_image, st), labs[n], num_classes)
    return {st: iou_from_confusion(cm)[1] for st, cm in cms.items()}


@dataclass
class MetricsTable:
    scales: list
    miou: dict  # strategy -> list of mIoU per scale (fractions)
    model: str = "seunet"
    metadata: dict = field(default_factory=dict)

    def mean(self, strategy: str, scales=None) -> float:
        vals = self.miou[strategy]
        if scales is not None:
            idx = [self.index(s) for s in scales]
            vals = [vals[i] for i in idx]
        return float(np.mean(vals))

    def index(self, s: float) -> int:
        d = np.abs(np.asarray(self.scales) - s)
        i = int(np.argmin(d))
        if d[i] > 1e-6 * s:
            raise KeyError(f"scale {s} not in table")
        return i

    def head_table(self) -> np.ndarray:
        """(gamma, n_scales) single-head mIoU, the per-head layout."""
        heads = sorted((k for k in self.miou if k.startswith("head:")), key=lambda k: int(k[5:]))
        return np.array([self.miou[h] for h in heads])

    def best_head(self, s: float) -> int:
        """1-based index of the best single head at scale ``s`` (lowest on ties)."""
        return int(np.argmax(self.head_table()[:, self.index(s)])) + 1

    def fusion_ordering(self) -> dict | None:
        """Soft report flag: does mean-over-scales follow p_ens >= p_dist >= arithm?
        Informational only; nothing asserts on it."""
        if not all(k in self.miou for k in ("p_ens", "p_dist", "arithm")):
            return None
        m = {k: self.mean(k) for k in ("p_ens", "p_dist", "arithm")}
        return {"means": m, "holds": m["p_ens"] >= m["p_dist"] >= m["arithm"]}

    def to_csv(self) -> str:
        """One row per scale, one column per strategy."""
        keys = list(self.miou)
        rows = ["scale," + ",".join(keys)]
        for i, s in enumerate(self.scales):
            rows.append(f"{s!r}," + ",".join(repr(float(self.miou[k][i])) for k in keys))
        return "\n".join(rows) + "\n"

    def to_dict(self) -> dict:
        return {
            "schema_version": METRICS_SCHEMA_VERSION,
            "model": self.model,
            "scales": [float(s) for s in self.scales],
            "miou": {k: [float(v) for v in vs] for k, vs in self.miou.items()},
            "mean_over_scales": {k: self.mean(k) for k in self.miou},
            "fusion_ordering": self.fusion_ordering(),
            "metadata": self.metadata,
        }


def evaluate_multiscale(model, samples, scales, num_classes: int, strategies=None,
                        threads: int | None = None) -> MetricsTable:
    images = [s.image for s in samples]
    masks = [s.mask for s in samples]
    threads = threads or max_threads()

    def run(s):
        return evaluate_scale(model, images, masks, s, num_classes, strategies)

    if threads > 1 and len(scales) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, scales))
    else:
        rows = [run(s) for s in scales]
    keys = list(rows[0])
    table = {k: [r[k] for r in rows] for k in keys}
    name = "seunet" if isinstance(model, SEUNet) else "baseline"
    return MetricsTable([float(s) for s in scales], table, name)


def feature_extractor(model, sigma_scale: float = 1.0):
    """Last decoder features of one (C, H, W) image, flattened to (channels, H, W)."""
    def apply(img):
        img = np.asarray(img, dtype=np.float64)
        h, w = img.shape[-2:]
        x = pad_to_multiple(img[None], 2 ** model.depth)
        feats = model.features(x, sigma_scale).data[0]
        feats = feats.reshape(-1, *feats.shape[-2:])
        return feats[..., :h, :w]

    return apply


def model_equivariance(model, images, scales, metadata=None):
    """Delta_s of the last decoder layer over ``scales``. For SEUNet the
    matched extractor rescales every sigma by s; the baseline has no scale
    parameter, so its matched extractor is itself."""
    extractor = feature_extractor(model)
    if isinstance(model, SEUNet):
        prime = lambda s: feature_extractor(model, s)  # noqa: E731
        sigmas = [v for layer in model.sigma_values() for v in layer]
        filters = [f for f in model.banks[0].realize_filters()]
        remap = "every layer sigma multiplied by s"
    else:
        prime, sigmas, filters, remap = None, [], None, "identity (no scale parameters)"
    meta = {"phi_prime": remap, "features": "last decoder layer"}
    meta.update(metadata or {})
    return build_report(scales, images, extractor, prime, filters=filters, sigmas=sigmas, metadata=meta)
