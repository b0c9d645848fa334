"""Fusing per-head probability maps into one label map, and IoU metrics.

Every argmax here breaks ties towards the lowest index, which is what
``np.argmax`` does.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

STRATEGIES = ("arithm", "p_dist", "p_ens")


def _as_stack(maps) -> np.ndarray:
    """(gamma, C, H, W) array from a list of (C, H, W) maps."""
    arr = np.asarray(maps, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"expected gamma maps of shape (C, H, W), got array of shape {arr.shape}")
    return arr


def check_normalized(maps, tol: float = 1e-6):
    arr = _as_stack(maps)
    err = np.max(np.abs(arr.sum(axis=1) - 1.0))
    if err > tol:
        raise ValueError(f"probability maps are not channel-normalised (max deviation {err:.3g})")


def confidence_margin(maps) -> np.ndarray:
    """Top-1 minus top-2 class probability per head and pixel: (gamma, H, W)."""
    arr = _as_stack(maps)
    if arr.shape[1] < 2:
        raise ValueError("confidence margin needs at least 2 classes")
    top2 = np.partition(arr, -2, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def fuse_arithm(maps) -> np.ndarray:
    return np.argmax(_as_stack(maps).mean(axis=0), axis=0)


def fuse_pdist(maps) -> np.ndarray:
    arr = _as_stack(maps)
    best = np.argmax(confidence_margin(arr), axis=0)  # (H, W)
    chosen = np.take_along_axis(arr, best[None, None], axis=0)[0]
    return np.argmax(chosen, axis=0)


def pens_weights(maps) -> np.ndarray:
    """Per-pixel softmax over heads of the confidence margins: (gamma, H, W)."""
    # margins lie in [0, 1], so exp cannot overflow
    e = np.exp(confidence_margin(maps))
    return e / e.sum(axis=0, keepdims=True)


def fuse_pens(maps) -> np.ndarray:
    arr = _as_stack(maps)
    w = pens_weights(arr)
    acc = w[0] * arr[0]
    for k in range(1, arr.shape[0]):
        acc = acc + w[k] * arr[k]
    return np.argmax(acc, axis=0)


def fuse(maps, strategy: str) -> np.ndarray:
    """Dispatch on ``arithm``, ``p_dist``, ``p_ens`` or ``head:<k>`` (1-based)."""
    if strategy == "arithm":
        return fuse_arithm(maps)
    if strategy == "p_dist":
        return fuse_pdist(maps)
    if strategy == "p_ens":
        return fuse_pens(maps)
    if strategy.startswith("head:"):
        k = int(strategy.split(":", 1)[1])
        arr = _as_stack(maps)
        if not 1 <= k <= arr.shape[0]:
            raise ValueError(f"head index {k} out of range 1..{arr.shape[0]}")
        return np.argmax(arr[k - 1], axis=0)
    raise ValueError(f"unknown fusion strategy {strategy!r}")


def confusion(pred, truth, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"label maps differ in size: {pred.size} vs {truth.size}")
    for name, lab in (("prediction", pred), ("truth", truth)):
        if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
            raise ValueError(f"{name} labels must lie in [0, {num_classes}), "
                             f"found range [{lab.min()}, {lab.max()}]")
    return np.bincount(truth * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from both) and their mean."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, np.nan)
    present = ~np.isnan(iou)
    return iou, float(np.mean(iou[present])) if present.any() else float("nan")


def miou(pred, truth, num_classes: int) -> tuple[np.ndarray, float]:
    return iou_from_confusion(confusion(pred, truth, num_classes))


def fuse_all(maps: Sequence[np.ndarray], strategies: Sequence[str] | None = None) -> dict:
    arr = _as_stack(maps)
    if strategies is None:
        strategies = list(STRATEGIES) + [f"head:{k + 1}" for k in range(arr.shape[0])]
    return {s: fuse(arr, s) for s in strategies}
