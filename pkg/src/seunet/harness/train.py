"""Training loop for SEUNet and the plain-CNN baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..unet import BaselineUNet, SEUNet
from .config import ExperimentConfig
from .data import BatchIterator, dataset_for
from .optim import Adam, step_lr

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    pass


class ConfinementError(AssertionError):
    pass


def build_model(config: ExperimentConfig):
    if config.model == "baseline":
        return BaselineUNet(1, config.classes, config.channels, config.depth, seed=config.seed)
    return SEUNet(1, config.classes, config.channels, config.depth, config.gamma, config.order,
                  config.sigma_mode, config.sigma_bounds, config.normalization, seed=config.seed)


def layer_norms(model) -> dict:
    return {k: float(np.linalg.norm(p.data)) for k, p in model.parameters().items()}


def check_confinement(model):
    """Every constrained sigma lies strictly inside its interval."""
    if not isinstance(model, SEUNet) or model.sigma_mode != "constrained":
        return
    for i, bank in enumerate(model.banks):
        for k, s in enumerate(bank.sigmas):
            if not s.in_bounds():
                raise ConfinementError(
                    f"layer {i + 1} group {k + 1}: sigma {s.value()!r} left ({s.lower}, {s.upper})")


@dataclass
class TrainResult:
    model: object
    config: ExperimentConfig
    history: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def train(config: ExperimentConfig, train_samples=None, log_fn=None) -> TrainResult:
    """Train on scale-1 images only. ``train_samples`` defaults to the
    training split generated from the config."""
    config.validate()
    if train_samples is None:
        train_samples, _ = dataset_for(config)
    model = build_model(config)
    params = model.parameters()
    opt = Adam(params, config.lr, config.betas, weight_decay=config.weight_decay)
    batches = BatchIterator(train_samples, config.batch_size, np.random.default_rng(config.seed + 1))
    result = TrainResult(model, config)
    emit = log_fn or log.info
    for epoch in range(config.epochs):
        opt.lr = step_lr(config.lr, epoch, config.epochs, config.lr_drop_at)
        losses = []
        for x, y in batches:
            opt.zero_grad()
            with ad.Graph() as g:
                loss = model.combined_loss(model.forward(x), y)
                value = float(loss.data)
                if not math.isfinite(value):
                    norms = ", ".join(f"{k}={v:.4g}" for k, v in layer_norms(model).items())
                    raise NumericFailure(f"non-finite loss {value} at epoch {epoch + 1}; parameter norms: {norms}")
                g.backward(loss)
            bad = [k for k, p in params.items() if not np.all(np.isfinite(p.grad))]
            if bad:
                norms = ", ".join(f"{k}={v:.4g}" for k, v in layer_norms(model).items())
                raise NumericFailure(f"non-finite gradient for {bad[:3]} at epoch {epoch + 1}; "
                                     f"parameter norms: {norms}")
            opt.step()
            losses.append(value)
        check_confinement(model)
        entry = {"epoch": epoch + 1, "lr": opt.lr, "loss": float(np.mean(losses)),
                 "first_loss": losses[0], "last_loss": losses[-1]}
        if isinstance(model, SEUNet):
            entry["eta_tilde"] = model.eta_tilde_values().tolist()
            entry["sigmas"] = model.sigma_values()
        result.history.append(entry)
        result.step_losses.extend(losses)
        emit(f"epoch {epoch + 1}/{config.epochs} loss {entry['loss']:.5f} lr {opt.lr:.3g}"
             + (f" eta~ {np.round(entry['eta_tilde'], 4).tolist()}" if "eta_tilde" in entry else ""))
    return result
