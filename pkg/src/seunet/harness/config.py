"""Experiment configuration: a flat ``key = value`` text file.

Schema (all keys optional, defaults below)::

    seed = 0                      # model init and batch order
    model = seunet                # seunet | baseline
    gamma = 5                     # scale groups
    order = 1                     # Gaussian derivative order N
    sigma_mode = constrained      # constrained | fixed | free
    normalization = scale         # none | scale (basis variant)
    depth = 4                     # encoder levels
    channels = 15, 30, 60, 120, 240
    classes = 5
    lr = 0.005
    betas = 0.9, 0.999
    weight_decay = 0.0001
    epochs = 30
    batch_size = 8
    lr_drop_at = 0.8              # fraction of epochs after which lr *= 0.1
    dataset = regions             # regions | blobs
    image_size = 64
    n_train = 200
    n_test = 50
    data_seed = 0
    test_scales = 0.25, ...       # default: 2**(k/4), k = -8..8
    sigma.layer01 = 0.2:0.6, 0.7:1.1, ...   # one line per conv layer

Missing ``sigma.layerNN`` lines fall back to the default schedule in
:func:`seunet.unet.sigma_schedule`.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
from dataclasses import dataclass, field
from importlib import resources

from ..filter_bank import MODES
from ..scale_space import MAX_SCALE_ORDER, NORMALIZATIONS
from ..unet import n_layers, sigma_schedule

MODELS = ("seunet", "baseline")
DATASETS = ("regions", "blobs")


class ConfigError(ValueError):
    pass


def default_scales() -> list[float]:
    return [2.0 ** (k / 4) for k in range(-8, 9)]


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: str = "seunet"
    gamma: int = 5
    order: int = 1
    sigma_mode: str = "constrained"
    normalization: str = "scale"
    depth: int = 4
    channels: list = field(default_factory=lambda: [15, 30, 60, 120, 240])
    classes: int = 5
    lr: float = 0.005
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 8
    lr_drop_at: float = 0.8
    dataset: str = "regions"
    image_size: int = 64
    n_train: int = 200
    n_test: int = 50
    data_seed: int = 0
    test_scales: list = field(default_factory=default_scales)
    sigma_bounds: list = field(default_factory=list)  # per layer, list of (lower, upper)

    def __post_init__(self):
        if not self.sigma_bounds and self.model == "seunet":
            self.sigma_bounds = sigma_schedule(self.depth, self.gamma)

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.model in MODELS, f"model must be one of {MODELS}, got {self.model!r}")
        need(self.sigma_mode in MODES, f"sigma_mode must be one of {MODES}, got {self.sigma_mode!r}")
        need(self.normalization in NORMALIZATIONS,
             f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")
        need(self.dataset in DATASETS, f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        need(self.gamma >= 1 and 0 <= self.order <= 4 and self.depth >= 0, "gamma >= 1, 0 <= order <= 4, depth >= 0")
        need(self.normalization != "scale" or self.order <= MAX_SCALE_ORDER,
             f"normalization 'scale' supports order <= {MAX_SCALE_ORDER}, got {self.order}")
        need(len(self.channels) == self.depth + 1,
             f"channels needs depth + 1 = {self.depth + 1} entries, got {len(self.channels)}")
        need(self.classes >= 2, "classes must be >= 2")
        need(self.lr > 0 and self.weight_decay >= 0 and len(self.betas) == 2, "bad optimizer settings")
        need(self.epochs >= 1 and self.batch_size >= 1, "epochs and batch_size must be >= 1")
        need(self.image_size % (2 ** self.depth) == 0,
             f"image_size {self.image_size} must be divisible by 2**depth = {2 ** self.depth}")
        need(all(s > 0 for s in self.test_scales), "test scales must be positive")
        if self.model == "seunet":
            need(all(c % self.gamma == 0 for c in self.channels),
                 f"channels {self.channels} must be divisible by gamma={self.gamma}")
            need(len(self.sigma_bounds) == n_layers(self.depth),
                 f"need sigma bounds for {n_layers(self.depth)} layers, got {len(self.sigma_bounds)}")
            for i, layer in enumerate(self.sigma_bounds):
                need(len(layer) == self.gamma, f"layer {i + 1}: need {self.gamma} intervals, got {len(layer)}")
                for lo, hi in layer:
                    need(hi > lo >= 0, f"layer {i + 1}: interval ({lo}, {hi}) needs upper > lower >= 0")
                if self.sigma_mode == "constrained":
                    srt = sorted(layer)
                    for (_, a0), (b1, _) in zip(srt, srt[1:]):
                        need(b1 >= a0, f"layer {i + 1}: constrained intervals overlap")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sigma_bounds"] = [[list(iv) for iv in layer] for layer in self.sigma_bounds]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["sigma_bounds"] = [[tuple(iv) for iv in layer] for layer in d.get("sigma_bounds", [])]
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        if ("depth" in changes or "gamma" in changes) and "sigma_bounds" not in changes:
            d["sigma_bounds"] = []
        d.update(changes)
        return ExperimentConfig.from_dict(d)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "sigma_bounds":
                continue
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {', '.join(_fmt(x) for x in v) if isinstance(v, list) else _fmt(v)}")
        for i, layer in enumerate(self.sigma_bounds):
            lines.append(f"sigma.layer{i + 1:02d} = " + ", ".join(f"{_fmt(lo)}:{_fmt(hi)}" for lo, hi in layer))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


_INT = {"seed", "gamma", "order", "depth", "classes", "epochs", "batch_size", "image_size", "n_train",
        "n_test", "data_seed"}
_FLOAT = {"lr", "weight_decay", "lr_drop_at"}
_STR = {"model", "sigma_mode", "normalization", "dataset"}
_LAYER = re.compile(r"sigma\.layer(\d+)$")


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[config]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    kw, layers = {}, {}
    for key, raw in cp["config"].items():
        raw = raw.strip()
        try:
            if key in _INT:
                kw[key] = int(raw)
            elif key in _FLOAT:
                kw[key] = float(raw)
            elif key in _STR:
                kw[key] = raw
            elif key == "channels":
                kw[key] = [int(v) for v in raw.split(",")]
            elif key in ("betas", "test_scales"):
                kw[key] = [float(v) for v in raw.split(",")]
            elif _LAYER.match(key):
                layers[int(_LAYER.match(key).group(1))] = [
                    tuple(float(x) for x in iv.split(":")) for iv in raw.split(",")]
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({e})") from None
    if layers:
        if sorted(layers) != list(range(1, len(layers) + 1)):
            raise ConfigError(f"sigma.layerNN keys must run 01..{len(layers):02d} without gaps")
        for i, layer in layers.items():
            if any(len(iv) != 2 for iv in layer):
                raise ConfigError(f"sigma.layer{i:02d}: intervals must be written lower:upper")
        kw["sigma_bounds"] = [layers[i] for i in sorted(layers)]
    return ExperimentConfig(**kw).validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def packaged_config(name: str = "default") -> ExperimentConfig:
    """One of the configs shipped with the package (``default`` or ``desk``)."""
    text = resources.files("seunet").joinpath("configs", f"{name}.cfg").read_text(encoding="utf-8")
    return parse_config(text)
