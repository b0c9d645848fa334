"""Command line entry point: ``seunet <command> ...``.

Exit codes: 0 success, 1 I/O or checkpoint format error, 2 config error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..equivariance import rescale
from ..inference import fuse
from ..scale_space import build_basis
from . import checkpoint
from .config import ConfigError, load_config
from .data import dataset_for, generate_samples
from .evaluate import evaluate_multiscale, model_equivariance, predict_maps, strategies_for
from .train import ConfinementError, NumericFailure, train

log = logging.getLogger("seunet")


def write_pgm(path, arr: np.ndarray, maxval: int = 255):
    """Binary (P5) portable graymap of an 8-bit array."""
    arr = np.asarray(arr)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        fh.write(np.clip(arr, 0, maxval).astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    config = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(config, log_fn=log.info)
    checkpoint.save(out / "model.ckpt", result.model, config)
    _write_json(out / "train_log.json", {"history": result.history, "config": config.to_dict()})
    log.info("wrote %s", out / "model.ckpt")
    return 0


def cmd_eval(args) -> int:
    model, config, _ = checkpoint.load(args.checkpoint)
    scales = _csv_floats(args.scales) if args.scales else config.test_scales
    if any(s <= 0 for s in scales):
        raise ConfigError("scales must be positive")
    _, test = dataset_for(config)
    strategies = strategies_for(getattr(model, "gamma", 1))
    if args.fuse not in strategies:
        raise ConfigError(f"--fuse {args.fuse!r} not available for this model; choose from {strategies}")
    table = evaluate_multiscale(model, test, scales, config.classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = table.to_dict()
    report["selected_strategy"] = args.fuse
    report["selected_miou"] = table.miou[args.fuse]
    _write_json(out / "metrics.json", report)
    (out / "metrics.csv").write_text(table.to_csv(), encoding="utf-8")
    step = 255 // max(config.classes - 1, 1)
    for s in scales:
        imgs = np.stack([rescale(t.image, s) for t in test[:args.n_maps]])
        maps = predict_maps(model, imgs)
        for n in range(len(imgs)):
            write_pgm(out / f"labels_s{s:.4f}_{n:03d}.pgm", fuse(maps[:, n], args.fuse) * step)
    for s, v in zip(scales, table.miou[args.fuse]):
        print(f"scale {s:.4f}  mIoU[{args.fuse}] {v:.4f}")
    print(f"mean over scales: {table.mean(args.fuse):.4f}")
    return 0


def cmd_equiv(args) -> int:
    model, config, _ = checkpoint.load(args.checkpoint)
    scales = _csv_floats(args.scales) if args.scales else config.test_scales
    _, test = dataset_for(config)
    images = [t.image for t in test[:args.n_images]]
    report = model_equivariance(model, images, scales, {"checkpoint": str(args.checkpoint)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "equivariance.json", report.to_dict())
    for s, m in zip(report.scale_factors, report.pair_matrices):
        np.savetxt(out / f"pair_matrix_s{s:.4f}.csv", m, delimiter=",", fmt="%.10g")
    for s, e in zip(report.scale_factors, report.per_scale_error):
        print(f"scale {s:.4f}  delta {e:.6f}")
    print(f"mean: {report.mean_error:.6f}")
    return 0


def cmd_filters(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sigma in _csv_floats(args.sigma):
        basis = build_basis(sigma, args.order, normalization=args.normalization)
        for (i, j), k in basis.kernels.items():
            np.savetxt(out / f"sigma{sigma:g}_i{i}_j{j}.csv", k, delimiter=",", fmt="%.12g")
        print(f"sigma {sigma:g}: {len(basis.kernels)} kernels of size {basis.size}")
    return 0


def cmd_gen_data(args) -> int:
    classes = 2 if args.spec == "blobs" else args.classes
    samples = generate_samples(args.spec, args.seed, args.n, args.size, classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    step = 255 // max(classes - 1, 1)
    for n, s in enumerate(samples):
        write_pgm(out / f"image_{n:04d}.pgm", np.round(s.image[0] * 255))
        write_pgm(out / f"mask_{n:04d}.pgm", s.mask * step)
    _write_json(out / "metadata.json", {"spec": args.spec, "seed": args.seed, "size": args.size,
                                        "classes": classes, "samples": [s.metadata for s in samples]})
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seunet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="multi-scale evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--fuse", default="p_ens", help="arithm | p_dist | p_ens | head:<k>")
    e.add_argument("--scales", help="comma-separated scale factors")
    e.add_argument("--out", default="eval")
    e.add_argument("--n-maps", type=int, default=4, help="label maps written per scale")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("equiv", help="equivariance error of a checkpoint")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--scales")
    q.add_argument("--n-images", type=int, default=10)
    q.add_argument("--out", default="equiv")
    q.set_defaults(func=cmd_equiv)

    f = sub.add_parser("filters", help="write Gaussian derivative kernels as CSV grids")
    f.add_argument("--sigma", required=True)
    f.add_argument("--order", type=int, default=1)
    f.add_argument("--normalization", default="none", choices=("none", "scale"))
    f.add_argument("--out", default="filters")
    f.set_defaults(func=cmd_filters)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as PGM files")
    g.add_argument("--spec", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (NumericFailure, ConfinementError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (OSError, checkpoint.CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
