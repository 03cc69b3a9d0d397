"""Command-line entry point: ``transattunet <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure (including any
gradient-check tolerance breach).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import SegSample, SynthConfig, load_image, read_dataset, split, synth_generate, write_dataset
from .losses import LossConfig
from .model import ModelConfig, TransAttUnet, export_activations
from .optim import OptimConfig, desk_optim
from .tensor import Tensor

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- config -----------------------------------------------------------------

_SECTIONS = {"model": ModelConfig, "optim": OptimConfig, "synth": SynthConfig, "loss": LossConfig}


def load_config(path: str | None) -> dict[str, dict]:
    """Route keys of a flat JSON object to the config dataclass that owns them.

    A key owned by several dataclasses (``seed``) goes to each of them.
    """
    out: dict[str, dict] = {k: {} for k in _SECTIONS}
    if path is None:
        return out
    try:
        flat = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(flat, dict):
        raise UsageError(f"config {path} must hold a flat JSON object")
    for key, value in flat.items():
        owners = [name for name, cls in _SECTIONS.items() if key in {f.name for f in fields(cls)}]
        if not owners:
            raise UsageError(f"unknown config key {key!r} in {path}")
        for name in owners:
            out[name][key] = value
    if "size" in out["synth"] and isinstance(out["synth"]["size"], int):
        out["synth"]["size"] = (out["synth"]["size"],) * 2
    return out


def _model_cfg(conf: dict, seed: int | None, image_hw) -> ModelConfig:
    d = dict(conf["model"])
    if seed is not None:
        d["seed"] = seed
    d.setdefault("input_size", list(image_hw))
    return ModelConfig.from_dict(d)


def _optim_cfg(conf: dict, args) -> OptimConfig:
    d = desk_optim().to_dict()
    d.update(conf["optim"])
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    return OptimConfig.from_dict(d)


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required for {args.command}")


def _dataset_split(root, name: str) -> list[SegSample]:
    splits = read_dataset(root)
    if name not in splits:
        raise RuntimeError(f"{root}: no samples in split {name!r} (have {sorted(splits)})")
    return splits[name]


# -- commands ---------------------------------------------------------------


def cmd_synth(args, conf) -> int:
    _require(args, "out")
    d = dict(conf["synth"])
    if args.size is not None:
        d["size"] = (args.size, args.size)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.kinds:
        d["kinds"] = tuple(args.kinds.split(","))
    if args.noise is not None:
        d["noise_sigma"] = args.noise
    cfg = SynthConfig(**d)
    samples = synth_generate(cfg, args.n)
    tr, va, te = split(samples, (0.8, 0.1, 0.1), cfg.seed)
    write_dataset(args.out, {"train": tr, "val": va, "test": te})
    print(f"wrote {len(samples)} samples ({len(tr)} train / {len(va)} val / {len(te)} test) to {args.out}")
    return EXIT_OK


def cmd_train(args, conf) -> int:
    from .training import evaluate, train

    _require(args, "data", "out")
    splits = read_dataset(args.data)
    train_set = splits.get("train", [])
    val_set = splits.get("val", [])
    if not train_set:
        raise RuntimeError(f"{args.data}: empty train split")
    mcfg = _model_cfg(conf, args.seed, train_set[0].image.shape[-2:])
    ocfg = _optim_cfg(conf, args)
    result = train(mcfg, ocfg, train_set, val_set, args.out, loss_cfg=LossConfig(**conf["loss"]), resume=args.resume)
    eval_set = splits.get("test") or val_set or train_set
    report = evaluate(result.model, eval_set)
    report.write_csv(Path(args.out) / "metrics.csv")
    report.write_json(Path(args.out) / "metrics.json")
    print(f"trained {ocfg.epochs} epochs; best val DICE {result.best_val_dice:.4f}; eval DICE {report.dice:.4f}")
    return EXIT_OK


def cmd_eval(args, conf) -> int:
    from .training import evaluate_checkpoint

    _require(args, "checkpoint", "data", "out")
    report = evaluate_checkpoint(args.checkpoint, _dataset_split(args.data, args.split), args.out)
    print(json.dumps(report.summary()))
    return EXIT_OK


def cmd_predict(args, conf) -> int:
    from .training import model_from_checkpoint, write_predictions

    _require(args, "checkpoint", "out")
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    if args.images:
        samples = [SegSample(Path(p).stem, load_image(p), np.zeros_like(load_image(p)), "file") for p in args.images]
    else:
        _require(args, "data")
        samples = _dataset_split(args.data, args.split)
    paths = write_predictions(model, samples, args.out, args.threshold)
    print(f"wrote {len(paths)} files to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args, conf) -> int:
    from .gradsuite import run_suite

    results = run_suite(print)
    failed = [r.name for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {total:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_export(args, conf) -> int:
    from .training import model_from_checkpoint

    _require(args, "out")
    if args.image:
        image = load_image(args.image)
    else:
        _require(args, "data")
        image = _dataset_split(args.data, args.split)[0].image
    if args.checkpoint:
        model = model_from_checkpoint(load_checkpoint(args.checkpoint))
        model.eval()
    else:
        # untrained weights: batch statistics stand in for running statistics
        model = TransAttUnet(_model_cfg(conf, args.seed, image.shape[-2:]))
    paths = export_activations(model, Tensor(image[None]), args.out)
    print("\n".join(str(p) for p in paths))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "export-activations": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON of model/optim/synth/loss fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--device", default="cpu", choices=["cpu"])
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="transattunet", description="Desk-scale TransAttUnet segmentation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--size", type=int)
    p.add_argument("--kinds", help="comma list of ellipse,rectangle")
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="dataset directory with manifest.csv")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test")

    p = sub.add_parser("predict", parents=[common], help="write probability and mask PGMs")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("images", nargs="*", help="PGM/PNG files (instead of --data)")

    sub.add_parser("gradcheck", parents=[common], help="run the finite-difference suite")

    p = sub.add_parser("export-activations", parents=[common], help="dump decoder-stage activation maps")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--image")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        conf = load_config(args.config)
        return COMMANDS[args.command](args, conf)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"transattunet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # surfaced as a runtime failure exit code
        print(f"transattunet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
