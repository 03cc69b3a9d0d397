"""Training and evaluation loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import SegSample, save_mask, to_uint8
from .imageio import write_pgm
from .losses import LossConfig, combined_loss
from .metrics import AggregateReport, binarize, evaluate_masks
from .model import ModelConfig, TransAttUnet
from .optim import SGD, OptimConfig, lr_schedule
from .rng import Rng
from .tensor import NonFiniteError, Tensor, checked_mode

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_dice")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: TransAttUnet
    history: list[dict] = field(default_factory=list)
    best_val_dice: float = float("nan")
    initial_loss: float = float("nan")


def stack(samples: Sequence[SegSample]) -> tuple[Tensor, Tensor]:
    x = np.stack([s.image for s in samples]).astype(np.float32)
    y = np.stack([s.mask for s in samples]).astype(np.float32)
    return Tensor(x), Tensor(y)


def make_checkpoint(model: TransAttUnet, opt: SGD | None, epoch: int, optim_cfg: OptimConfig | None, seed: int, extra=None) -> Checkpoint:
    buffers = {n: b.data.copy() for n, b in model.named_buffers()}
    return Checkpoint(
        params={n: p.data.copy() for n, p in model.named_parameters()},
        buffers=buffers,
        momentum=opt.state_dict() if opt is not None else {},
        epoch=epoch,
        rng_state=Rng(seed).child("shuffle", epoch).get_state(),
        config={"model": model.cfg.to_dict(), "optim": optim_cfg.to_dict() if optim_cfg else {}, "seed": seed},
        extra=extra or {},
    )


def model_from_checkpoint(ckpt: Checkpoint) -> TransAttUnet:
    model = TransAttUnet(ModelConfig.from_dict(ckpt.config["model"]))
    model.load_state_dict(ckpt.model_state())
    return model


def _diagnose_nan(model: TransAttUnet, x: Tensor, y: Tensor, loss_cfg: LossConfig) -> str:
    try:
        with checked_mode():
            combined_loss(model(x), y, loss_cfg)
    except NonFiniteError as exc:
        return str(exc)
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            return f"parameter {name} is not finite"
    return "loss is not finite but no offending tensor was found"


def train(
    model_cfg: ModelConfig,
    optim_cfg: OptimConfig,
    train_set: Sequence[SegSample],
    val_set: Sequence[SegSample] = (),
    out_dir=None,
    seed: int | None = None,
    loss_cfg: LossConfig | None = None,
    resume=None,
    stop_after: int | None = None,
) -> TrainResult:
    """Minibatch SGD on ``combined_loss``.

    Writes ``train_log.csv``, ``last.ckpt`` and ``best.ckpt`` (highest val DICE)
    under ``out_dir`` when given. ``resume`` is a checkpoint path; training
    continues from its epoch counter. ``stop_after`` ends the run after that
    many total epochs (used to produce resumable partial runs).
    """
    if not train_set:
        raise TrainingError("empty training set")
    seed = model_cfg.seed if seed is None else seed
    loss_cfg = loss_cfg or LossConfig()
    model = TransAttUnet(model_cfg)
    opt = SGD(model.named_parameters(), optim_cfg, model.no_decay_names())
    start_epoch = 0
    best = -math.inf
    result = TrainResult(model)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt.model_state())
        opt.load_state_dict(ckpt.momentum)
        start_epoch = ckpt.epoch
        best = ckpt.extra.get("best_val_dice", best)

    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        if resume is None or not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)

    n = len(train_set)
    bs = optim_cfg.batch_size
    end_epoch = optim_cfg.epochs if stop_after is None else min(stop_after, optim_cfg.epochs)
    for epoch in range(start_epoch, end_epoch):
        lr = lr_schedule(epoch, optim_cfg)
        order = Rng(seed).child("shuffle", epoch).permutation(n)
        model.train()
        total = 0.0
        for b in range(0, n, bs):
            x, y = stack([train_set[i] for i in order[b : b + bs]])
            loss = combined_loss(model(x), y, loss_cfg)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}: {_diagnose_nan(model, x, y, loss_cfg)}")
            if epoch == 0 and b == 0:
                result.initial_loss = value
            loss.backward()
            opt.step(lr)
            opt.zero_grad()
            total += value * len(x)
        train_loss = total / n
        val_dice = evaluate(model, val_set).dice if val_set else float("nan")
        row = {"epoch": epoch, "lr": lr, "train_loss": train_loss, "val_dice": val_dice}
        result.history.append(row)
        log.info("epoch %d lr %.3g loss %.5f val_dice %.4f", epoch, lr, train_loss, val_dice)
        improved = val_dice > best
        if improved:
            best = val_dice
        if out is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([epoch, repr(lr), repr(train_loss), repr(val_dice)])
            extra = {"best_val_dice": best}
            ckpt = make_checkpoint(model, opt, epoch + 1, optim_cfg, seed, extra)
            save_checkpoint(out / "last.ckpt", ckpt)
            if improved:
                save_checkpoint(out / "best.ckpt", ckpt)
    result.best_val_dice = best
    return result


def predict_probs(model: TransAttUnet, samples: Sequence[SegSample], batch_size: int = 4) -> list[np.ndarray]:
    """Eval-mode probability maps, one H x W array per sample."""
    model.eval()
    probs = []
    for b in range(0, len(samples), batch_size):
        x, _ = stack(samples[b : b + batch_size])
        probs.extend(model(x).data[:, 0])
    return probs


def evaluate(model: TransAttUnet, samples: Sequence[SegSample], threshold: float = 0.5, batch_size: int = 4) -> AggregateReport:
    probs = predict_probs(model, samples, batch_size)
    return evaluate_masks((s.id, binarize(p, threshold), s.mask[0].astype(np.uint8)) for s, p in zip(samples, probs))


def evaluate_checkpoint(path, samples: Sequence[SegSample], out_dir=None, threshold: float = 0.5) -> AggregateReport:
    model = model_from_checkpoint(load_checkpoint(path))
    if samples:
        want = tuple(model.cfg.input_size)
        got = tuple(samples[0].image.shape[-2:])
        if got != want:
            raise TrainingError(f"checkpoint expects {want[0]}x{want[1]} inputs, dataset has {got[0]}x{got[1]}")
    report = evaluate(model, samples, threshold)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "metrics.csv")
        report.write_json(out / "metrics.json")
    return report


def write_predictions(model: TransAttUnet, samples: Sequence[SegSample], out_dir, threshold: float = 0.5) -> list[Path]:
    """``<id>_prob.pgm`` (probability x 255, rounded) and ``<id>_mask.pgm`` (0/255)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s, p in zip(samples, predict_probs(model, samples)):
        write_pgm(out / f"{s.id}_prob.pgm", to_uint8(p))
        save_mask(out / f"{s.id}_mask.pgm", binarize(p, threshold))
        written += [out / f"{s.id}_prob.pgm", out / f"{s.id}_mask.pgm"]
    return written
