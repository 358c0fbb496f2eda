"""Deterministic training loop with per-epoch CSV logs and best-checkpoint selection."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..checkpoint import save_checkpoint
from ..data import augment, batch_iter, dataset_split, load_dataset, synth_dataset
from ..errors import DataError, NumericalError
from ..losses import pseudo_labels, total_loss
from ..network import RangeFusionNet
from ..preproc import IGNORE_ID, RawScan
from ..tensor import AdamW, WarmupCosine
from .config import RunConfig
from .evaluate import Prepared, evaluate_model, prepare, stack

LOSS_KEYS = ("loss", "ce_pt", "ce_px", "lovasz_px", "boundary_px")


@dataclass
class TrainResult:
    out_dir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    metrics_csv: Path
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_miou: float = float("nan")


def load_scans(cfg: RunConfig) -> list[RawScan]:
    scans = load_dataset(cfg.data.dir) if cfg.data.dir else synth_dataset(cfg.data.synth, cfg.data.count)
    for scan in scans:
        if scan.labels is None:
            raise DataError("training scans need labels")
        lab = scan.labels[scan.labels != IGNORE_ID]
        if lab.size and (lab.min() < 0 or lab.max() >= cfg.model.num_classes):
            raise DataError(f"labels outside [0, {cfg.model.num_classes})")
    return scans


def split_scans(cfg: RunConfig, scans: Sequence[RawScan]) -> tuple[list[RawScan], list[RawScan]]:
    f = cfg.data.train_fraction
    if f >= 1.0:
        return list(scans), []
    train, val = dataset_split(list(scans), (f, 1.0 - f), cfg.data.split_seed)
    return train, val


def schedule_for(cfg: RunConfig) -> WarmupCosine:
    o = cfg.optim
    return WarmupCosine(
        total_epochs=float(cfg.epochs),
        warmup_epochs=min(o.warmup_epochs, float(cfg.epochs)),
        peak=o.lr,
        final=min(o.final_lr, o.lr),
    )


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def train(
    cfg: RunConfig,
    train_scans: Optional[Sequence[RawScan]] = None,
    val_scans: Optional[Sequence[RawScan]] = None,
    out_dir: Optional[str] = None,
    progress: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train from ``cfg``; scans default to the configured dataset and split.

    ``metrics.csv`` holds only seed-determined values; wall-clock times go to
    ``timing.csv``. The best checkpoint maximizes validation mIoU (training
    mIoU on un-augmented scans when there is no validation split).
    """
    if train_scans is None:
        train_scans, val_scans = split_scans(cfg, load_scans(cfg))
    train_scans = list(train_scans)
    val_scans = list(val_scans or [])
    if not train_scans:
        raise DataError("no training scans")
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    sensor = cfg.model.sensor
    eval_set = [prepare(s, sensor, cfg.workers) for s in (val_scans or train_scans)]
    fixed = None if cfg.data.augment else [prepare(s, sensor, cfg.workers) for s in train_scans]

    model = RangeFusionNet(cfg.model, seed=cfg.seed)
    model.train()
    schedule = schedule_for(cfg)
    opt = AdamW(model.parameters(), schedule, weight_decay=cfg.optim.weight_decay)
    num_batches = math.ceil(len(train_scans) / cfg.optim.batch_size)
    c = cfg.model.num_classes

    metrics_csv, timing_csv = out / "metrics.csv", out / "timing.csv"
    best_ckpt, last_ckpt = out / "best.ckpt", out / "last.ckpt"
    header = ["epoch", "lr", *LOSS_KEYS, "train_acc", "val_miou"] + [f"val_iou_{k}" for k in range(c)]
    result = TrainResult(out, best_ckpt, last_ckpt, metrics_csv)

    with open(metrics_csv, "w", newline="") as mfh, open(timing_csv, "w", newline="") as tfh:
        mlog, tlog = csv.writer(mfh), csv.writer(tfh)
        mlog.writerow(header)
        tlog.writerow(["epoch", "train_s", "eval_s"])
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            aug_rng = np.random.default_rng([cfg.seed, epoch])
            sums = dict.fromkeys(LOSS_KEYS, 0.0)
            correct = labeled = 0
            lr = 0.0
            order = list(range(len(train_scans)))
            for b, ids in enumerate(batch_iter(order, cfg.optim.batch_size, seed=cfg.seed * 100_003 + epoch)):
                if fixed is not None:
                    batch = [fixed[i] for i in ids]
                else:
                    batch = [prepare(augment(train_scans[i], cfg.augment, aug_rng), sensor, cfg.workers) for i in ids]
                feats, index, labels = stack(batch)
                out_t = model(feats, index)
                pix = pseudo_labels(labels, index, c)
                loss, parts = total_loss(out_t.logits, out_t.aux_logits, labels, pix, cfg.loss)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss at epoch {epoch} batch {b}: {parts}")
                opt.zero_grad()
                loss.backward()
                lr = schedule.lr_at(epoch + (b + 1) / num_batches)
                opt.step(lr)
                sums["loss"] += value
                for key in LOSS_KEYS[1:]:
                    sums[key] += parts.get(key, 0.0)
                keep = labels != IGNORE_ID
                correct += int(np.sum(np.argmax(out_t.logits.data, axis=1)[keep] == labels[keep]))
                labeled += int(keep.sum())
            t1 = time.perf_counter()
            report = evaluate_model(model, eval_set)
            t2 = time.perf_counter()
            row = {
                "epoch": epoch + 1,
                "lr": lr,
                **{k: v / num_batches for k, v in sums.items()},
                "train_acc": correct / max(labeled, 1),
                "val_miou": report.miou,
            }
            for k, v in enumerate(report.iou):
                row[f"val_iou_{k}"] = v
            mlog.writerow([_fmt(row[h]) for h in header])
            mfh.flush()
            tlog.writerow([epoch + 1, f"{t1 - t0:.3f}", f"{t2 - t1:.3f}"])
            tfh.flush()
            result.history.append(row)
            meta = {"epoch": epoch + 1, "val_miou": report.miou, "seed": cfg.seed}
            if not (report.miou <= result.best_miou):  # first epoch or strict improvement
                result.best_miou, result.best_epoch = report.miou, epoch + 1
                save_checkpoint(best_ckpt, model.eval(), meta)
                model.train()
            if progress is not None:
                progress({**row, "train_s": t1 - t0, "eval_s": t2 - t1})
    save_checkpoint(last_ckpt, model.eval(), {"epoch": cfg.epochs, "val_miou": result.history[-1]["val_miou"]})
    model.train()
    return result


def train_accuracy(model: RangeFusionNet, prepared: Sequence[Prepared]) -> float:
    """Point accuracy of ``model`` (eval mode) on pre-processed scans."""
    report = evaluate_model(model, prepared)
    return report.accuracy
