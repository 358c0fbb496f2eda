"""Evaluation, inference, pre-processing benchmark and range-image rendering."""

from __future__ import annotations

import csv
import os
import resource
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..checkpoint import load_checkpoint
from ..errors import DataError
from ..losses import pseudo_labels
from ..network import RangeFusionNet
from ..preproc import (
    IGNORE_ID,
    PixelClusterIndex,
    RawScan,
    SensorConfig,
    collate,
    load_scan,
    preprocess_pipeline,
    write_labels,
)
from ..tensor import no_grad
from .metrics import compute_miou, confusion_update, new_confusion

PathLike = Union[str, os.PathLike]


@dataclass
class Prepared:
    """A pre-processed scan: retained points only."""

    index: PixelClusterIndex
    features: np.ndarray
    labels: Optional[np.ndarray]
    kept: np.ndarray
    num_points: int


def prepare(scan: RawScan, sensor: SensorConfig, workers: int = 1, mode: str = "fused") -> Prepared:
    proj, index, feats = preprocess_pipeline(scan, sensor, mode=mode, workers=workers)
    labels = None if scan.labels is None else scan.labels[proj.kept]
    return Prepared(index, feats, labels, proj.kept, len(scan))


def stack(batch: Sequence[Prepared]) -> tuple[np.ndarray, PixelClusterIndex, Optional[np.ndarray]]:
    index = batch[0].index if len(batch) == 1 else collate([p.index for p in batch])
    feats = np.concatenate([p.features for p in batch])
    labels = None
    if all(p.labels is not None for p in batch):
        labels = np.concatenate([p.labels for p in batch])
    return feats, index, labels


def predict(model: RangeFusionNet, prepared: Prepared) -> np.ndarray:
    """Class per retained point (model must be in eval mode)."""
    with no_grad():
        logits = model(prepared.features.astype(model.cfg.dtype, copy=False), prepared.index).logits
    return np.argmax(logits.data, axis=1)


def peak_rss_mb() -> float:
    """Peak resident set size of this process (stands in for peak GPU memory)."""
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


@dataclass
class EvalReport:
    confusion: np.ndarray
    iou: list[float]
    miou: float
    accuracy: float
    num_scans: int
    num_points: int
    preprocess_s: float
    inference_s: float
    total_s: float
    peak_rss_mb: float

    def rows(self, class_names: Optional[Sequence[str]] = None) -> list[tuple[str, str]]:
        names = class_names or [f"class_{c}" for c in range(len(self.iou))]
        out = [(f"iou_{n}", "nan" if np.isnan(v) else f"{v:.6f}") for n, v in zip(names, self.iou)]
        out += [
            ("miou", f"{self.miou:.6f}"),
            ("accuracy", f"{self.accuracy:.6f}"),
            ("scans", str(self.num_scans)),
            ("points", str(self.num_points)),
            ("preprocess_ms_per_scan", f"{1e3 * self.preprocess_s / self.num_scans:.3f}"),
            ("inference_ms_per_scan", f"{1e3 * self.inference_s / self.num_scans:.3f}"),
            ("total_ms_per_scan", f"{1e3 * self.total_s / self.num_scans:.3f}"),
            ("peak_rss_mb", f"{self.peak_rss_mb:.1f}"),
        ]
        return out


def evaluate_model(
    model: RangeFusionNet,
    scans: Sequence[Union[RawScan, Prepared]],
    workers: int = 1,
) -> EvalReport:
    """Per-scan pre-processing and forward passes, timed separately."""
    if not scans:
        raise DataError("nothing to evaluate")
    was_training = model.training
    model.eval()
    cm = new_confusion(model.cfg.num_classes)
    pre_s = inf_s = 0.0
    points = 0
    start = time.perf_counter()
    for item in scans:
        t0 = time.perf_counter()
        prep = item if isinstance(item, Prepared) else prepare(item, model.cfg.sensor, workers)
        t1 = time.perf_counter()
        pred = predict(model, prep)
        t2 = time.perf_counter()
        pre_s += t1 - t0
        inf_s += t2 - t1
        if prep.labels is None:
            raise DataError("evaluation scans need labels")
        confusion_update(cm, pred, prep.labels)
        points += pred.size
    total = time.perf_counter() - start
    model.train(was_training)
    iou, miou = compute_miou(cm)
    labeled = cm.sum()
    acc = float(np.trace(cm) / labeled) if labeled else float("nan")
    return EvalReport(cm, iou, miou, acc, len(scans), points, pre_s, inf_s, total, peak_rss_mb())


def write_report_csv(report: EvalReport, path: PathLike, class_names: Optional[Sequence[str]] = None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerows(report.rows(class_names))


def evaluate(checkpoint: PathLike, scans: Sequence[RawScan], workers: int = 1) -> EvalReport:
    model, _ = load_checkpoint(checkpoint)
    return evaluate_model(model, scans, workers)


def infer_labels(model: RangeFusionNet, scan: RawScan, workers: int = 1) -> np.ndarray:
    """One label per input point; points dropped by pre-processing (too close
    to the sensor) get the ignore id."""
    model.eval()
    prep = prepare(scan, model.cfg.sensor, workers)
    out = np.full(len(scan), IGNORE_ID, dtype=np.int64)
    out[prep.kept] = predict(model, prep)
    return out


def infer(checkpoint: PathLike, scan_path: PathLike, out_path: PathLike, workers: int = 1) -> np.ndarray:
    model, _ = load_checkpoint(checkpoint)
    labels = infer_labels(model, load_scan(scan_path), workers)
    write_labels(labels, out_path)
    return labels


# ------------------------------------------------------------------- benchmark

BENCH_FIELDS = ["mode", "workers", "repeats", "scans", "mean_points", "mean_ms_per_scan", "min_ms_per_scan", "speedup"]


def bench_preproc(scans: Sequence[RawScan], sensor: SensorConfig, workers: int, repeats: int) -> list[dict]:
    """Mean per-scan pre-processing time of the staged serial workflow and the
    fused pipeline at ``workers`` threads, over ``repeats`` passes."""
    if not scans:
        raise DataError("no scans to benchmark")
    if repeats < 1:
        raise DataError("repeats must be >= 1")
    # warm-up compiles kernels and spins up the thread pool
    preprocess_pipeline(scans[0], sensor, "fused", workers)
    preprocess_pipeline(scans[0], sensor, "staged", 1)
    rows = []
    for mode, w in (("staged", 1), ("fused", workers)):
        per_pass = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            for scan in scans:
                preprocess_pipeline(scan, sensor, mode, w)
            per_pass.append((time.perf_counter() - t0) / len(scans))
        rows.append({
            "mode": mode,
            "workers": w,
            "repeats": repeats,
            "scans": len(scans),
            "mean_points": float(np.mean([len(s) for s in scans])),
            "mean_ms_per_scan": 1e3 * float(np.mean(per_pass)),
            "min_ms_per_scan": 1e3 * float(np.min(per_pass)),
        })
    base = rows[0]["mean_ms_per_scan"]
    for row in rows:
        row["speedup"] = base / row["mean_ms_per_scan"]
    return rows


def write_bench_csv(rows: Sequence[dict], path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------- images

PALETTE = np.array(
    [
        [128, 64, 128],
        [245, 150, 100],
        [80, 200, 80],
        [90, 30, 150],
        [255, 0, 0],
        [0, 175, 255],
        [255, 200, 0],
        [150, 240, 255],
    ],
    dtype=np.uint8,
)


def class_colors(num: int) -> np.ndarray:
    """Fixed palette, extended deterministically past its length."""
    if num <= len(PALETTE):
        return PALETTE[:num]
    extra = np.random.default_rng(0).integers(40, 256, (num - len(PALETTE), 3)).astype(np.uint8)
    return np.concatenate([PALETTE, extra])


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def write_pgm(path: PathLike, gray: np.ndarray) -> None:
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def render_range_image(scan: RawScan, labels: Optional[np.ndarray], sensor: SensorConfig) -> tuple[np.ndarray, np.ndarray]:
    """(H x W x 3 class colors, H x W depth in 0..255; nearer is brighter).

    Pixels take the majority class of their points; empty pixels are black.
    Without labels, occupied pixels are white.
    """
    prep = prepare(RawScan(scan.points, labels), sensor)
    index = prep.index
    rgb = np.zeros((sensor.height * sensor.width, 3), dtype=np.uint8)
    occupied = index.counts > 0
    if labels is None:
        rgb[occupied] = 255
    else:
        lab = np.asarray(prep.labels)
        num = int(lab[lab != IGNORE_ID].max(initial=-1)) + 1
        votes = pseudo_labels(lab, index, max(num, 1)).reshape(-1)
        colors = class_colors(max(num, 1))
        known = votes != IGNORE_ID
        rgb[known] = colors[votes[known]]
    depth = prep.features[:, 4].astype(np.float64)
    nearest = np.full(index.num_pixels, np.inf)
    np.minimum.at(nearest, index.pixel_index, depth)
    gray = np.zeros(index.num_pixels, dtype=np.uint8)
    if occupied.any():
        far = nearest[occupied].max()
        gray[occupied] = np.clip(255.0 * (1.0 - nearest[occupied] / (far * 1.05)), 1, 255).astype(np.uint8)
    return rgb.reshape(sensor.height, sensor.width, 3), gray.reshape(sensor.height, sensor.width)


def viz(scan: RawScan, labels: Optional[np.ndarray], sensor: SensorConfig, out_ppm: PathLike) -> tuple[Path, Path]:
    """Write the class image as PPM (P6) and the depth image as PGM (P5)
    next to it."""
    rgb, gray = render_range_image(scan, labels, sensor)
    ppm = Path(out_ppm)
    pgm = ppm.with_suffix(".pgm")
    write_ppm(ppm, rgb)
    write_pgm(pgm, gray)
    return ppm, pgm
