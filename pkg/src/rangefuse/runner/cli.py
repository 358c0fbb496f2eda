"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..checkpoint import load_checkpoint
from ..data import CLASS_NAMES, save_dataset, scan_paths, synth_dataset
from ..errors import ConfigError, DataError, DimensionError, FormatError, NumericalError
from ..preproc import SensorConfig, load_scan
from .config import load_run_config, load_synth_config
from .evaluate import bench_preproc, evaluate_model, infer, infer_labels, viz, write_bench_csv, write_report_csv
from .train import train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SENSORS = {"desk": SensorConfig.desk, "beams32": SensorConfig.beams32, "beams64": SensorConfig.beams64}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rangefuse", description="Range-image / point fusion segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from an INI config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="per-class IoU, mIoU and timing on a scan directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("infer", help="write one uint32 label per point")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("bench-preproc", help="staged vs fused pre-processing timing")
    p.add_argument("--data", required=True)
    p.add_argument("--workers", type=int, required=True)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--csv", required=True)
    p.add_argument("--sensor", choices=sorted(SENSORS), default="beams64")

    p = sub.add_parser("viz", help="class image (PPM) and depth image (PGM)")
    p.add_argument("--scan", required=True)
    p.add_argument("--labels")
    p.add_argument("--checkpoint", help="color by predictions instead of labels")
    p.add_argument("--out", required=True)
    p.add_argument("--sensor", choices=sorted(SENSORS), default="desk")

    p = sub.add_parser("synth", help="write synthetic labeled scans")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    return parser


def _train(args) -> None:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(out=args.out)

    def report(row):
        print(
            f"epoch {row['epoch']:3d}  lr {row['lr']:.2e}  loss {row['loss']:.4f}  "
            f"train_acc {row['train_acc']:.4f}  val_miou {row['val_miou']:.4f}  ({row['train_s']:.1f}s)",
            flush=True,
        )

    result = train(cfg, progress=report)
    print(f"best val mIoU {result.best_miou:.4f} at epoch {result.best_epoch}; checkpoint {result.best_checkpoint}")


def _eval(args) -> None:
    model, _ = load_checkpoint(args.checkpoint)
    scans = [load_scan(p) for p in scan_paths(args.data)]
    report = evaluate_model(model, scans, args.workers)
    names = list(CLASS_NAMES) if model.cfg.num_classes == len(CLASS_NAMES) else None
    for key, value in report.rows(names):
        print(f"{key:24s} {value}")
    if args.csv:
        write_report_csv(report, args.csv, names)


def _bench(args) -> None:
    if args.workers < 1 or args.repeat < 1:
        raise UsageError("--workers and --repeat must be >= 1")
    scans = [load_scan(p) for p in scan_paths(args.data)]
    rows = bench_preproc(scans, SENSORS[args.sensor](), args.workers, args.repeat)
    write_bench_csv(rows, args.csv)
    for row in rows:
        print(f"{row['mode']:7s} workers={row['workers']}  {row['mean_ms_per_scan']:.3f} ms/scan  speedup {row['speedup']:.2f}x")


def _viz(args) -> None:
    if args.labels and not Path(args.labels).is_file():
        raise DataError(f"label file {args.labels} not found")
    scan = load_scan(args.scan, args.labels)
    labels = scan.labels
    sensor = SENSORS[args.sensor]()
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        sensor = model.cfg.sensor
        labels = infer_labels(model, scan)
    ppm, pgm = viz(scan, labels, sensor, args.out)
    print(f"wrote {ppm} and {pgm}")


def _synth(args) -> None:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    cfg = load_synth_config(args.config)
    paths = save_dataset(synth_dataset(cfg, args.count), args.out)
    print(f"wrote {len(paths)} scans to {Path(args.out)}")


COMMANDS = {
    "train": _train,
    "eval": _eval,
    "infer": lambda a: infer(a.checkpoint, a.scan, a.out, a.workers),
    "bench-preproc": _bench,
    "viz": _viz,
    "synth": _synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"rangefuse: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, DimensionError, OSError) as exc:
        print(f"rangefuse: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"rangefuse: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
