"""Command-line interface.

Subcommands: synth, mirror, train, eval, predict, gradcheck, baseline.
Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from gunet.data import (MINUTES_PER_FRAME, load_city, mirror_city, save_city,
                        synth_city, write_pgm)
from gunet.errors import DataError, GunetError, NumericError, UsageError
from gunet.features import Timestamp
from gunet.gradcheck import SUITES, run_all
from gunet.kernels import BACKEND
from gunet.model import (ModelConfig, init_model_params, load_checkpoint,
                         read_config_file)
from gunet.train import (EvalReport, ModelPredictor, NaivePredictor, evaluate,
                         target_frames, train, write_eval_csv)

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 by default; we use 2 for data
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="gunet",
                description="Traffic forecasting with a graph U-Net "
                            f"(kernel backend: {BACKEND})")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic city dataset")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--size", default="32x32", help="HxW, e.g. 32x32")
    sp.add_argument("--days", type=int, default=4)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("mirror", help="point-reflect a city dataset")
    sp.add_argument("--in", dest="src", required=True)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--data", required=True,
                    help="comma-separated city directories")
    sp.add_argument("--config", help="'key = value' model config file")
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="loss log CSV (default: <out>.log.csv)")

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--mirrored", action="store_true",
                    help="evaluate on point-reflected cities")
    sp.add_argument("--report", required=True, help="output CSV")
    sp.add_argument("--dump-frames", dest="dump_frames",
                    help="write PGM frame dumps into this directory")

    sp = sub.add_parser("predict", help="predict one window, write TMV")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--at", required=True,
                    help="DAY:HH:MM of the first predicted frame")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--module", choices=sorted(SUITES),
                    help="run a single suite (default: all)")
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("baseline", help="evaluate the naive-average baseline")
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True)
    return p


def _load_datasets(paths: str):
    return [load_city(Path(d)) for d in paths.split(",") if d]


def _parse_size(text: str):
    try:
        h, w = (int(s) for s in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size expects HxW, got {text!r}")
    return h, w


def _parse_at(text: str):
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"--at expects DAY:HH:MM, got {text!r}")
    try:
        day, hh, mm = (int(s) for s in parts)
    except ValueError:
        raise UsageError(f"--at expects integers, got {text!r}")
    if not (0 <= hh < 24 and 0 <= mm < 60):
        raise UsageError(f"--at has no such time of day: {text!r}")
    if mm % MINUTES_PER_FRAME:
        raise UsageError(f"--at minutes must be a multiple of "
                         f"{MINUTES_PER_FRAME}, got {mm}")
    return day, hh * 60 + mm


def _dump_frames(report_dir: Path, predictor, datasets) -> None:
    """First grid sample per city, prediction and truth, PGM per channel."""
    report_dir.mkdir(parents=True, exist_ok=True)
    for city in datasets:
        predict = predictor.for_city(city)
        movie = city.movies[0]
        start = 0
        ts = Timestamp(predictor.in_frames * MINUTES_PER_FRAME,
                       city.weekdays[0])
        pred = np.clip(255.0 * predict(movie, start, ts), 0, 255) \
            .astype(np.uint8)
        truth = target_frames(movie, start, predictor.in_frames)
        for f in range(pred.shape[0]):
            for c in range(pred.shape[-1]):
                stem = f"{city.name}_f{f}_c{c}"
                write_pgm(report_dir / f"{stem}_pred.pgm", pred[f, :, :, c])
                write_pgm(report_dir / f"{stem}_true.pgm", truth[f, :, :, c])


def _print_report(report: EvalReport) -> None:
    tag = " (mirrored)" if report.mirrored else ""
    for c in report.cities:
        print(f"{c.name}{tag}: mse={c.mse:.4f} mse*={c.mse_star:.4f} "
              f"rel={c.rel_mse:.6f} n={c.n_samples}")
    print(f"overall{tag}: mse={report.overall_mse:.4f} "
          f"rel={report.overall_rel_mse:.6f}")


def _run(args) -> int:
    if args.command == "synth":
        h, w = _parse_size(args.size)
        city = synth_city(args.seed, h, w, args.days,
                          name=Path(args.out).name)
        save_city(city, Path(args.out))
        print(f"wrote {city.name}: {h}x{w}, {args.days} days, "
              f"{int((city.street_map > 0).sum())} street pixels")
        return 0

    if args.command == "mirror":
        city = load_city(Path(args.src))
        save_city(mirror_city(city), Path(args.out))
        print(f"wrote mirrored {city.name}")
        return 0

    if args.command == "train":
        datasets = _load_datasets(args.data)
        config = read_config_file(args.config) if args.config else \
            ModelConfig()
        params = init_model_params(config, seed=args.seed)
        result = train(params, config, datasets, steps=args.steps,
                       seed=args.seed, out_path=args.out, log_path=args.log)
        print(f"trained {result.steps} steps, final loss "
              f"{result.final_loss!r}; wrote {result.checkpoint_path} "
              f"and {result.log_path}")
        return 0

    if args.command == "eval":
        datasets = _load_datasets(args.data)
        params, config = load_checkpoint(args.ckpt)
        predictor = ModelPredictor(params, config)
        report = evaluate(predictor, datasets, mirrored=args.mirrored)
        write_eval_csv(report, args.report)
        _print_report(report)
        if args.dump_frames:
            shown = [mirror_city(c) if args.mirrored else c for c in datasets]
            _dump_frames(Path(args.dump_frames), predictor, shown)
        return 0

    if args.command == "predict":
        datasets = _load_datasets(args.data)
        if len(datasets) != 1:
            raise UsageError("predict expects exactly one city directory")
        city = datasets[0]
        params, config = load_checkpoint(args.ckpt)
        day, minute = _parse_at(args.at)
        if not 0 <= day < city.n_days:
            raise DataError(f"day {day} out of range, city has "
                            f"{city.n_days} days")
        start = minute // MINUTES_PER_FRAME - config.in_frames
        movie = city.movies[day]
        if start < 0 or start + config.in_frames + 12 > len(movie):
            raise DataError(f"--at {args.at}: the seed hour plus one hour of "
                            "horizons must fit inside the day")
        predictor = ModelPredictor(params, config)
        ts = Timestamp(minute % 1440, city.weekdays[day])
        pred = predictor.for_city(city)(movie, start, ts)
        frames = np.clip(np.rint(255.0 * pred), 0, 255).astype(np.uint8)
        from gunet.data import write_tmv
        write_tmv(Path(args.out), frames)
        print(f"wrote {args.out}: {frames.shape[0]} frames at day {day}, "
              f"{minute // 60:02d}:{minute % 60:02d}")
        return 0

    if args.command == "gradcheck":
        modules = [args.module] if args.module else None
        results = run_all(seed=args.seed, modules=modules)
        failed = False
        for r in results:
            status = "PASS" if r.ok else "FAIL"
            print(f"{r.name}: rel_err={r.rel_err:.3e} tol={r.tol:.0e} "
                  f"{status}")
            failed |= not r.ok
        if failed:
            raise NumericError("gradient check failed")
        return 0

    if args.command == "baseline":
        datasets = _load_datasets(args.data)
        report = evaluate(NaivePredictor(), datasets)
        write_eval_csv(report, args.report)
        _print_report(report)
        return 0

    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _run(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except GunetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
