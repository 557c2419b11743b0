"""Training loop, evaluation harness, and the naive-average baseline.

Training follows the reference recipe: each step accumulates gradients
of 16 sequential samples, averages them, and applies one Adam update at
the warmup/decay learning rate.  Losses are computed on the normalized
[0,1] scale; the logged/reported metric rescales by 255 so numbers are
comparable to the raw uint8 frames.

Evaluation samples a deterministic grid (every full hour 00:00-22:00 of
every day), pools per-sample MSEs per city, and pairs each pass with a
point-reflected pass to form the relative MSE (MSE / MSE*) that probes
spatial generalization.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from gunet import tensor as T
from gunet.data import (HORIZON_OFFSETS, MINUTES_PER_FRAME, CityDataset,
                        max_start_frame, mirror_city, sample_seed_frames)
from gunet.errors import NumericError, ShapeError
from gunet.features import Timestamp
from gunet.graph import RoadGraph
from gunet.model import (ModelConfig, ModelParams, ModelPlan, forward,
                         named_tensors, predict_frames, save_checkpoint,
                         static_edge_features)
from gunet.tensor import (AdamState, LrSchedule, Tensor, adam_step, backward,
                          lr_at)

__all__ = [
    "mse_metric", "naive_average_predict", "node_targets", "target_frames",
    "ModelPredictor", "NaivePredictor", "TrainResult", "train",
    "CityEval", "HourStat", "EvalReport", "evaluate", "write_eval_csv",
    "EVAL_HOURS",
]

EVAL_HOURS = tuple(range(23))  # every full hour 00:00 .. 22:00


# ---------------------------------------------------------------------------
# metric and baseline


def mse_metric(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean of (255*pred - target)^2 over every element.

    ``pred`` is on the normalized [0,1] scale, ``target`` on the raw
    uint8 scale; non-street pixels count like any other.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_metric: prediction shape {pred.shape} != "
                         f"target shape {target.shape}")
    return float(np.mean((255.0 * pred - target) ** 2))


def naive_average_predict(seed_frames: np.ndarray,
                          out_frames: int = 6) -> np.ndarray:
    """Every horizon gets the elementwise mean of the seed frames."""
    seed_frames = np.asarray(seed_frames, dtype=np.float64)
    mean = seed_frames.mean(axis=0)
    return np.broadcast_to(mean, (out_frames,) + mean.shape).copy()


def target_frames(movie: np.ndarray, start: int, in_frames: int = 12,
                  offsets=HORIZON_OFFSETS) -> np.ndarray:
    """The raw uint8 frames at each prediction horizon."""
    last_seed = start + in_frames - 1
    return movie[[last_seed + off for off in offsets]]


def node_targets(movie: np.ndarray, start: int, graph: RoadGraph,
                 in_frames: int = 12, offsets=HORIZON_OFFSETS) -> np.ndarray:
    """Normalized per-node targets [N, len(offsets)*8], frame-major."""
    frames = target_frames(movie, start, in_frames, offsets)
    rows = frames[:, graph.positions[:, 0], graph.positions[:, 1], :]
    n = graph.n_nodes
    return np.ascontiguousarray(
        rows.transpose(1, 0, 2).reshape(n, -1) / 255.0)


# ---------------------------------------------------------------------------
# predictors (shared by evaluation and the CLI)


class ModelPredictor:
    """Wraps trained parameters; builds one plan per street map."""

    def __init__(self, params: ModelParams, config: ModelConfig):
        self.params = params
        self.config = config

    def for_city(self, city: CityDataset) -> Callable:
        plan = ModelPlan(city.street_map, self.config)

        def predict(movie: np.ndarray, start: int, ts: Timestamp):
            return predict_frames(plan, self.params, movie, start, ts)

        return predict

    @property
    def in_frames(self) -> int:
        return self.config.in_frames


class NaivePredictor:
    """The seed-average baseline; by construction reflection-invariant."""

    in_frames = 12

    def for_city(self, city: CityDataset) -> Callable:
        def predict(movie: np.ndarray, start: int, ts: Timestamp):
            seeds = movie[start:start + self.in_frames] / 255.0
            return naive_average_predict(seeds)

        return predict


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    steps: int
    final_loss: float  # normalized-scale batch loss of the last step
    checkpoint_path: Path
    log_path: Path
    snapshot_paths: list = field(default_factory=list)


def _grad_norm_dump(named: dict, top: int = 5) -> str:
    norms = sorted(((float(np.linalg.norm(t.grad)) if t.grad is not None
                     else 0.0, name) for name, t in named.items()),
                   reverse=True)
    total = float(np.sqrt(sum(n * n for n, _ in norms)))
    lines = [f"total grad norm {total!r}"]
    lines += [f"  {name}: {n!r}" for n, name in norms[:top]]
    return "\n".join(lines)


def train(params: ModelParams, config: ModelConfig, datasets, *,
          steps: int, seed: int, out_path, log_path=None,
          schedule: Optional[LrSchedule] = None, batch_size: int = 16,
          checkpoint_every: int = 500, keep_snapshots: int = 3,
          progress: Optional[Callable] = None) -> TrainResult:
    """Run the optimization loop; returns paths of the artifacts.

    Writes ``out_path`` (final checkpoint), rolling ``<out>.stepNNNNNN``
    snapshots (last ``keep_snapshots`` kept), and a CSV loss log with
    columns ``step,lr,train_mse``.  Fixed ``seed`` makes the log and all
    checkpoints bit-identical across runs.
    """
    out_path = Path(out_path)
    log_path = Path(log_path) if log_path is not None else \
        Path(str(out_path) + ".log.csv")
    schedule = schedule or LrSchedule()
    rng = np.random.default_rng(seed)
    plans = [ModelPlan(c.street_map, config) for c in datasets]
    named = named_tensors(params)
    adam = AdamState.for_params(named)
    snapshots: list = []
    final_loss = float("nan")

    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", newline="") as log:
        log.write("step,lr,train_mse\n")
        for step in range(steps):
            for t in named.values():
                t.grad = None
            # static-map features do not depend on the sample; build the
            # subgraph once and share it across the whole batch
            static_edges = [static_edge_features(p, params) for p in plans]
            losses = []
            for _ in range(batch_size):
                ci = int(rng.integers(len(datasets)))
                city, plan = datasets[ci], plans[ci]
                day, start, ts = sample_seed_frames(city, rng,
                                                    config.in_frames)
                preds = forward(plan, params, city.movies[day], start, ts,
                                static_edge=static_edges[ci])
                tgt = node_targets(city.movies[day], start, plan.graph,
                                   config.in_frames)
                loss = T.squared_error(preds, Tensor(tgt))
                backward(loss)
                losses.append(float(loss.data))

            batch_loss = float(np.mean(losses))
            lr = lr_at(schedule, step)
            if not np.isfinite(batch_loss):
                raise NumericError(
                    f"non-finite loss {batch_loss!r} at step {step} "
                    f"(lr {lr!r})\n{_grad_norm_dump(named)}")
            for t in named.values():
                # the last block's global transform is the one tensor pair
                # the loss never reaches (its u' feeds nothing); Adam keeps
                # zero-gradient parameters exactly where they are
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                else:
                    t.grad = t.grad / batch_size

            final_loss = batch_loss
            log.write(f"{step},{lr!r},{255.0 ** 2 * batch_loss!r}\n")
            log.flush()
            adam_step(named, adam, lr)

            if checkpoint_every and (step + 1) % checkpoint_every == 0:
                snap = Path(f"{out_path}.step{step + 1:06d}")
                save_checkpoint(snap, params)
                snapshots.append(snap)
                while len(snapshots) > keep_snapshots:
                    os.remove(snapshots.pop(0))
            if progress is not None:
                progress(step, lr, batch_loss)

    save_checkpoint(out_path, params)
    return TrainResult(steps, final_loss, out_path, log_path, snapshots)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class CityEval:
    name: str
    n_samples: int
    mse: float
    mse_star: float
    rel_mse: float


@dataclass
class HourStat:
    hour: int
    n_samples: int
    mean: float
    median: float
    std: float


@dataclass
class EvalReport:
    cities: list
    hours: list
    overall_mse: float
    overall_mse_star: float
    overall_rel_mse: float
    mirrored: bool


def eval_grid(n_frames: int, in_frames: int = 12):
    """(hour, start_frame) pairs of the deterministic evaluation grid."""
    hi = max_start_frame(n_frames, in_frames)
    frames_per_hour = 60 // MINUTES_PER_FRAME
    return [(h, h * frames_per_hour) for h in EVAL_HOURS
            if h * frames_per_hour <= hi]


def _eval_pass(predictor, datasets):
    """Per-sample MSEs: {city name: [(hour, mse), ...]} in grid order."""
    per_city = {}
    for city in datasets:
        predict = predictor.for_city(city)
        samples = []
        for day in range(city.n_days):
            movie = city.movies[day]
            for hour, start in eval_grid(len(movie), predictor.in_frames):
                minute = (start + predictor.in_frames) * MINUTES_PER_FRAME
                ts = Timestamp(minute % 1440, city.weekdays[day])
                pred = predict(movie, start, ts)
                truth = target_frames(movie, start, predictor.in_frames)
                samples.append((hour, mse_metric(pred, truth)))
        per_city[city.name] = samples
    return per_city


def evaluate(predictor, datasets, mirrored: bool = False) -> EvalReport:
    """Evaluate on the hourly grid; side-effect-free and deterministic.

    The primary pass runs on the datasets as given (point-reflected first
    when ``mirrored``); the starred pass runs on their reflections, so
    ``rel_mse`` is always primary/starred.  Cities merge in name order.
    """
    datasets = sorted(datasets, key=lambda c: c.name)
    primary = [mirror_city(c) if mirrored else c for c in datasets]
    starred = [mirror_city(c) for c in primary]
    main = _eval_pass(predictor, primary)
    star = _eval_pass(predictor, starred)

    cities = []
    all_main, all_star, hour_bins = [], [], {h: [] for h in EVAL_HOURS}
    for city in datasets:
        mses = [m for _, m in main[city.name]]
        star_mses = [m for _, m in star[city.name]]
        cities.append(CityEval(city.name, len(mses), float(np.mean(mses)),
                               float(np.mean(star_mses)),
                               float(np.mean(mses) / np.mean(star_mses))))
        all_main.extend(mses)
        all_star.extend(star_mses)
        for hour, m in main[city.name]:
            hour_bins[hour].append(m)

    hours = [HourStat(h, len(v), float(np.mean(v)), float(np.median(v)),
                      float(np.std(v)))
             for h, v in hour_bins.items() if v]
    overall = float(np.mean(all_main))
    overall_star = float(np.mean(all_star))
    return EvalReport(cities, hours, overall, overall_star,
                      overall / overall_star, mirrored)


def write_eval_csv(report: EvalReport, path) -> None:
    """One CSV with city rows, an overall row, and per-hour rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["section", "name", "n_samples", "mse", "mse_star",
                    "rel_mse", "median_mse", "std_mse"])
        for c in report.cities:
            w.writerow(["city", c.name, c.n_samples, repr(c.mse),
                        repr(c.mse_star), repr(c.rel_mse), "", ""])
        w.writerow(["overall", "all",
                    sum(c.n_samples for c in report.cities),
                    repr(report.overall_mse), repr(report.overall_mse_star),
                    repr(report.overall_rel_mse), "", ""])
        for h in report.hours:
            w.writerow(["hour", f"{h.hour:02d}", h.n_samples, repr(h.mean),
                        "", "", repr(h.median), repr(h.std)])
