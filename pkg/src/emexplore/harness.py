"""Batch evaluation: paired-seed trials across planners plus aggregation.

The protocol pairs seeds across planners: every planner sees the same worlds
and the same per-robot noise streams, so differences in the summary metrics
come from target selection alone.  Per-trial tables land on disk as CSV and
aggregation is a pure function of those files, so results can be re-derived
(or extended with more seeds) without re-running anything.
"""

from __future__ import annotations

import csv
import glob
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .config import TrialConfig
from .simulation import run_trial

PLANNER_ORDER = ("em2", "em3", "ce", "bsp")


def read_csv(path: str) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def localization_rmse(pose_rows: list[dict[str, str]]) -> float:
    """Position RMSE over all keyframe poses in a poses table."""
    if not pose_rows:
        return 0.0
    err2 = 0.0
    for r in pose_rows:
        dx = float(r["est_x_m"]) - float(r["true_x_m"])
        dy = float(r["est_y_m"]) - float(r["true_y_m"])
        err2 += dx * dx + dy * dy
    return math.sqrt(err2 / len(pose_rows))


def landmark_rmse(landmark_rows: list[dict[str, str]]) -> float:
    """Position RMSE over observed landmarks in a landmarks table."""
    err2, n = 0.0, 0
    for r in landmark_rows:
        if r["observed"] != "1":
            continue
        dx = float(r["est_x_m"]) - float(r["true_x_m"])
        dy = float(r["est_y_m"]) - float(r["true_y_m"])
        err2 += dx * dx + dy * dy
        n += 1
    return math.sqrt(err2 / n) if n else 0.0


def bin_by_distance(
    distance: np.ndarray, values: np.ndarray, bin_m: float = 10.0
) -> tuple[np.ndarray, np.ndarray]:
    """Resample a per-step series onto travel-distance bin edges.

    ``distance`` must be non-decreasing.  For each edge d the reported value
    is the last sample with distance <= d, so curves from trials of
    different lengths line up for averaging.  Returns (edges, binned).
    """
    distance = np.asarray(distance, dtype=float)
    values = np.asarray(values, dtype=float)
    if distance.shape != values.shape or distance.ndim != 1 or distance.size == 0:
        raise ValueError("distance and values must be matching non-empty 1-d arrays")
    if np.any(np.diff(distance) < 0):
        raise ValueError("distance series must be non-decreasing")
    n_bins = int(math.floor(distance[-1] / bin_m + 1e-9)) + 1
    edges = np.arange(n_bins, dtype=float) * bin_m
    idx = np.searchsorted(distance, edges, side="right") - 1
    idx = np.clip(idx, 0, distance.size - 1)
    return edges, values[idx]


def steps_series(steps_rows: list[dict[str, str]], column: str) -> tuple[np.ndarray, np.ndarray]:
    """(total distance, column) arrays from a steps table."""
    d = np.array([float(r["total_distance_m"]) for r in steps_rows])
    v = np.array([float(r[column]) for r in steps_rows])
    return d, v


@dataclass
class BatchSummary:
    out_dir: str
    trials: list[dict[str, str]]
    failures: list[tuple[str, int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def by_planner(self) -> dict[str, list[dict[str, str]]]:
        out: dict[str, list[dict[str, str]]] = {}
        for row in self.trials:
            out.setdefault(row["planner"], []).append(row)
        return out


def trial_prefix(seed: int) -> str:
    return f"seed{seed:05d}"


def run_batch(
    base: TrialConfig,
    seeds: list[int],
    planners: list[str] | None = None,
    out_dir: str = "runs",
    progress: bool = False,
) -> BatchSummary:
    """Run every (seed, planner) pair, writing per-trial tables under
    ``out_dir/<planner>/``.  A trial that raises is recorded as a failure
    and excluded from aggregation; the rest of the batch still runs."""
    names = list(planners) if planners is not None else list(PLANNER_ORDER)
    failures: list[tuple[str, int, str]] = []
    for seed in sorted(seeds):
        for name in names:
            cfg = replace(base, seed=seed, planner=replace(base.planner, name=name))
            try:
                record = run_trial(cfg)
            except Exception as exc:  # noqa: BLE001 - fault isolation per trial
                failures.append((name, seed, f"{type(exc).__name__}: {exc}"))
                if progress:
                    print(f"[{name} seed={seed}] FAILED {type(exc).__name__}: {exc}")
                continue
            record.write(os.path.join(out_dir, name), trial_prefix(seed))
            if progress:
                s = record.summary
                print(
                    f"[{name} seed={seed}] {s['termination']} steps={s['steps']} "
                    f"explored={s['explored_ratio']:.3f} dist={s['total_distance_m']:.1f}m"
                )
    summary = collect_batch(out_dir)
    summary.failures = failures
    write_batch_tables(summary)
    return summary


def collect_batch(out_dir: str) -> BatchSummary:
    """Aggregate a batch directory from its files alone."""
    rows: list[dict[str, str]] = []
    for path in sorted(glob.glob(os.path.join(out_dir, "*", "*_summary.csv"))):
        for row in read_csv(path):
            rows.append(row)
    rows.sort(key=lambda r: (int(r["seed"]), r["planner"]))
    return BatchSummary(out_dir=out_dir, trials=rows)


_AGG_COLUMNS = (
    "explored_ratio",
    "total_distance_m",
    "distance_at_explored_target_m",
    "loc_rmse_m",
    "lm_rmse_m",
    "steps",
)


def aggregate_rows(summary: BatchSummary) -> list[dict[str, object]]:
    """Per-planner mean and standard deviation of the summary metrics."""
    out: list[dict[str, object]] = []
    for name, rows in sorted(summary.by_planner().items()):
        agg: dict[str, object] = {"planner": name, "n_trials": len(rows)}
        for col in _AGG_COLUMNS:
            vals = np.array([float(r[col]) for r in rows])
            agg[f"{col}_mean"] = float(np.mean(vals))
            agg[f"{col}_std"] = float(np.std(vals))
        out.append(agg)
    return out


def write_batch_tables(summary: BatchSummary) -> None:
    """batch_trials.csv (one row per trial), batch_aggregate.csv (per
    planner), batch_failures.csv (may be empty)."""
    os.makedirs(summary.out_dir, exist_ok=True)
    if summary.trials:
        cols = list(summary.trials[0])
        with open(os.path.join(summary.out_dir, "batch_trials.csv"), "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in summary.trials:
                fh.write(",".join(row[c] for c in cols) + "\n")
    agg = aggregate_rows(summary)
    if agg:
        cols = list(agg[0])
        with open(os.path.join(summary.out_dir, "batch_aggregate.csv"), "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in agg:
                cells = [row[c] for c in cols]
                fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in cells) + "\n")
    with open(os.path.join(summary.out_dir, "batch_failures.csv"), "w") as fh:
        fh.write("planner,seed,error\n")
        for name, seed, err in summary.failures:
            fh.write(f"{name},{seed},{err.replace(',', ';')}\n")


def mean_curve(
    out_dir: str, planner: str, column: str, bin_m: float = 10.0
) -> tuple[np.ndarray, np.ndarray]:
    """Across a planner's trials: distance-binned mean of a steps column.

    Curves are truncated to the shortest trial's travel distance so every
    bin averages the same number of trials.
    """
    paths = sorted(glob.glob(os.path.join(out_dir, planner, "*_steps.csv")))
    if not paths:
        raise FileNotFoundError(f"no steps tables under {out_dir}/{planner}")
    binned = []
    for path in paths:
        rows = read_csv(path)
        d, v = steps_series(rows, column)
        binned.append(bin_by_distance(d, v, bin_m)[1])
    n = min(b.size for b in binned)
    edges = np.arange(n, dtype=float) * bin_m
    stack = np.stack([b[:n] for b in binned])
    return edges, np.mean(stack, axis=0)
