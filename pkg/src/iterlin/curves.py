"""Plot-ready CSV curves from metric streams, and the plateau analysis run on them."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CURVE_COLUMNS = ("step", "epoch", "train_loss", "train_acc", "test_acc", "refresh_events", "kernel_drift")
MERGED_COLUMNS = ("run",) + CURVE_COLUMNS
METRICS_FILE = "metrics.jsonl"
CURVE_FILE = "curves.csv"


def read_metrics(path: str | Path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / METRICS_FILE
    if not path.exists():
        raise FileNotFoundError(f"no metrics stream at {path}")
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed metric record ({exc.msg})") from None
    return records


def _cell(value):
    return "" if value is None else value


def curve_rows(records: list[dict]) -> list[dict]:
    rows = []
    for r in records:
        drift = r.get("kernel_drift")
        rows.append(
            {
                "step": r["step"],
                "epoch": r["epoch"],
                "train_loss": _cell(r.get("train_loss")),
                "train_acc": _cell(r.get("train_acc")),
                "test_acc": _cell(r.get("test_acc")),
                "refresh_events": 1 if r.get("refresh") else 0,
                "kernel_drift": "" if drift is None else drift["distance"],
            }
        )
    return rows


def emit_curves(run_dirs, merged: str | Path | None = None) -> list[Path]:
    """Write ``curves.csv`` into every run directory and, optionally, one long-format merge.

    ``refresh_events`` is 1 on steps where the anchor was replaced; ``kernel_drift``
    holds the relative Frobenius distance to the previous anchor's kernel on those
    steps and is empty elsewhere.  The merged file prepends a ``run`` column.
    """
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ValueError("no run directories given")
    tables = [(d, curve_rows(read_metrics(d))) for d in run_dirs]
    written = []
    for d, rows in tables:
        written.append(_write_csv(d / CURVE_FILE, CURVE_COLUMNS, rows))
    if merged is not None:
        long_rows = [dict(run=d.name, **row) for d, rows in tables for row in rows]
        written.append(_write_csv(Path(merged), MERGED_COLUMNS, long_rows))
    return written


def _write_csv(path: Path, columns, rows) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_curve(path: str | Path) -> dict[str, np.ndarray]:
    """Columns of a per-run curve CSV as float arrays (empty cells become NaN)."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty curve")
    return {col: np.array([float(r[col]) if r[col] != "" else math.nan for r in rows]) for col in CURVE_COLUMNS}


@dataclass(frozen=True)
class PlateauReport:
    window: int
    slope_ratios: list[float]
    median_step_change: float
    refresh_steps: list[int]
    refresh_drops: list[float]

    @property
    def drop_rates(self) -> list[float]:
        return [d / self.window for d in self.refresh_drops]

    def phases_levelling(self, max_ratio: float = 0.5) -> int:
        return sum(r < max_ratio for r in self.slope_ratios)

    def visible_drops(self) -> int:
        return sum(rate > self.median_step_change for rate in self.drop_rates)

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "slope_ratios": self.slope_ratios,
            "median_step_change": self.median_step_change,
            "refresh_steps": self.refresh_steps,
            "refresh_drops": self.refresh_drops,
        }


def plateau_signature(curve: dict[str, np.ndarray], window: int | None = None) -> PlateauReport:
    """Within-phase levelling-off and across-refresh drops of the training loss.

    Mini-batch losses are averaged over ``window`` consecutive steps, by default
    one epoch (the number of steps logged with epoch 0).  With a fixed batch
    order every such window sees each batch exactly once, so batch-to-batch
    differences cancel.  Only windows lying inside a single phase are used.

    * slope ratio of a phase: |late slope| / |early slope|, least-squares slopes
      of the smoothed loss over the first and second halves of the phase;
    * median step change: median |S[t+1] - S[t]| of the smoothed loss within phases;
    * drop at refresh r: mean loss over the ``window`` steps before r minus the
      mean over the ``window`` steps from r on.  Its per-step rate, drop / window,
      is what gets compared with the median step change.
    The curve must be logged at every step.
    """
    steps = curve["step"].astype(int)
    if np.any(np.diff(steps) != 1):
        raise ValueError("plateau analysis needs a metric record for every step")
    loss = curve["train_loss"]
    if window is None:
        window = int(np.sum(curve["epoch"] == curve["epoch"][0]))
    if window < 1:
        raise ValueError("window must be >= 1")
    starts = list(np.flatnonzero(curve["refresh_events"] == 1))
    if not starts or starts[0] != 0:
        raise ValueError("the first logged step must be a refresh")
    bounds = starts + [len(loss)]
    cumsum = np.concatenate([[0.0], np.cumsum(loss)])

    ratios, changes = [], []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        smooth = (cumsum[lo + window : hi + 1] - cumsum[lo : hi - window + 1]) / window
        if len(smooth) < 8:
            continue
        half = len(smooth) // 2
        early = np.polyfit(np.arange(half), smooth[:half], 1)[0]
        late = np.polyfit(np.arange(len(smooth) - half), smooth[half:], 1)[0]
        ratios.append(float(abs(late) / abs(early)) if early != 0 else math.inf)
        changes.append(np.abs(np.diff(smooth)))
    if not ratios:
        raise ValueError("no phase is long enough for the chosen window")

    refresh_steps, drops = [], []
    for r in starts[1:]:
        if r - window < 0 or r + window > len(loss):
            continue
        before = (cumsum[r] - cumsum[r - window]) / window
        after = (cumsum[r + window] - cumsum[r]) / window
        refresh_steps.append(int(steps[r]))
        drops.append(float(before - after))
    median = float(np.median(np.concatenate(changes)))
    return PlateauReport(window, ratios, median, refresh_steps, drops)
