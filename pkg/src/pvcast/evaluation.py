"""Forecast accuracy metrics in physical units and the per-season report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .data import NormStats, Windows, invert_norm
from .models import DISPLAY_NAMES, Forecaster

METRICS = ("mae", "rmse", "r2", "mbe")
REPORT_HEADER = ("season", "model") + METRICS


@dataclass(frozen=True)
class EvalPair:
    y: np.ndarray
    y_hat: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        y_hat = np.asarray(self.y_hat, dtype=np.float64).reshape(-1)
        if y.shape != y_hat.shape:
            raise ValueError(f"observed and forecast lengths differ: {y.size} vs {y_hat.size}")
        if y.size < 2:
            raise ValueError("at least 2 paired values are needed")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(y_hat))):
            raise ValueError("observed and forecast values must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "y_hat", y_hat)

    @property
    def n(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    r2: float  # NaN when observations are constant
    mbe: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.mae, self.rmse, self.r2, self.mbe)


def compute_metrics(pair: EvalPair) -> Metrics:
    """MAE, RMSE, R^2 and MBE, with bias signed as forecast minus observed."""
    err = pair.y_hat - pair.y
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err * err)))
    mbe = float(np.mean(err))
    dev = pair.y - pair.y.mean()
    ss_tot = float(np.sum(dev * dev))
    r2 = 1.0 - float(np.sum(err * err)) / ss_tot if ss_tot > 0 else math.nan
    return Metrics(mae, rmse, r2, mbe)


def evaluate_model(model: Forecaster, windows: Windows, stats: NormStats, target: int = 0) -> EvalPair:
    """Denormalized forecasts paired with the raw observed target."""
    if len(windows) == 0:
        raise ValueError("test set is empty")
    pred = model.predict(windows.X)[:, 0]
    y = windows.y_raw if windows.y_raw is not None else invert_norm(windows.y, stats, target)
    return EvalPair(y, invert_norm(pred, stats, target))


@dataclass(frozen=True)
class ReportRow:
    season: str
    model: str
    metrics: Metrics


def _season_key(season: str) -> int:
    from .data import SEASONS

    return SEASONS.index(season) if season in SEASONS else len(SEASONS)


def _model_key(model: str) -> int:
    order = list(DISPLAY_NAMES.values())
    return order.index(model) if model in order else len(order)


def sort_rows(rows) -> list[ReportRow]:
    """Season-major order, seasons and models in their canonical order."""
    return sorted(rows, key=lambda r: (_season_key(r.season), _model_key(r.model)))


def _fmt(v: float) -> str:
    return "n/a" if math.isnan(v) else f"{v:.4f}"


def render_table(rows) -> str:
    rows = sort_rows(rows)
    header = ["Season", "Model", "MAE", "RMSE", "R2", "MBE"]
    body = [[r.season, r.model] + [_fmt(v) for v in r.metrics.as_tuple()] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    line = lambda cells: "  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    rule = "-" * len(line(header))
    return "\n".join([line(header), rule] + [line(b) for b in body]) + "\n"


def render_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in sort_rows(rows):
        w.writerow([r.season, r.model] + [repr(float(v)) for v in r.metrics.as_tuple()])
    return buf.getvalue()


def render_report(rows) -> tuple[str, str]:
    """Text table (4 decimals) and CSV (full precision) for the same rows."""
    rows = list(rows)
    if not rows:
        raise ValueError("report needs at least one row")
    return render_table(rows), render_csv(rows)


def parse_report_csv(text: str) -> list[ReportRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != REPORT_HEADER:
        raise ValueError(f"report header must be {','.join(REPORT_HEADER)}")
    return [ReportRow(r["season"], r["model"], Metrics(*(float(r[m]) for m in METRICS))) for r in reader]
