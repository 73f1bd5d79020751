"""Hourly PV/weather series: ingestion, cleaning, seasonal splitting,
standardization and sliding-window supervision.

Pipeline order is fixed::

    clean -> season_split -> chrono_split -> fit_norm(train)
          -> apply_norm(train, val, test) -> make_windows

Series carry a per-record ``segment`` id. Records sharing an id are
contiguous in time; windows never cross a segment boundary.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

CHANNELS = ("AP", "T", "RH", "GHI", "DHI")
HEADER = ("timestamp",) + CHANNELS
SEASONS = ("Spring", "Summer", "Autumn", "Winter")
SEASON_OF_MONTH = {
    9: "Spring", 10: "Spring", 11: "Spring",
    12: "Summer", 1: "Summer", 2: "Summer",
    3: "Autumn", 4: "Autumn", 5: "Autumn",
    6: "Winter", 7: "Winter", 8: "Winter",
}
HOUR = np.timedelta64(1, "h")


class DataError(ValueError):
    """Input data violates the expected layout or is insufficient."""


@dataclass
class Series:
    """Time-ordered hourly records; ``values`` is ``[n, 5]`` with NaN for missing."""

    timestamps: np.ndarray  # datetime64[h]
    values: np.ndarray
    segments: np.ndarray | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[h]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(CHANNELS):
            raise DataError(f"values must be [n, {len(CHANNELS)}], got {self.values.shape}")
        if len(self.timestamps) != len(self.values):
            raise DataError("timestamps and values differ in length")
        if len(self.timestamps) > 1 and not np.all(np.diff(self.timestamps) > np.timedelta64(0, "h")):
            raise DataError("timestamps must be strictly increasing")
        if self.segments is None:
            self.segments = _contiguous_segments(self.timestamps)
        else:
            self.segments = np.asarray(self.segments, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.timestamps)

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, CHANNELS.index(name)]

    def slice(self, start: int, stop: int) -> "Series":
        return Series(self.timestamps[start:stop], self.values[start:stop], self.segments[start:stop])

    def segment_lengths(self) -> list[int]:
        if len(self) == 0:
            return []
        cuts = np.flatnonzero(np.diff(self.segments) != 0) + 1
        bounds = np.concatenate([[0], cuts, [len(self)]])
        return [int(b - a) for a, b in zip(bounds[:-1], bounds[1:])]


def _contiguous_segments(ts: np.ndarray) -> np.ndarray:
    if len(ts) == 0:
        return np.zeros(0, dtype=np.int64)
    breaks = np.concatenate([[0], (np.diff(ts) != HOUR).astype(np.int64)])
    return np.cumsum(breaks)


# -- ingestion --------------------------------------------------------------------
def _parse_timestamp(text: str) -> np.datetime64:
    dt = datetime.fromisoformat(text.strip())
    if dt.minute or dt.second or dt.microsecond:
        raise ValueError(f"timestamp {text!r} is not on the hour")
    return np.datetime64(dt.replace(tzinfo=None), "h")


def ingest_csv(path, fill_gaps: bool = False) -> Series:
    """Read ``timestamp,AP,T,RH,GHI,DHI`` rows; empty fields become missing.

    Rows are sorted by time. Duplicate timestamps are rejected. A cadence
    other than hourly is an error unless ``fill_gaps`` inserts missing rows.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in HEADER if c not in header]
        if missing or len(header) != len(HEADER):
            raise DataError(f"{path}: header must name {','.join(HEADER)}, got {','.join(header)}")
        cols = [header.index(c) for c in HEADER]
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(HEADER)} fields, got {len(row)}")
            try:
                stamps.append(_parse_timestamp(row[cols[0]]))
                rows.append([float(row[i]) if row[i].strip() else math.nan for i in cols[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: cannot parse row ({exc})") from None
    if not stamps:
        raise DataError(f"{path}: no data rows")
    ts = np.array(stamps, dtype="datetime64[h]")
    vals = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(vals) | np.isnan(vals)):
        raise DataError(f"{path}: infinite values present")
    order = np.argsort(ts, kind="stable")
    ts, vals = ts[order], vals[order]
    dup = np.flatnonzero(np.diff(ts) == np.timedelta64(0, "h"))
    if dup.size:
        raise DataError(f"{path}: duplicate timestamp {ts[dup[0]]}")
    gaps = np.flatnonzero(np.diff(ts) != HOUR)
    if gaps.size:
        if not fill_gaps:
            i = gaps[0]
            raise DataError(f"{path}: non-hourly cadence between {ts[i]} and {ts[i + 1]}")
        full = np.arange(ts[0], ts[-1] + HOUR, HOUR)
        filled = np.full((len(full), len(CHANNELS)), math.nan)
        filled[((ts - ts[0]) // HOUR).astype(np.int64)] = vals
        ts, vals = full, filled
    return Series(ts, vals)


def write_csv(series: Series, path) -> None:
    """Write a series in the ingestion layout (``repr`` floats, empty for missing)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for t, row in zip(series.timestamps, series.values):
            stamp = str(t.astype("datetime64[s]").item().isoformat(timespec="seconds"))
            w.writerow([stamp] + ["" if math.isnan(v) else repr(float(v)) for v in row])


# -- cleaning ---------------------------------------------------------------------
def clean(series: Series) -> Series:
    """Linear interpolation across gaps, nearest-value extension at the ends,
    then negative active power clipped to zero."""
    vals = series.values.copy()
    hours = (series.timestamps - series.timestamps[0]) / HOUR
    for j, name in enumerate(CHANNELS):
        col = vals[:, j]
        present = ~np.isnan(col)
        if present.sum() == 0:
            raise DataError(f"channel {name} has no values")
        if present.sum() < 2:
            raise DataError(f"channel {name} needs at least 2 present values to interpolate")
        # np.interp holds the end values constant outside the known range
        vals[:, j] = np.interp(hours, hours[present], col[present])
    ap = CHANNELS.index("AP")
    vals[:, ap] = np.maximum(vals[:, ap], 0.0)
    return Series(series.timestamps.copy(), vals)


# -- seasons and splits ------------------------------------------------------------
def season_of(ts) -> str:
    month = np.datetime64(ts, "M").astype(int) % 12 + 1
    return SEASON_OF_MONTH[int(month)]


def season_split(series: Series) -> dict[str, Series]:
    """Per-season series; each maximal run of consecutive same-season hours is
    one segment (so December joins the following January and February)."""
    months = series.timestamps.astype("datetime64[M]").astype(np.int64) % 12 + 1
    tags = np.array([SEASONS.index(SEASON_OF_MONTH[m]) for m in range(1, 13)])[months - 1]
    step = np.concatenate([[True], (np.diff(series.timestamps) != HOUR) | (np.diff(tags) != 0)])
    run_id = np.cumsum(step) - 1
    out = {}
    for k, name in enumerate(SEASONS):
        idx = np.flatnonzero(tags == k)
        if idx.size == 0:
            raise DataError(f"season {name} has no records")
        _, seg = np.unique(run_id[idx], return_inverse=True)
        out[name] = Series(series.timestamps[idx], series.values[idx], seg)
    return out


def chrono_split(series: Series, ratios=(8, 1, 1)) -> tuple[Series, Series, Series]:
    """Contiguous cuts at ``floor(0.8 n)`` and ``floor(0.9 n)`` (for 8:1:1)."""
    n = len(series)
    if n < 10:
        raise DataError(f"series of length {n} is too short to split")
    total = sum(ratios)
    a = n * ratios[0] // total
    b = n * (ratios[0] + ratios[1]) // total
    return series.slice(0, a), series.slice(a, b), series.slice(b, n)


# -- normalization -----------------------------------------------------------------
SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class NormStats:
    mu: tuple[float, ...]
    sigma: tuple[float, ...]

    @property
    def scale(self) -> np.ndarray:
        return np.maximum(np.asarray(self.sigma), SIGMA_FLOOR)

    def to_dict(self) -> dict:
        return {"mu": list(self.mu), "sigma": list(self.sigma)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(float(v) for v in d["mu"]), tuple(float(v) for v in d["sigma"]))


def fit_norm(train: Series) -> NormStats:
    """Per-channel mean and population standard deviation of the training rows."""
    if len(train) == 0:
        raise DataError("cannot fit normalization on an empty series")
    mu = train.values.mean(axis=0)
    sigma = train.values.std(axis=0)
    for name, s in zip(CHANNELS, sigma):
        if s < SIGMA_FLOOR:
            warnings.warn(f"channel {name} is constant on the training split; sigma clamped to {SIGMA_FLOOR}")
    return NormStats(tuple(float(v) for v in mu), tuple(float(v) for v in sigma))


def apply_norm(series: Series, stats: NormStats) -> Series:
    vals = (series.values - np.asarray(stats.mu)) / stats.scale
    return Series(series.timestamps, vals, series.segments)


def invert_norm(values, stats: NormStats, channel: int = 0) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.scale[channel] + stats.mu[channel]


# -- windowing ---------------------------------------------------------------------
@dataclass(frozen=True)
class WindowSpec:
    lookback: int = 24
    horizon: int = 1
    stride: int = 1
    target: int = 0

    def __post_init__(self):
        if self.lookback < 1 or self.horizon < 1 or self.stride < 1:
            raise ValueError("lookback, horizon and stride must be at least 1")

    def count(self, n: int) -> int:
        """Windows produced by one contiguous segment of length ``n``."""
        span = self.lookback + self.horizon
        return 0 if n < span else (n - span) // self.stride + 1


@dataclass
class Windows:
    """Supervised pairs: ``X`` ``[N, 5, lookback]``, ``y`` ``[N]``."""

    X: np.ndarray
    y: np.ndarray
    target_time: np.ndarray
    y_raw: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.y)


def make_windows(series: Series, spec: WindowSpec = WindowSpec(), raw: Series | None = None) -> Windows:
    """Slide over each segment: ``X`` covers ``[t - lookback, t)``, ``y`` is the
    target channel at ``t + horizon - 1``. ``raw`` supplies unnormalized targets."""
    X, y, tt, yr = [], [], [], []
    start = 0
    L, H = spec.lookback, spec.horizon
    for n in series.segment_lengths():
        if spec.count(n) == 0:
            warnings.warn(f"segment of length {n} is shorter than lookback+horizon={L + H}; no windows")
        for k in range(spec.count(n)):
            t = start + L + k * spec.stride
            X.append(series.values[t - L : t].T)
            y.append(series.values[t + H - 1, spec.target])
            tt.append(series.timestamps[t + H - 1])
            if raw is not None:
                yr.append(raw.values[t + H - 1, spec.target])
        start += n
    width = len(CHANNELS)
    return Windows(
        X=np.array(X, dtype=np.float64).reshape(-1, width, L),
        y=np.array(y, dtype=np.float64),
        target_time=np.array(tt, dtype="datetime64[h]"),
        y_raw=np.array(yr, dtype=np.float64) if raw is not None else None,
    )


def save_windows(windows: Windows, path) -> None:
    """CSV cache: ``target_time,y,y_raw`` then the window values channel-major
    (``AP_0..AP_{L-1}, T_0, ...``), ``repr`` floats so the file is bit-stable."""
    L = windows.X.shape[-1]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target_time", "y", "y_raw"] + [f"{c}_{i}" for c in CHANNELS for i in range(L)])
        for k in range(len(windows)):
            raw = "" if windows.y_raw is None else repr(float(windows.y_raw[k]))
            w.writerow([str(windows.target_time[k]), repr(float(windows.y[k])), raw]
                       + [repr(float(v)) for v in windows.X[k].reshape(-1)])


def load_windows(path) -> Windows:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        L = (len(header) - 3) // len(CHANNELS)
        rows = list(reader)
    X = np.array([[float(v) for v in r[3:]] for r in rows]).reshape(-1, len(CHANNELS), L)
    y_raw = None if not rows or rows[0][2] == "" else np.array([float(r[2]) for r in rows])
    return Windows(X, np.array([float(r[1]) for r in rows]), np.array([r[0] for r in rows], dtype="datetime64[h]"), y_raw)


# -- full pipeline -----------------------------------------------------------------
@dataclass
class SeasonalDataset:
    season: str
    series: Series
    train: Series
    val: Series
    test: Series
    stats: NormStats
    windows: dict[str, Windows] = field(default_factory=dict)

    @property
    def train_windows(self) -> Windows:
        return self.windows["train"]

    @property
    def val_windows(self) -> Windows:
        return self.windows["val"]

    @property
    def test_windows(self) -> Windows:
        return self.windows["test"]


def prepare_season(season: str, series: Series, spec: WindowSpec = WindowSpec()) -> SeasonalDataset:
    train, val, test = chrono_split(series)
    stats = fit_norm(train)
    windows = {
        name: make_windows(apply_norm(part, stats), spec, raw=part)
        for name, part in (("train", train), ("val", val), ("test", test))
    }
    return SeasonalDataset(season, series, train, val, test, stats, windows)


def build_datasets(raw: Series, spec: WindowSpec = WindowSpec(), seasons=SEASONS) -> dict[str, SeasonalDataset]:
    """Run the whole pipeline on an uncleaned series."""
    by_season = season_split(clean(raw))
    return {s: prepare_season(s, by_season[s], spec) for s in seasons}


def resolve_season(name: str) -> str:
    for s in SEASONS:
        if s.lower() == name.lower():
            return s
    raise DataError(f"unknown season {name!r}; choose from {', '.join(s.lower() for s in SEASONS)}")


# -- synthetic data ----------------------------------------------------------------
def generate_synthetic(years: int, seed: int = 0, start_year: int = 2017, capacity: float = 6.96) -> Series:
    """Hourly PV-like series with a southern-hemisphere seasonal cycle.

    Irradiance follows ``max(0, sin(pi (hour - 6) / 12))`` scaled by a seasonal
    amplitude that peaks near the December solstice and by a slowly varying
    cloud factor in (0.25, 1]. About 1% of values are dropped as missing.
    """
    if years < 1:
        raise ValueError("years must be at least 1")
    rng = np.random.default_rng(seed)
    start = np.datetime64(f"{start_year:04d}-01-01T00", "h")
    stop = np.datetime64(f"{start_year + years:04d}-01-01T00", "h")
    ts = np.arange(start, stop, HOUR)
    n = len(ts)
    hour = (ts - ts.astype("datetime64[D]")).astype(np.int64)
    doy = (ts.astype("datetime64[D]") - ts.astype("datetime64[Y]")).astype(np.int64)
    season_cos = np.cos(2 * np.pi * (doy - 355) / 365.25)  # +1 at the December solstice

    shape = np.maximum(0.0, np.sin(np.pi * (hour - 6) / 12.0))
    amplitude = capacity * 0.85 * (0.75 + 0.25 * season_cos)

    # cloudiness: AR(1) latent with ~1.5 day memory squashed into (0.25, 1]
    eps = rng.normal(0.0, 1.0, n)
    phi = 0.97
    z = np.empty(n)
    z[0] = eps[0]
    for t in range(1, n):
        z[t] = phi * z[t - 1] + math.sqrt(1 - phi * phi) * eps[t]
    cloud = 1.0 - 0.75 / (1.0 + np.exp(-(1.6 * z - 1.2)))

    ap = amplitude * shape * cloud
    ap = np.where(shape > 0, ap * (1.0 + rng.normal(0.0, 0.02, n)), 0.0)
    ap = np.maximum(ap, 0.0)

    clear_ghi = 1050.0 * (0.7 + 0.3 * season_cos) * shape
    ghi = np.maximum(0.0, clear_ghi * cloud + rng.normal(0.0, 10.0, n) * (shape > 0))
    diffuse_frac = 0.15 + 0.6 * (1.0 - cloud)
    dhi = np.maximum(0.0, ghi * diffuse_frac + rng.normal(0.0, 5.0, n) * (shape > 0))

    daily = np.sin(2 * np.pi * (hour - 9) / 24.0)
    temp = 21.0 + 8.0 * season_cos + 7.0 * daily * (0.6 + 0.4 * cloud) + rng.normal(0.0, 0.8, n)
    rh = np.clip(55.0 - 1.6 * (temp - 21.0) + 20.0 * (1.0 - cloud) + rng.normal(0.0, 3.0, n), 3.0, 100.0)

    vals = np.column_stack([ap, temp, rh, ghi, dhi])
    drop = rng.random(vals.shape) < 0.01
    vals[drop] = math.nan
    return Series(ts, vals)
