"""Multi-trial multichannel time series, validation and history windows."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    EmptyInput,
    NonFiniteValue,
    RaggedTrials,
    SegmentTooShort,
    ValidationError,
)

__all__ = [
    "TimeSeriesSet",
    "HistorySpec",
    "StationarityReport",
    "validate",
    "demean",
    "detrend",
    "stationarity_screen",
    "lagged_design",
    "read_csv",
    "write_csv",
]


@dataclass(frozen=True)
class HistorySpec:
    """Which past samples form the history of a channel.

    The history at (0-based) time ``t`` is ``t - delay - 1 - j * lag_step``
    for ``j = 0 .. order - 1``. With ``delay=0, lag_step=1`` this is the
    plain ``t-1, ..., t-order`` window.
    """

    order: int = 1
    delay: int = 0
    lag_step: int = 1

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 1:
            raise ValidationError(f"order must be an integer >= 1, got {self.order!r}")
        if int(self.delay) != self.delay or self.delay < 0:
            raise ValidationError(f"delay must be an integer >= 0, got {self.delay!r}")
        if int(self.lag_step) != self.lag_step or self.lag_step < 1:
            raise ValidationError(f"lag_step must be an integer >= 1, got {self.lag_step!r}")
        object.__setattr__(self, "order", int(self.order))
        object.__setattr__(self, "delay", int(self.delay))
        object.__setattr__(self, "lag_step", int(self.lag_step))

    @property
    def lags(self) -> np.ndarray:
        return self.delay + 1 + self.lag_step * np.arange(self.order)

    @property
    def max_lag(self) -> int:
        return self.delay + 1 + (self.order - 1) * self.lag_step

    def with_order(self, order: int) -> "HistorySpec":
        return HistorySpec(order, self.delay, self.lag_step)

    def to_dict(self) -> dict:
        return {"order": self.order, "delay": self.delay, "lag_step": self.lag_step}

    @classmethod
    def from_dict(cls, d: dict) -> "HistorySpec":
        return cls(int(d["order"]), int(d.get("delay", 0)), int(d.get("lag_step", 1)))


@dataclass(frozen=True)
class TimeSeriesSet:
    """Sampled signals indexed ``values[trial, time, channel]``.

    Arrays of shape ``(T,)`` or ``(T, d)`` are promoted to a single trial.
    The stored array is a read-only copy.
    """

    values: np.ndarray
    sampling_rate: float = 1.0
    channel_names: tuple = ()
    time_origin: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[None, :, None]
        elif v.ndim == 2:
            v = v[None, :, :]
        if v.ndim != 3:
            raise ValidationError(f"values must have 1-3 dimensions, got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        names = tuple(str(n) for n in self.channel_names)
        if not names and v.shape[2] > 0:
            names = tuple(f"ch{i}" for i in range(v.shape[2]))
        if len(names) != v.shape[2]:
            raise ValidationError(
                f"{len(names)} channel names for {v.shape[2]} channels")
        object.__setattr__(self, "channel_names", names)
        if not self.sampling_rate > 0:
            raise ValidationError(f"sampling_rate must be > 0, got {self.sampling_rate!r}")
        object.__setattr__(self, "sampling_rate", float(self.sampling_rate))

    @property
    def n_trials(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def replace(self, values) -> "TimeSeriesSet":
        return TimeSeriesSet(values, self.sampling_rate, self.channel_names, self.time_origin)

    def select(self, channels: Sequence[int]) -> "TimeSeriesSet":
        channels = [self.channel_index(c) for c in channels]
        return TimeSeriesSet(self.values[:, :, channels], self.sampling_rate,
                             tuple(self.channel_names[c] for c in channels),
                             self.time_origin)

    def channel_index(self, channel) -> int:
        """Resolve a channel given by position or by name."""
        if isinstance(channel, str):
            try:
                return self.channel_names.index(channel)
            except ValueError:
                raise ValidationError(f"unknown channel {channel!r}") from None
        c = int(channel)
        if not 0 <= c < self.n_channels:
            raise ValidationError(f"channel index {c} out of range 0..{self.n_channels - 1}")
        return c

    @classmethod
    def from_trials(cls, trials, **kwargs) -> "TimeSeriesSet":
        """Stack a list of ``(T, d)`` arrays; lengths must agree."""
        trials = [np.asarray(t, dtype=float) for t in trials]
        if not trials:
            raise EmptyInput("no trials supplied")
        trials = [t[:, None] if t.ndim == 1 else t for t in trials]
        shapes = {t.shape for t in trials}
        if len(shapes) > 1:
            raise RaggedTrials(f"trials have differing shapes: {sorted(shapes)}",
                               shapes=[list(s) for s in sorted(shapes)])
        return cls(np.stack(trials), **kwargs)


def validate(series) -> TimeSeriesSet:
    """Check the data-model invariants and return the (unchanged) series.

    Accepts a :class:`TimeSeriesSet`, an array, or a list of per-trial
    arrays.
    """
    if not isinstance(series, TimeSeriesSet):
        if isinstance(series, (list, tuple)):
            if len(series) == 0:
                raise EmptyInput("no trials supplied")
            series = TimeSeriesSet.from_trials(series)
        else:
            arr = np.asarray(series, dtype=float)
            if arr.size == 0:
                raise EmptyInput(f"empty input of shape {arr.shape}")
            series = TimeSeriesSet(arr)
    K, T, d = series.values.shape
    if K < 1 or d < 1 or T < 1:
        raise EmptyInput(f"empty input of shape {(K, T, d)}")
    if T < 2:
        raise EmptyInput(f"need at least 2 time samples, got {T}")
    bad = ~np.isfinite(series.values)
    if bad.any():
        k, t, c = (int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteValue(
            f"non-finite value at trial {k}, time {t}, channel {c}",
            trial=k, time=t, channel=c)
    return series


def demean(series: TimeSeriesSet, scope: str = "per-trial") -> TimeSeriesSet:
    """Remove channel means, per trial or pooled across trials."""
    v = series.values
    if scope == "per-trial":
        mean = v.mean(axis=1, keepdims=True)
    elif scope == "pooled":
        mean = v.mean(axis=(0, 1), keepdims=True)
    else:
        raise ValidationError(f"unknown demean scope {scope!r}")
    return series.replace(v - mean)


def detrend(series: TimeSeriesSet) -> TimeSeriesSet:
    """Remove a least-squares linear trend from every trial and channel."""
    v = series.values
    T = v.shape[1]
    t = np.arange(T, dtype=float)
    basis = np.column_stack([np.ones(T), t - t.mean()])
    out = np.empty_like(v)
    for k in range(v.shape[0]):
        beta, *_ = np.linalg.lstsq(basis, v[k], rcond=None)
        out[k] = v[k] - basis @ beta
    return series.replace(out)


@dataclass
class StationarityReport:
    segment_means: np.ndarray      # (n_segments, d)
    segment_variances: np.ndarray  # (n_segments, d)
    variance_ratio: np.ndarray     # (d,) max/min segment variance
    threshold: float
    flagged: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.flagged is None:
            self.flagged = self.variance_ratio > self.threshold

    @property
    def flag(self) -> bool:
        return bool(np.any(self.flagged))

    def to_dict(self) -> dict:
        return {
            "segment_means": self.segment_means,
            "segment_variances": self.segment_variances,
            "variance_ratio": self.variance_ratio,
            "threshold": self.threshold,
            "flagged": [bool(f) for f in self.flagged],
            "flag": self.flag,
        }


def stationarity_screen(series: TimeSeriesSet, n_segments: int = 4,
                        threshold: float = 3.0) -> StationarityReport:
    """Compare first and second moments across consecutive time segments.

    Advisory only: the report flags channels whose largest/smallest segment
    variance ratio exceeds ``threshold``. Trials are pooled within a segment.
    """
    T = series.n_times
    if n_segments < 2:
        raise SegmentTooShort(f"n_segments must be >= 2, got {n_segments}")
    seg_len = T // n_segments
    if seg_len < 20:
        raise SegmentTooShort(
            f"segments of {seg_len} samples (T={T}, n_segments={n_segments}); need >= 20",
            segment_length=seg_len)
    v = series.values
    means, variances = [], []
    for s in range(n_segments):
        block = v[:, s * seg_len:(s + 1) * seg_len, :].reshape(-1, v.shape[2])
        means.append(block.mean(axis=0))
        variances.append(block.var(axis=0, ddof=1))
    means = np.array(means)
    variances = np.array(variances)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = variances.max(axis=0) / variances.min(axis=0)
    ratio = np.where(np.isnan(ratio), 1.0, ratio)
    return StationarityReport(means, variances, ratio, float(threshold))


def lagged_design(values: np.ndarray, history: HistorySpec, start: int | None = None):
    """Stack regression rows over trials.

    Returns ``(X, Y)`` where ``Y[r] = values[k, t]`` and ``X[r]`` holds the
    history samples ``values[k, t - lag_j]`` ordered lag-major, channel-minor
    (column ``j * d + c``). Rows never straddle trials. ``start`` is the
    first usable time index (default: the largest lag).
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[None]
    K, T, d = values.shape
    L = history.max_lag
    if start is None:
        start = L
    if start < L:
        raise ValidationError(f"start {start} precedes the largest lag {L}")
    n = max(T - start, 0)
    X = np.empty((K, n, d * history.order))
    for j, lag in enumerate(history.lags):
        X[:, :, j * d:(j + 1) * d] = values[:, start - lag:T - lag, :]
    Y = values[:, start:, :]
    return X.reshape(K * n, -1), Y.reshape(K * n, d)


# --- CSV ingestion ------------------------------------------------------------

def _read_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyInput(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    try:
        data = np.array([[float(x) for x in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if data.size and data.shape[1] != len(header):
        raise ValidationError(f"{path}: row width does not match header")
    return header, data.reshape(len(rows), len(header))


def read_csv(paths, sampling_rate: float = 1.0, time_origin: float = 0.0) -> TimeSeriesSet:
    """Load trials from CSV.

    Either one file per trial (header of channel names, one row per sample)
    or a single file whose first column is an integer ``trial`` label.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    paths = list(paths)
    if not paths:
        raise EmptyInput("no input files")
    for p in paths:
        if not os.path.isfile(p):
            raise ValidationError(f"input file not found: {p}", path=str(p))
    header, data = _read_table(paths[0])
    if header and header[0].lower() == "trial":
        if len(paths) > 1:
            raise ValidationError("a file with a trial column must be the only input")
        labels = data[:, 0]
        if np.any(labels != np.round(labels)):
            raise ValidationError("trial column must hold integers")
        trials = [data[labels == lab, 1:] for lab in np.unique(labels)]
        names = header[1:]
    else:
        trials = [data]
        names = header
        for p in paths[1:]:
            h, dat = _read_table(p)
            if h != header:
                raise RaggedTrials(f"{p}: header {h} differs from {header}")
            trials.append(dat)
    series = TimeSeriesSet.from_trials(trials, sampling_rate=sampling_rate,
                                       channel_names=tuple(names),
                                       time_origin=time_origin)
    return validate(series)


def write_csv(series: TimeSeriesSet, path, single_file: bool = False) -> list:
    """Write trials to CSV; returns the written paths.

    With ``single_file`` the output is one file with a ``trial`` column;
    otherwise ``path`` is a directory receiving ``trial_000.csv`` etc.
    Values are written with ``repr`` so they round-trip exactly.
    """
    written = []
    if single_file:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", *series.channel_names])
            for k in range(series.n_trials):
                for row in series.values[k]:
                    w.writerow([k, *(repr(float(x)) for x in row)])
        written.append(str(path))
        return written
    os.makedirs(path, exist_ok=True)
    width = max(3, len(str(series.n_trials - 1)))
    for k in range(series.n_trials):
        out = os.path.join(path, f"trial_{k:0{width}d}.csv")
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(series.channel_names)
            for row in series.values[k]:
                w.writerow([repr(float(x)) for x in row])
        written.append(out)
    return written
