"""Sliding execution windows over a bar series.

A window starting at bar ``w`` covers ``l + h`` bars: rows ``w .. w+l+h-2``
feed the network (the lookback plus the first ``h - 1`` horizon bars, which
become observable during execution) and bars ``w+l .. w+l+h-1`` are the
execution horizon whose prices and volume fractions form the targets.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .market_data import HOUR_MS, BarSeries, SplitSpec, split_sizes

FEATURE_NAMES = ["norm_volume", "hour_sin", "hour_cos", "dow_sin", "dow_cos", "vwap_return"]
N_FEATURES = len(FEATURE_NAMES)
DAY_MS = 86_400_000


class FeatureError(ValueError):
    pass


class DegenerateWindow(FeatureError):
    """The horizon has zero total market volume; VWAP is undefined."""


@dataclass(frozen=True)
class FeatureConfig:
    lookback: int = 120
    horizon: int = 12
    rolling_window: int = 336

    def __post_init__(self):
        if self.lookback < 1:
            raise FeatureError("lookback must be >= 1")
        if self.horizon < 2:
            raise FeatureError("horizon must be >= 2")
        if self.rolling_window < 1:
            raise FeatureError("rolling_window must be >= 1")

    @property
    def seq_len(self) -> int:
        return self.lookback + self.horizon - 1

    @property
    def shift(self) -> int:
        return self.lookback + self.horizon

    def min_bars(self) -> int:
        return self.rolling_window + self.lookback + self.horizon + 1


@dataclass(frozen=True)
class WindowSample:
    x: np.ndarray
    target_prices: np.ndarray
    target_volume_fractions: np.ndarray
    window_id: int


_HOUR_ANGLE = 2 * np.pi * np.arange(24) / 24.0
_DOW_ANGLE = 2 * np.pi * np.arange(7) / 7.0
_HOUR_TABLE = np.stack([np.sin(_HOUR_ANGLE), np.cos(_HOUR_ANGLE)], axis=1)
_DOW_TABLE = np.stack([np.sin(_DOW_ANGLE), np.cos(_DOW_ANGLE)], axis=1)


def calendar_features(open_time: np.ndarray) -> np.ndarray:
    """sin/cos of hour-of-day and day-of-week angles, one row per bar.

    Looked up from fixed tables so a bar's values never depend on how many
    bars are processed together.
    """
    open_time = np.asarray(open_time, dtype=np.int64)
    hour = (open_time // HOUR_MS) % 24
    dow = ((open_time // DAY_MS) + 3) % 7  # Monday = 0; 1970-01-01 was a Thursday
    return np.concatenate([_HOUR_TABLE[hour], _DOW_TABLE[dow]], axis=1)


def vwap_returns(series: BarSeries) -> np.ndarray:
    p = series.bin_vwap
    r = np.zeros(len(p))
    r[1:] = p[1:] / p[:-1] - 1.0
    r[series.inactive] = 0.0
    return r


def volume_denominator(volume: np.ndarray, start: int, rolling_window: int) -> float:
    """Mean raw volume over the ``rolling_window`` bars before ``start``.

    That mean ends ``l + h`` bars before the window's last target, so
    nothing inside the window feeds its own normalisation.
    """
    if start < rolling_window:
        raise FeatureError(f"window start {start} has fewer than {rolling_window} bars of history")
    return float(np.sum(volume[start - rolling_window:start]) / rolling_window)


def volume_denominators(volume: np.ndarray, starts: np.ndarray, rolling_window: int) -> np.ndarray:
    # per-slice sums (not a running cumsum) keep each value independent of
    # how much earlier history is loaded
    return np.array([volume_denominator(volume, int(w), rolling_window) for w in starts], dtype=np.float64)


def _feature_rows(volume, static, denom, rows) -> np.ndarray:
    safe = np.where(denom > 0, denom, 1.0)
    vol = np.where(denom > 0, volume[rows] / safe, 0.0)
    return np.concatenate([vol[..., None], static[rows]], axis=-1)


def window_features(series: BarSeries, cfg: FeatureConfig, start: int, n_rows: int | None = None) -> np.ndarray:
    """Feature rows ``start .. start+n_rows-1`` of the window starting at
    bar ``start`` (all ``l+h-1`` rows by default), shape ``(n_rows, d)``.

    Works on a partially observed series: only bars up to the last
    requested row are touched.
    """
    n_rows = cfg.seq_len if n_rows is None else n_rows
    if not 0 <= n_rows <= cfg.seq_len:
        raise FeatureError(f"n_rows must be in [0, {cfg.seq_len}], got {n_rows}")
    if start < max(cfg.rolling_window, 1) or start + n_rows > len(series):
        raise FeatureError(f"window start {start} with {n_rows} rows is out of range for {len(series)} bars")
    lo = start - 1
    part = series.slice(lo, start + n_rows)
    static = np.column_stack([calendar_features(part.open_time), vwap_returns(part)])
    denom = np.array(volume_denominator(series.volume, start, cfg.rolling_window))
    return _feature_rows(part.volume, static, denom, np.arange(1, n_rows + 1))


def targets_for_window(series: BarSeries, window_id: int, cfg: FeatureConfig) -> tuple[np.ndarray, np.ndarray]:
    first = window_id + cfg.lookback
    if window_id < 0 or first + cfg.horizon > len(series):
        raise FeatureError(f"window {window_id} out of range for {len(series)} bars")
    vol = series.volume[first:first + cfg.horizon]
    total = vol.sum()
    if total <= 0:
        raise DegenerateWindow(f"window {window_id}: zero total horizon volume")
    return series.bin_vwap[first:first + cfg.horizon].copy(), vol / total


class WindowSet:
    """All valid windows of a series; batches are gathered lazily.

    ``window_ids`` are bar indices (into ``series``) of each window's first
    row. Materialising every window up front would cost
    ``n_windows * (l+h-1) * d`` floats, so only per-bar columns are stored.
    """

    def __init__(self, series: BarSeries, cfg: FeatureConfig, window_ids: np.ndarray, n_degenerate: int = 0):
        self.series = series
        self.cfg = cfg
        self.window_ids = np.asarray(window_ids, dtype=np.int64)
        self.n_degenerate = n_degenerate
        self._static = np.column_stack([calendar_features(series.open_time), vwap_returns(series)])
        self._volume = series.volume
        self._denom = volume_denominators(series.volume, self.window_ids, cfg.rolling_window)
        self._rows = np.arange(cfg.seq_len)
        self._hz = np.arange(cfg.horizon)

    def __len__(self) -> int:
        return len(self.window_ids)

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.series, self.cfg, self.window_ids[idx])

    def position(self, window_id: int) -> int:
        """Index of the window starting at bar ``window_id``."""
        pos = np.searchsorted(self.window_ids, window_id)
        if pos >= len(self.window_ids) or self.window_ids[pos] != window_id:
            raise FeatureError(f"no window starts at bar {window_id}")
        return int(pos)

    def features(self, idx) -> np.ndarray:
        """Feature tensor ``(B, l+h-1, d)`` for window positions ``idx``."""
        idx = np.atleast_1d(idx)
        w = self.window_ids[idx]
        rows = w[:, None] + self._rows
        return _feature_rows(self._volume, self._static, self._denom[idx][:, None], rows)

    def targets(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.atleast_1d(idx)
        cols = self.window_ids[idx][:, None] + self.cfg.lookback + self._hz
        vol = self._volume[cols]
        return self.series.bin_vwap[cols], vol / vol.sum(axis=1, keepdims=True)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        prices, fracs = self.targets(idx)
        return self.features(idx), prices, fracs

    def sample(self, i: int) -> WindowSample:
        x, p, f = self.batch([i])
        return WindowSample(x[0], p[0], f[0], int(self.window_ids[i]))

    def end_times(self) -> np.ndarray:
        """open_time of each window's final horizon bar."""
        return self.series.open_time[self.window_ids + self.cfg.shift - 1]


def build_features(series: BarSeries, cfg: FeatureConfig = FeatureConfig(), first_target: int = 0) -> WindowSet:
    """Every stride-1 window of ``series`` whose horizon starts at or after
    bar ``first_target``. Bars before ``first_target`` are history only."""
    n = len(series)
    if n < cfg.min_bars():
        raise FeatureError(
            f"need at least {cfg.min_bars()} bars (rolling_window + lookback + horizon + 1), got {n}"
        )
    lo = max(cfg.rolling_window, first_target - cfg.lookback, 1)
    hi = n - cfg.shift  # inclusive last start
    if hi < lo:
        return WindowSet(series, cfg, np.zeros(0, dtype=np.int64))
    starts = np.arange(lo, hi + 1)
    csum = np.concatenate([[0.0], np.cumsum(series.volume)])
    horizon_total = csum[starts + cfg.shift] - csum[starts + cfg.lookback]
    keep = horizon_total > 0
    return WindowSet(series, cfg, starts[keep], n_degenerate=int((~keep).sum()))


def build_split_windows(
    series: BarSeries, cfg: FeatureConfig = FeatureConfig(), spec: SplitSpec = SplitSpec()
) -> tuple[WindowSet, WindowSet, WindowSet]:
    """Windows for the chronological train/validation/test partitions.

    A window belongs to the partition holding its whole horizon; its lookback
    may reach back into the previous partition, which is past data.
    """
    n_train, n_val, _ = split_sizes(len(series), spec)
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, len(series))]
    out = []
    for start, stop in bounds:
        out.append(build_features(series.slice(0, stop), cfg, first_target=start))
    return tuple(out)


def dump_features_csv(windows: WindowSet, path: str | Path, limit: int | None = None) -> None:
    """Debug dump: one line per (window, row) with columns
    ``window_id,row,<FEATURE_NAMES>``."""
    n = len(windows) if limit is None else min(limit, len(windows))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_id", "row", *FEATURE_NAMES])
        for i in range(n):
            x = windows.features([i])[0]
            wid = int(windows.window_ids[i])
            for r, row in enumerate(x):
                w.writerow([wid, r, *(repr(float(v)) for v in row)])
