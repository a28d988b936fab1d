"""Hourly OHLCV bars with a per-bar VWAP: fetch, synthesize, validate, split, CSV."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import httpx
import numpy as np

log = logging.getLogger(__name__)

HOUR_MS = 3_600_000
CSV_COLUMNS = ["open_time", "open", "high", "low", "close", "volume", "quote_volume", "bin_vwap", "inactive"]
DEFAULT_ENDPOINT = "https://fapi.binance.com/fapi/v1/klines"


class MarketDataError(ValueError):
    """Invalid or unusable market data. ``row`` is the offending bar index when known."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True)
class Bar:
    open_time: int
    open: float
    high: float
    low: float
    close: float
    volume: float
    quote_volume: float
    bin_vwap: float
    inactive: bool = False


@dataclass(frozen=True, eq=False)
class BarSeries:
    """Column-oriented, time-ordered bar series on a fixed hourly grid."""

    asset: str
    open_time: np.ndarray
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray
    quote_volume: np.ndarray
    bin_vwap: np.ndarray
    inactive: np.ndarray
    interval_ms: int = HOUR_MS

    def __len__(self) -> int:
        return len(self.open_time)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BarSeries):
            return NotImplemented
        return (
            self.asset == other.asset
            and self.interval_ms == other.interval_ms
            and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in CSV_COLUMNS)
        )

    def bar(self, i: int) -> Bar:
        return Bar(
            int(self.open_time[i]), float(self.open[i]), float(self.high[i]), float(self.low[i]),
            float(self.close[i]), float(self.volume[i]), float(self.quote_volume[i]),
            float(self.bin_vwap[i]), bool(self.inactive[i]),
        )

    @property
    def bars(self) -> list[Bar]:
        return [self.bar(i) for i in range(len(self))]

    def slice(self, start: int, stop: int) -> "BarSeries":
        return BarSeries(
            self.asset, *(getattr(self, c)[start:stop].copy() for c in CSV_COLUMNS), interval_ms=self.interval_ms
        )

    @classmethod
    def from_bars(cls, asset: str, bars: Sequence[Bar], interval_ms: int = HOUR_MS) -> "BarSeries":
        cols = {c: [getattr(b, c) for b in bars] for c in CSV_COLUMNS}
        return cls(
            asset,
            np.asarray(cols["open_time"], dtype=np.int64),
            *(np.asarray(cols[c], dtype=np.float64) for c in CSV_COLUMNS[1:-1]),
            np.asarray(cols["inactive"], dtype=bool),
            interval_ms=interval_ms,
        )


def concat_series(parts: Sequence[BarSeries]) -> BarSeries:
    first = parts[0]
    return BarSeries(
        first.asset,
        *(np.concatenate([getattr(p, c) for p in parts]) for c in CSV_COLUMNS),
        interval_ms=first.interval_ms,
    )


def validate(series: BarSeries) -> BarSeries:
    """Raise :class:`MarketDataError` on the first bar violating an invariant."""
    n = len(series)
    lengths = {c: len(getattr(series, c)) for c in CSV_COLUMNS}
    if len(set(lengths.values())) != 1:
        raise MarketDataError(f"column length mismatch: {lengths}")
    if n == 0:
        return series
    diffs = np.diff(series.open_time)
    bad = np.flatnonzero(diffs <= 0)
    if bad.size:
        raise MarketDataError("timestamps not strictly increasing", row=int(bad[0]) + 1)
    bad = np.flatnonzero(diffs != series.interval_ms)
    if bad.size:
        raise MarketDataError(f"spacing {diffs[bad[0]]} ms != {series.interval_ms} ms", row=int(bad[0]) + 1)
    for c in CSV_COLUMNS[1:-1]:
        col = getattr(series, c)
        bad = np.flatnonzero(~np.isfinite(col))
        if bad.size:
            raise MarketDataError(f"non-finite {c}", row=int(bad[0]))
    bad = np.flatnonzero((series.volume < 0) | (series.quote_volume < 0))
    if bad.size:
        raise MarketDataError("negative volume", row=int(bad[0]))
    bad = np.flatnonzero(series.bin_vwap <= 0)
    if bad.size:
        raise MarketDataError("bin_vwap must be positive", row=int(bad[0]))
    active = series.volume > 0
    lo = np.minimum(series.open, series.close)
    hi = np.maximum(series.open, series.close)
    bad = np.flatnonzero(active & ((series.low > lo) | (hi > series.high)))
    if bad.size:
        raise MarketDataError("OHLC ordering violated", row=int(bad[0]))
    bad = np.flatnonzero(series.inactive != ~active)
    if bad.size:
        raise MarketDataError("inactive flag disagrees with volume", row=int(bad[0]))
    carried = np.flatnonzero(~active[1:]) + 1
    bad = carried[series.bin_vwap[carried] != series.bin_vwap[carried - 1]]
    if bad.size:
        raise MarketDataError("inactive bar must carry the previous bin_vwap forward", row=int(bad[0]))
    return series


# --- klines client ----------------------------------------------------------

def parse_kline_rows(rows: Iterable[Sequence], prev_vwap: float | None = None, offset: int = 0) -> list[Bar]:
    """Binance kline arrays -> Bars.

    Column order: open_time, open, high, low, close, volume, close_time,
    quote_volume, n_trades, taker_buy_base, taker_buy_quote, ignore.
    """
    out = []
    for i, row in enumerate(rows):
        try:
            open_time = int(row[0])
            o, h, l, c, v = (float(row[k]) for k in range(1, 6))
            qv = float(row[7])
        except (IndexError, TypeError, ValueError) as exc:
            raise MarketDataError(f"malformed kline: {exc}", row=offset + i) from None
        if v > 0:
            vwap = qv / v
            inactive = False
        else:
            vwap = prev_vwap if prev_vwap is not None else c
            inactive = True
        out.append(Bar(open_time, o, h, l, c, v, qv, vwap, inactive))
        prev_vwap = vwap
    return out


def fill_gaps(bars: Sequence[Bar], interval_ms: int = HOUR_MS) -> list[Bar]:
    """Insert zero-volume bars at missing grid points; duplicates keep the first."""
    out: list[Bar] = []
    for b in bars:
        if out:
            last = out[-1]
            if b.open_time <= last.open_time:
                continue
            t = last.open_time + interval_ms
            while t < b.open_time:
                px = last.close
                out.append(Bar(t, px, px, px, px, 0.0, 0.0, out[-1].bin_vwap, True))
                t += interval_ms
            if b.inactive:
                b = Bar(b.open_time, b.open, b.high, b.low, b.close, 0.0, b.quote_volume, out[-1].bin_vwap, True)
        out.append(b)
    return out


def fetch_klines(
    symbol: str,
    start_ms: int,
    end_ms: int,
    endpoint: str = DEFAULT_ENDPOINT,
    *,
    limit: int = 1000,
    rate_limit_ms: int = 250,
    max_retries: int = 5,
    backoff_s: float = 1.0,
    client: httpx.Client | None = None,
) -> BarSeries:
    """Download hourly klines for ``[start_ms, end_ms)`` page by page."""
    own = client is None
    client = client or httpx.Client(timeout=30.0)
    rows: list = []
    cursor = start_ms
    try:
        while cursor < end_ms:
            params = {"symbol": symbol, "interval": "1h", "startTime": cursor, "endTime": end_ms - 1, "limit": limit}
            page = _get_with_retry(client, endpoint, params, max_retries, backoff_s)
            if not page:
                break
            rows.extend(page)
            try:
                last_open = int(page[-1][0])
            except (IndexError, TypeError, ValueError):
                raise MarketDataError("malformed kline", row=len(rows) - 1) from None
            cursor = last_open + HOUR_MS
            if len(page) < limit:
                break
            if rate_limit_ms:
                time.sleep(rate_limit_ms / 1000.0)
    finally:
        if own:
            client.close()
    bars = fill_gaps(parse_kline_rows(rows))
    return validate(BarSeries.from_bars(symbol, bars))


def _get_with_retry(client: httpx.Client, url: str, params: dict, max_retries: int, backoff_s: float):
    delay = backoff_s
    for attempt in range(max_retries + 1):
        try:
            resp = client.get(url, params=params)
            resp.raise_for_status()
            return resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            if attempt == max_retries:
                raise MarketDataError(f"klines request to {url} failed after {attempt + 1} attempts: {exc}") from exc
            log.warning("klines request failed (%s); retrying in %.1fs", exc, delay)
            time.sleep(delay)
            delay *= 2


# --- synthetic generator ------------------------------------------------------

# Fixed intraday shape in [-1, 1]: quiet Asian night, European open bump,
# US session peak. Scaled by ``amplitude`` in log space.
_HOUR_SHAPE = np.array([
    -0.2, -0.4, -0.6, -0.8, -0.9, -1.0, -0.9, -0.7, -0.3, 0.1, 0.2, 0.1,
    0.0, 0.3, 0.6, 0.9, 1.0, 0.8, 0.6, 0.4, 0.3, 0.2, 0.1, 0.0,
])
_DOW_SHAPE = np.array([0.3, 0.4, 0.4, 0.35, 0.3, -0.8, -1.0])  # Mon..Sun


@dataclass(frozen=True)
class SyntheticSpec:
    amplitude: float = 0.5          # hour-of-day seasonality, log-volume units
    dow_amplitude: float = 0.2      # day-of-week seasonality, log-volume units
    noise_sigma: float = 0.25       # innovation std of the log-volume noise
    noise_persistence: float = 0.6  # AR(1) coefficient of the log-volume noise
    base_volume: float = 1000.0
    price_sigma: float = 0.008      # hourly log-return std at average activity
    start_price: float = 30_000.0
    start_ms: int = 1_577_836_800_000  # 2020-01-01T00:00Z

    def hour_profile(self) -> np.ndarray:
        return np.exp(self.amplitude * _HOUR_SHAPE)

    def dow_profile(self) -> np.ndarray:
        return np.exp(self.dow_amplitude * _DOW_SHAPE)


def generate_synthetic(spec: SyntheticSpec, n_bars: int, seed: int, asset: str = "SYNTH") -> BarSeries:
    """Seeded bar series with seasonal, persistent, strictly positive volume.

    Volatility scales with the square root of relative activity, so price
    moves cluster in busy hours as they do on real venues.
    """
    if n_bars < 1000:
        raise MarketDataError(f"n_bars must be >= 1000, got {n_bars}")
    if spec.noise_sigma <= 0 or spec.price_sigma <= 0:
        raise MarketDataError("variance parameters must be positive")
    if not 0 <= spec.noise_persistence < 1:
        raise MarketDataError("noise_persistence must be in [0, 1)")
    rng = np.random.Generator(np.random.PCG64(seed))
    open_time = spec.start_ms + HOUR_MS * np.arange(n_bars, dtype=np.int64)
    hours = (open_time // HOUR_MS) % 24
    dows = ((open_time // 86_400_000) + 3) % 7  # epoch day 0 was a Thursday
    season = spec.hour_profile()[hours] * spec.dow_profile()[dows]

    eps = rng.standard_normal(n_bars) * spec.noise_sigma
    noise = np.empty(n_bars)
    stationary_scale = 1.0 / np.sqrt(1.0 - spec.noise_persistence**2)
    noise[0] = eps[0] * stationary_scale
    for t in range(1, n_bars):
        noise[t] = spec.noise_persistence * noise[t - 1] + eps[t]
    volume = spec.base_volume * season * np.exp(noise)

    activity = volume / (spec.base_volume * np.mean(season))
    rets = spec.price_sigma * np.sqrt(activity) * rng.standard_normal(n_bars)
    log_close = np.log(spec.start_price) + np.cumsum(rets)
    close = np.exp(log_close)
    open_ = np.concatenate([[spec.start_price], close[:-1]])
    # bin VWAP sits between open and close; wicks extend beyond both
    w = rng.uniform(0.2, 0.8, n_bars)
    vwap = np.exp(w * np.log(open_) + (1 - w) * log_close)
    wick = np.abs(rng.standard_normal((2, n_bars))) * 0.5 * spec.price_sigma * np.sqrt(activity)
    high = np.maximum(open_, close) * np.exp(wick[0])
    low = np.minimum(open_, close) * np.exp(-wick[1])
    return validate(BarSeries(
        asset, open_time, open_, high, low, close, volume, volume * vwap, vwap,
        np.zeros(n_bars, dtype=bool),
    ))


# --- splitting ------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.20
    validation_fraction_of_remainder: float = 0.20


def split_sizes(n: int, spec: SplitSpec = SplitSpec()) -> tuple[int, int, int]:
    n_test = int(round(n * spec.test_fraction))
    rest = n - n_test
    n_val = int(round(rest * spec.validation_fraction_of_remainder))
    return rest - n_val, n_val, n_test


def split(series: BarSeries, spec: SplitSpec = SplitSpec(), min_length: int = 1) -> tuple[BarSeries, BarSeries, BarSeries]:
    """Chronological train/validation/test partition."""
    n_train, n_val, n_test = split_sizes(len(series), spec)
    if min(n_train, n_val, n_test) < min_length:
        need = _min_series_length(min_length, spec)
        raise MarketDataError(
            f"series of {len(series)} bars too short: every partition needs >= {min_length} bars "
            f"(minimum series length {need})"
        )
    a, b = n_train, n_train + n_val
    return series.slice(0, a), series.slice(a, b), series.slice(b, len(series))


def _min_series_length(min_length: int, spec: SplitSpec) -> int:
    n = min_length
    while min(split_sizes(n, spec)) < min_length:
        n += 1
    return n


# --- CSV codec ----------------------------------------------------------------------

def write_csv(series: BarSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for i in range(len(series)):
            w.writerow([
                int(series.open_time[i]),
                *(repr(float(getattr(series, c)[i])) for c in CSV_COLUMNS[1:-1]),
                int(bool(series.inactive[i])),
            ])


def parse_csv_row(row: Sequence[str], index: int) -> Bar:
    if len(row) != len(CSV_COLUMNS):
        raise MarketDataError(f"expected {len(CSV_COLUMNS)} fields, got {len(row)}", row=index)
    try:
        return Bar(
            int(row[0]),
            *(float(x) for x in row[1:8]),
            inactive=_parse_flag(row[8]),
        )
    except ValueError as exc:
        raise MarketDataError(f"unparseable field: {exc}", row=index) from None


def _parse_flag(s: str) -> bool:
    s = s.strip().lower()
    if s in ("1", "true"):
        return True
    if s in ("0", "false"):
        return False
    raise ValueError(f"bad inactive flag {s!r}")


def check_header(header: Sequence[str] | None) -> None:
    if header is None:
        raise MarketDataError("empty file: missing header")
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise MarketDataError(f"missing column(s): {', '.join(missing)}")
    if list(header) != CSV_COLUMNS:
        raise MarketDataError(f"columns must be in order {','.join(CSV_COLUMNS)}")


def read_csv(path: str | Path, asset: str | None = None) -> BarSeries:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        check_header(next(reader, None))
        bars = [parse_csv_row(row, i) for i, row in enumerate(reader) if row]
    return validate(BarSeries.from_bars(asset or path.stem.upper(), bars))
