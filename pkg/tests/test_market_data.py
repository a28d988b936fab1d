import json
from pathlib import Path

import httpx
import numpy as np
import pytest

from vwap_forge.market_data import (
    CSV_COLUMNS,
    HOUR_MS,
    Bar,
    BarSeries,
    MarketDataError,
    SplitSpec,
    SyntheticSpec,
    fetch_klines,
    fill_gaps,
    generate_synthetic,
    parse_kline_rows,
    read_csv,
    split,
    split_sizes,
    validate,
    write_csv,
)

FIXTURES = Path(__file__).parent / "fixtures"


def kline(open_time, o=100.0, h=101.0, l=99.0, c=100.5, v=2.0, qv=200.0):
    return [open_time, str(o), str(h), str(l), str(c), str(v), open_time + HOUR_MS - 1, str(qv), 10, "0", "0", "0"]


# --- kline parsing --------------------------------------------------------------------

def test_bin_vwap_is_quote_over_base():
    (bar,) = parse_kline_rows([kline(0, v=2.0, qv=100_000.0)])
    assert bar.bin_vwap == 50_000.0
    assert not bar.inactive


def test_zero_volume_carries_vwap_forward():
    bars = parse_kline_rows([kline(0, v=2.0, qv=100_000.0), kline(HOUR_MS, v=0.0, qv=0.0)])
    assert bars[1].bin_vwap == 50_000.0
    assert bars[1].inactive


def test_fixture_bin_vwap_matches_hand_ratios():
    rows = json.loads((FIXTURES / "klines_100.json").read_text())
    bars = parse_kline_rows(rows)
    assert len(bars) == 100
    # quote_volume / volume, worked by hand for three rows
    assert bars[0].bin_vwap == pytest.approx(29059.67, abs=1e-6)
    assert bars[1].bin_vwap == pytest.approx(29123.26, abs=1e-6)
    assert bars[57].bin_vwap == pytest.approx(29799.36, abs=1e-6)
    # row 2 has zero volume
    assert bars[2].inactive and bars[2].bin_vwap == bars[1].bin_vwap
    validate(BarSeries.from_bars("BTCUSDT", bars))


def test_malformed_kline_reports_row():
    with pytest.raises(MarketDataError, match="row 1"):
        parse_kline_rows([kline(0), [HOUR_MS, "x"]])


def test_fill_gaps_inserts_inactive_bars():
    bars = parse_kline_rows([kline(0, v=2.0, qv=100.0), kline(3 * HOUR_MS)])
    filled = fill_gaps(bars)
    assert [b.open_time for b in filled] == [0, HOUR_MS, 2 * HOUR_MS, 3 * HOUR_MS]
    assert filled[1].inactive and filled[1].volume == 0.0 and filled[1].bin_vwap == 50.0


# --- paginated client -------------------------------------------------------------------

def paged_transport(n_total, start, calls, fail_first=0):
    state = {"fails": fail_first}

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(dict(request.url.params))
        if state["fails"]:
            state["fails"] -= 1
            return httpx.Response(503)
        cursor = int(request.url.params["startTime"])
        end = int(request.url.params["endTime"])
        limit = int(request.url.params["limit"])
        i0 = (cursor - start) // HOUR_MS
        rows = []
        for i in range(i0, min(i0 + limit, n_total)):
            t = start + i * HOUR_MS
            if t > end:
                break
            p = 100.0 + i * 0.01
            rows.append(kline(t, o=p, h=p + 1, l=p - 1, c=p, v=1.0 + i % 5, qv=(1.0 + i % 5) * p))
        return httpx.Response(200, json=rows)

    return httpx.MockTransport(handler)


def test_two_pages_merge_into_one_series():
    start = 1_600_000_000_000 - 1_600_000_000_000 % HOUR_MS
    calls = []
    client = httpx.Client(transport=paged_transport(2000, start, calls))
    series = fetch_klines("BTCUSDT", start, start + 2000 * HOUR_MS, "https://example.test/klines",
                          rate_limit_ms=0, client=client)
    assert len(series) == 2000
    assert np.all(np.diff(series.open_time) == HOUR_MS)
    assert len(calls) >= 2
    assert calls[1]["startTime"] == str(start + 1000 * HOUR_MS)


def test_retries_transient_errors():
    calls = []
    client = httpx.Client(transport=paged_transport(10, 0, calls, fail_first=2))
    series = fetch_klines("X", 0, 10 * HOUR_MS, "https://example.test/k", rate_limit_ms=0,
                          backoff_s=0.0, client=client)
    assert len(series) == 10
    assert len(calls) == 3


def test_gives_up_after_max_retries():
    calls = []
    client = httpx.Client(transport=paged_transport(10, 0, calls, fail_first=99))
    with pytest.raises(MarketDataError, match="attempts"):
        fetch_klines("X", 0, 10 * HOUR_MS, "https://example.test/k", rate_limit_ms=0,
                     max_retries=2, backoff_s=0.0, client=client)
    assert len(calls) == 3


# --- validation ---------------------------------------------------------------------------

def small_series(n=30, seed=0):
    return generate_synthetic(SyntheticSpec(), 1000, seed).slice(0, n)


def with_column(series, name, values):
    cols = {c: getattr(series, c).copy() for c in CSV_COLUMNS}
    cols[name] = values
    return BarSeries(series.asset, *(cols[c] for c in CSV_COLUMNS))


def test_validate_rejects_shuffled_timestamps():
    s = small_series()
    t = s.open_time.copy()
    t[[4, 5]] = t[[5, 4]]
    with pytest.raises(MarketDataError, match="row 5"):
        validate(with_column(s, "open_time", t))


def test_validate_rejects_gaps_and_negative_volume():
    s = small_series()
    t = s.open_time.copy()
    t[10:] += HOUR_MS
    with pytest.raises(MarketDataError, match="spacing"):
        validate(with_column(s, "open_time", t))
    v = s.volume.copy()
    v[3] = -1.0
    with pytest.raises(MarketDataError, match="row 3"):
        validate(with_column(s, "volume", v))


def test_validate_rejects_bad_inactive_flag():
    s = small_series()
    flags = s.inactive.copy()
    flags[7] = True
    with pytest.raises(MarketDataError, match="inactive"):
        validate(with_column(s, "inactive", flags))


# --- synthetic generator ----------------------------------------------------------------------

def test_synthetic_is_deterministic():
    a = generate_synthetic(SyntheticSpec(), 2000, seed=3)
    b = generate_synthetic(SyntheticSpec(), 2000, seed=3)
    assert a == b
    assert a != generate_synthetic(SyntheticSpec(), 2000, seed=4)


def test_synthetic_preconditions():
    with pytest.raises(MarketDataError):
        generate_synthetic(SyntheticSpec(), 999, seed=0)
    with pytest.raises(MarketDataError, match="variance"):
        generate_synthetic(SyntheticSpec(noise_sigma=0.0), 2000, seed=0)
    with pytest.raises(MarketDataError, match="variance"):
        generate_synthetic(SyntheticSpec(price_sigma=-1.0), 2000, seed=0)


def test_zero_amplitude_daily_fractions_average_one_over_24():
    spec = SyntheticSpec(amplitude=0.0, dow_amplitude=0.0)
    s = generate_synthetic(spec, 24 * 400, seed=1)
    days = s.volume.reshape(-1, 24)
    fracs = days / days.sum(axis=1, keepdims=True)
    hourly_mean = fracs.mean(axis=0)
    # 400 days; the per-hour Monte-Carlo standard error is about 0.0006
    assert np.all(np.abs(hourly_mean - 1 / 24) < 0.004)


def test_seasonality_is_recoverable():
    spec = SyntheticSpec(amplitude=0.5)
    s = generate_synthetic(spec, 50_000, seed=2)
    hours = (s.open_time // HOUR_MS) % 24
    means = np.array([s.volume[hours == h].mean() for h in range(24)])
    corr = np.corrcoef(means, spec.hour_profile())[0, 1]
    assert corr >= 0.9


def test_synthetic_is_valid_and_positive():
    s = generate_synthetic(SyntheticSpec(), 5000, seed=0)
    assert np.all(s.volume > 0)
    assert np.all(s.low <= np.minimum(s.open, s.close))
    assert np.all(s.high >= np.maximum(s.open, s.close))


# --- splits --------------------------------------------------------------------------------

@pytest.mark.parametrize("n, sizes", [(1000, (640, 160, 200)), (43_800, (28_032, 7_008, 8_760))])
def test_split_sizes(n, sizes):
    assert split_sizes(n) == sizes


def test_split_partitions_are_contiguous():
    s = generate_synthetic(SyntheticSpec(), 1000, seed=0)
    tr, va, te = split(s, SplitSpec(), min_length=10)
    assert (len(tr), len(va), len(te)) == (640, 160, 200)
    assert va.open_time[0] == tr.open_time[-1] + HOUR_MS
    assert te.open_time[-1] == s.open_time[-1]


def test_split_too_short_states_minimum():
    s = small_series(10)
    with pytest.raises(MarketDataError, match="minimum series length"):
        split(s, SplitSpec(), min_length=120 + 12)


# --- CSV ------------------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    s = generate_synthetic(SyntheticSpec(), 1000, seed=5, asset="RT")
    bars = s.bars
    bars[10] = Bar(bars[10].open_time, bars[10].open, bars[10].high, bars[10].low, bars[10].close,
                   0.0, 0.0, bars[9].bin_vwap, True)
    s = validate(BarSeries.from_bars("RT", bars))
    write_csv(s, tmp_path / "rt.csv")
    back = read_csv(tmp_path / "rt.csv", asset="RT")
    assert back == s


def test_csv_shuffled_rows_name_first_bad_row(tmp_path):
    s = small_series(20)
    path = tmp_path / "s.csv"
    write_csv(s, path)
    lines = path.read_text().splitlines()
    lines[6], lines[7] = lines[7], lines[6]  # data rows 5 and 6
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(MarketDataError, match="row 6"):
        read_csv(path)


def test_csv_header_and_field_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("open_time,open\n1,2\n")
    with pytest.raises(MarketDataError, match="missing column"):
        read_csv(p)
    p.write_text(",".join(CSV_COLUMNS) + "\n0,1,1,1,1,1,1,1,maybe\n")
    with pytest.raises(MarketDataError, match="row 0"):
        read_csv(p)
    p.write_text("")
    with pytest.raises(MarketDataError, match="header"):
        read_csv(p)
