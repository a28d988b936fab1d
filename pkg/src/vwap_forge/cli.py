"""Command-line entry point: ``vwap-forge <command> [flags]``.

Exit codes: 0 success, 1 usage error (help text on stderr), 2 runtime error
(one JSON object ``{"error": ..., "message": ...}`` on stderr).
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Iterator, TextIO

from .allocation import MODEL_NAMES, Allocator, AllocationError, ModelSpec
from .config import ConfigError, RunConfig, load_config, with_overrides
from .features import FeatureConfig, FeatureError, build_split_windows, window_features
from .market_data import (
    HOUR_MS, BarSeries, MarketDataError, check_header, fetch_klines, generate_synthetic,
    parse_csv_row, read_csv, split, split_sizes, write_csv,
)
from .numerics import CheckpointError, load_checkpoint
from .objectives import LossKind, ObjectiveError, evaluate, write_allocation_stats_csv, write_slippage_csv
from .training import Dataset, TrainingError, aggregate, load_results, render_table, run_experiment, write_report

log = logging.getLogger("vwap_forge")

RUNTIME_ERRORS = (
    MarketDataError, FeatureError, ConfigError, CheckpointError, TrainingError, AllocationError,
    ObjectiveError, OSError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage errors are 1 here
        raise UsageError(f"{self.format_help()}\n{self.prog}: error: {message}")


# --- helpers -----------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    seeds = None
    if getattr(args, "seeds", None):
        seeds = tuple(args.seeds)
    elif args.seed is not None:
        seeds = (args.seed,)
    return with_overrides(cfg, getattr(args, "lookback", None), getattr(args, "horizon", None), seeds)


def _parse_date(s: str) -> int:
    try:
        d = dt.datetime.fromisoformat(s)
    except ValueError:
        raise UsageError(f"invalid date {s!r}; use YYYY-MM-DD or an ISO timestamp") from None
    if d.tzinfo is None:
        d = d.replace(tzinfo=dt.timezone.utc)
    return int(d.timestamp() * 1000)


def _seed_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {s!r}") from None


def _load_model(ref: str, features: FeatureConfig) -> tuple[Allocator, object, dict]:
    """``ref`` is a checkpoint path or ``naive``."""
    if ref == "naive":
        alloc = Allocator(ModelSpec.from_name("naive", lookback=features.lookback, horizon=features.horizon))
        return alloc, alloc.init_params(0), {"model": alloc.spec.to_dict()}
    store, meta = load_checkpoint(ref)
    if "model" not in meta:
        raise CheckpointError(f"{ref}: checkpoint has no model description")
    return Allocator(ModelSpec.from_dict(meta["model"])), store, meta


def _features_for(spec: ModelSpec, cfg: RunConfig) -> FeatureConfig:
    return FeatureConfig(spec.lookback, spec.horizon, cfg.features.rolling_window)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- commands ------------------------------------------------------------------------

def cmd_fetch(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    symbols = args.symbol or list(cfg.data.symbols)
    start, end = _parse_date(args.start), _parse_date(args.end)
    for sym in symbols:
        series = fetch_klines(sym, start, end, cfg.endpoint(), rate_limit_ms=cfg.data.rate_limit_ms)
        path = out / f"{sym.lower()}.csv"
        write_csv(series, path)
        print(f"{sym}: {len(series)} bars -> {path}")
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    spec = cfg.synthetic
    if args.amplitude is not None:
        spec = replace(spec, amplitude=args.amplitude)
    seed = 0 if args.seed is None else args.seed
    series = generate_synthetic(spec, args.bars, seed, asset=args.asset)
    path = out / f"{args.asset.lower()}.csv"
    write_csv(series, path)
    print(f"{len(series)} bars -> {path}")
    return 0


def cmd_split(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    series = read_csv(args.data)
    parts = split(series, cfg.split, min_length=cfg.features.shift)
    n_train, n_val, n_test = split_sizes(len(series), cfg.split)
    bounds = {}
    start = 0
    for name, part in zip(("train", "validation", "test"), parts):
        write_csv(part, out / f"{name}.csv")
        bounds[name] = {"start_index": start, "stop_index": start + len(part),
                        "first_open_time": int(part.open_time[0]), "last_open_time": int(part.open_time[-1])}
        start += len(part)
    _write_json(out / "boundaries.json", bounds)
    print(f"train {n_train}, validation {n_val}, test {n_test} bars -> {out}")
    return 0


def _datasets(paths: Iterable[str], cfg: RunConfig) -> list[Dataset]:
    out = []
    for p in paths:
        series = read_csv(p)
        tr, va, te = build_split_windows(series, cfg.features, cfg.split)
        if min(len(tr), len(va), len(te)) == 0:
            raise FeatureError(f"{p}: a partition has no complete windows; use a longer series")
        out.append(Dataset(series.asset, tr, va, te))
    return out


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    if cfg.train.max_seconds is None and args.max_seconds is not None:
        cfg = replace(cfg, train=replace(cfg.train, max_seconds=args.max_seconds))
    specs = [cfg.model.spec(name, cfg.features) for name in (args.model or ["dynamic-lstm"])]
    losses = [LossKind.parse(s) for s in (args.loss or ["absolute"])]
    datasets = _datasets(args.data, cfg)
    _write_json(out / "config.json", cfg.to_dict())
    results, rows = run_experiment(datasets, specs, losses, cfg.train, out_dir=out, jobs=args.jobs)
    sys.stdout.write(render_table(rows))
    failed = [r for r in results if not r.ok]
    for r in failed:
        print(f"run failed: {r.asset} {r.model} {r.loss} seed {r.seed}: {r.error}", file=sys.stderr)
    return 2 if failed and len(failed) == len(results) else 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    model, store, meta = _load_model(args.model, cfg.features)
    feats = _features_for(model.spec, cfg)
    series = read_csv(args.data)
    parts = dict(zip(("train", "validation", "test"), build_split_windows(series, feats, cfg.split)))
    windows = parts[args.partition]
    ev = evaluate(model, store, windows)
    metrics = {"model": model.name, "asset": series.asset, "partition": args.partition,
               **ev.metrics.to_dict(), "scaled": ev.metrics.scaled()}
    _write_json(out / "metrics.json", metrics)
    write_slippage_csv(ev, out / "slippage.csv")
    write_allocation_stats_csv(ev, out / "allocation_stats.csv")
    print(json.dumps(metrics, sort_keys=True))
    return 0


# --- execute ---------------------------------------------------------------------------

EXECUTE_HEADER = "horizon_start_ms,step_index,fraction"


def _iter_stream_bars(fh: TextIO) -> Iterator:
    reader = csv.reader(fh)
    check_header(next(reader, None))
    for i, row in enumerate(reader):
        if row:
            yield parse_csv_row(row, i)


def _order_starts(n_bars: int, feats: FeatureConfig, every: int) -> range:
    """Orders whose first decision row has been observed."""
    first = max(feats.rolling_window, 1)
    return range(first, n_bars - feats.lookback + 1, every)


def _format(horizon_start: int, step: int, v: float) -> str:
    return f"{horizon_start},{step},{float(v)!r}"


def execute_batch(model: Allocator, store, series: BarSeries, feats: FeatureConfig, every: int) -> list[str]:
    """Every order's curve from a complete file, one window per forward
    pass. A trailing order whose rows are not all present gets only the
    allocations already decided, as in streaming mode."""
    lines = []
    for w in _order_starts(len(series), feats, every):
        t = min(len(series) - w, feats.seq_len)
        x = window_features(series, feats, w, t)
        v = model.allocate(store, x[None])[0] if t == feats.seq_len else model.deploy_step(store, x, t)
        t0 = int(series.open_time[w]) + feats.lookback * HOUR_MS
        lines += [_format(t0, i + 1, x) for i, x in enumerate(v)]
    return lines


def execute_stream(model: Allocator, store, bars: Iterable, feats: FeatureConfig, every: int,
                   asset: str = "STREAM") -> Iterator[str]:
    """Consume bars one at a time and emit each allocation the moment it is
    decided. Orders start every ``every`` bars once enough history exists;
    only the bars still needed by unfinished orders are buffered."""
    l, h = feats.lookback, feats.horizon
    first = max(feats.rolling_window, 1)  # bars of history an order needs before its start
    buf: list = []
    offset = 0  # absolute index of buf[0]
    next_order = first
    active: dict[int, int] = {}  # order start -> steps emitted
    for bar in bars:
        if buf and bar.open_time != buf[-1].open_time + HOUR_MS:
            raise MarketDataError(f"stream bar at {bar.open_time} does not follow {buf[-1].open_time} by one hour")
        buf.append(bar)
        n = offset + len(buf)
        while next_order + l <= n:
            active[next_order] = 0
            next_order += every
        for w in sorted(active):
            t = min(n - w, feats.seq_len)
            k = model.decided_steps(t)
            done = active[w]
            if k > done:
                lo = w - first - offset
                tail = BarSeries.from_bars(asset, buf[lo:], interval_ms=HOUR_MS)
                v = model.deploy_step(store, window_features(tail, feats, first, t), t)
                t0 = buf[w - offset].open_time + l * HOUR_MS
                for i in range(done, k):
                    yield _format(int(t0), i + 1, v[i])
                active[w] = k
            if active[w] >= h:
                del active[w]
        cut = min([*active, next_order]) - first - offset
        if cut > 0:
            del buf[:cut]
            offset += cut


def cmd_execute(args) -> int:
    cfg = _config(args)
    model, store, _ = _load_model(args.model, cfg.features)
    feats = _features_for(model.spec, cfg)
    every = args.every or feats.horizon
    if args.stream is None and args.data is None:
        raise UsageError("execute needs --data FILE (batch mode) or --stream FILE|-")
    out_fh = sys.stdout
    close = False
    if args.out:
        out = _out_dir(args)
        out_fh = open(out / "execution.csv", "w")
        close = True
    try:
        out_fh.write(EXECUTE_HEADER + "\n")
        if args.stream is not None:
            src = sys.stdin if args.stream == "-" else open(args.stream)
            try:
                for line in execute_stream(model, store, _iter_stream_bars(src), feats, every):
                    out_fh.write(line + "\n")
                    out_fh.flush()
            finally:
                if src is not sys.stdin:
                    src.close()
        else:
            series = read_csv(args.data)
            for line in execute_batch(model, store, series, feats, every):
                out_fh.write(line + "\n")
    finally:
        if close:
            out_fh.close()
    return 0


def cmd_report(args) -> int:
    out = Path(args.out or "out")
    results = load_results(out)
    if not results:
        raise TrainingError(f"no stored run results under {out / 'runs'}")
    rows = aggregate(results)
    write_report(rows, out)
    sys.stdout.write(render_table(rows))
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed (train: single run seed)")
    common.add_argument("--out", help="output directory (default: out; execute: stdout unless given)")
    common.add_argument("-v", "--verbose", action="store_true")

    windows = _Parser(add_help=False)
    windows.add_argument("--lookback", type=int, help="lookback l (overrides config)")
    windows.add_argument("--horizon", type=int, help="execution horizon h (overrides config)")

    p = _Parser(prog="vwap-forge", description="Neural VWAP execution: data, training, evaluation and execution.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("fetch", parents=[common], help="download hourly klines")
    s.add_argument("--symbol", action="append", help="symbol, repeatable (default: config data.symbols)")
    s.add_argument("--start", required=True, help="start date (UTC), e.g. 2021-01-01")
    s.add_argument("--end", required=True, help="end date (UTC, exclusive)")
    s.set_defaults(func=cmd_fetch)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic bar series")
    s.add_argument("--bars", type=int, required=True)
    s.add_argument("--asset", default="SYNTH")
    s.add_argument("--amplitude", type=float, help="hour-of-day seasonality amplitude")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", parents=[common, windows], help="chronological train/validation/test split")
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", parents=[common, windows], help="train a model grid over seeds")
    s.add_argument("--data", action="append", required=True, help="bar CSV, repeatable (one per asset)")
    s.add_argument("--model", action="append", choices=MODEL_NAMES, help="repeatable (default: dynamic-lstm)")
    s.add_argument("--loss", action="append", choices=[k.value for k in LossKind], help="repeatable (default: absolute)")
    s.add_argument("--seeds", type=_seed_list, help="comma-separated run seeds (overrides --seed and config)")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--max-seconds", type=float, help="wall-clock budget per run")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a data partition")
    s.add_argument("--model", required=True, help="checkpoint path, or 'naive'")
    s.add_argument("--data", required=True)
    s.add_argument("--partition", choices=["train", "validation", "test"], default="test")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("execute", parents=[common], help="emit execution allocations")
    s.add_argument("--model", required=True, help="checkpoint path, or 'naive'")
    s.add_argument("--data", help="bar CSV (batch mode)")
    s.add_argument("--stream", help="bar CSV read incrementally; '-' for stdin")
    s.add_argument("--every", type=int, help="bars between order starts (default: horizon)")
    s.set_defaults(func=cmd_execute)

    s = sub.add_parser("report", parents=[common], help="rebuild the results table from stored runs")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except BrokenPipeError:
        # downstream reader went away (e.g. `| head`); not an error
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except RUNTIME_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # unexpected failure: still structured, still exit 2
        log.debug("unexpected error", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
