"""Mini-batch Adam training with early stopping / LR reduction, and the
multi-seed experiment grid that produces the results table."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .allocation import MODEL_NAMES, Allocator, ModelSpec
from .features import WindowSet
from .numerics import AdamState, ParamStore, adam_step, forward_backward, save_checkpoint
from .numerics.tape import NonFiniteError
from .objectives import Evaluation, LossKind, MetricSet, evaluate, loss, loss_var, format_scaled

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 1000
    initial_lr: float = 0.001
    early_stop_patience: int = 10
    early_stop_min_delta: float = 0.00001
    lr_reduce_patience: int = 5
    lr_reduce_factor: float = 0.25
    lr_floor: float = 0.000025
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    max_seconds: float | None = None  # wall-clock budget per run; None = unlimited

    def __post_init__(self):
        if not 0 < self.lr_reduce_factor < 1:
            raise ValueError("lr_reduce_factor must be in (0, 1)")
        if self.lr_floor <= 0:
            raise ValueError("lr_floor must be positive")
        if self.early_stop_patience < 1 or self.lr_reduce_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


class PlateauCallbacks:
    """Early stopping and LR reduction on a monitored loss.

    The first epoch always sets the reference; afterwards an epoch improves
    only if ``loss < best - min_delta``. Both counters reset on improvement
    and the LR counter also resets after each reduction.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.best: float | None = None
        self.best_epoch = 0
        self.wait_stop = 0
        self.wait_lr = 0

    def update(self, epoch: int, value: float, lr: float) -> tuple[bool, bool, float]:
        """Returns ``(improved, stop, new_lr)``."""
        cfg = self.cfg
        if self.best is None or value < self.best - cfg.early_stop_min_delta:
            self.best = value
            self.best_epoch = epoch
            self.wait_stop = 0
            self.wait_lr = 0
            return True, False, lr
        self.wait_stop += 1
        self.wait_lr += 1
        if self.wait_lr >= cfg.lr_reduce_patience:
            lr = max(lr * cfg.lr_reduce_factor, cfg.lr_floor)
            self.wait_lr = 0
        return False, self.wait_stop >= cfg.early_stop_patience, lr


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    improved: bool
    seconds: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_val_loss: float = math.inf
    best_epoch: int = 0
    stop_reason: str = "max_epochs"
    seconds: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.records)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "improved", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr), int(r.improved),
                            f"{r.seconds:.3f}"])


def dataset_loss(model: Allocator, store: ParamStore, windows: WindowSet, kind: LossKind,
                 batch_size: int = 512) -> float:
    """Mean loss over every window (exact per-window mean, independent of batching)."""
    allocs, prices, fracs = [], [], []
    for start in range(0, len(windows), batch_size):
        x, p, f = windows.batch(np.arange(start, min(start + batch_size, len(windows))))
        allocs.append(model.allocate(store, x, batch_size=batch_size))
        prices.append(p)
        fracs.append(f)
    return loss(kind, np.concatenate(prices), np.concatenate(allocs), np.concatenate(fracs))


def train(
    spec: ModelSpec,
    train_set: WindowSet,
    val_set: WindowSet,
    cfg: TrainConfig,
    seed: int,
    kind: LossKind = LossKind.ABSOLUTE,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[ParamStore, History]:
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("train and validation sets must be nonempty")
    kind = LossKind(kind)
    model = Allocator(spec)
    store = model.init_params(seed)
    history = History()
    if not model.has_params:
        history.stop_reason = "no_parameters"
        history.best_val_loss = dataset_loss(model, store, val_set, kind)
        return store, history

    rng = np.random.Generator(np.random.PCG64([seed, 0x5EED]))
    opt = AdamState(learning_rate=cfg.initial_lr, lr_floor=cfg.lr_floor)
    callbacks = PlateauCallbacks(cfg)
    best = store.snapshot()

    def graph(p, batch):
        x, prices, fracs = batch
        return loss_var(kind, prices, model.forward(p, x), fracs)

    t0 = time.perf_counter()
    n = len(train_set)
    for epoch in range(1, cfg.max_epochs + 1):
        e0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = train_set.batch(idx)
            try:
                value = forward_backward(graph, store, batch)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite training loss at epoch {epoch}, batch {b}: {exc}") from exc
            adam_step(opt, store)
            total += value * len(idx)
        val = dataset_loss(model, store, val_set, kind)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        improved, stop, new_lr = callbacks.update(epoch, val, opt.learning_rate)
        rec = EpochRecord(epoch, total / n, val, opt.learning_rate, improved, time.perf_counter() - e0)
        history.records.append(rec)
        if on_epoch:
            on_epoch(rec)
        log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, rec.train_loss, val, opt.learning_rate)
        if improved:
            best = store.snapshot()
        opt.set_learning_rate(new_lr)
        if stop:
            history.stop_reason = "early_stopping"
            break
        if cfg.max_seconds is not None and time.perf_counter() - t0 >= cfg.max_seconds:
            history.stop_reason = "time_budget"
            break
    store.restore(best)
    history.best_val_loss = callbacks.best
    history.best_epoch = callbacks.best_epoch
    history.seconds = time.perf_counter() - t0
    return store, history


# --- experiment grid ---------------------------------------------------------------

MODEL_LABELS = {
    "naive": "Naive",
    "static-lstm": "StaticVWAP with LSTM",
    "static-tkan": "StaticVWAP with TKAN",
    "dynamic-lstm": "DynamicVWAP with LSTM",
    "dynamic-tkan": "DynamicVWAP with TKAN",
}
LOSS_LABELS = {"absolute": "Absolute", "quadratic": "Quadratic", "volume-curve": "Volume Curve"}


@dataclass
class RunResult:
    asset: str
    model: str
    loss: str
    seed: int
    metrics: MetricSet | None
    best_val_loss: float | None = None
    epochs: int = 0
    seconds: float = 0.0
    stop_reason: str = ""
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.metrics is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metrics"] = self.metrics.to_dict() if self.metrics else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        d = dict(d)
        d["metrics"] = MetricSet(**d["metrics"]) if d.get("metrics") else None
        return cls(**d)


@dataclass
class ReportRow:
    model: str
    asset: str
    loss: str
    n_seeds: int
    mean: dict
    std: dict
    single_seed: bool
    failed_seeds: list[int]

    def cells(self) -> list[str]:
        out = [MODEL_LABELS.get(self.model, self.model), self.asset,
               "N/A" if self.model == "naive" else LOSS_LABELS.get(self.loss, self.loss)]
        for k in ("abs_vwap_loss", "quad_vwap_loss", "r2_volume", "seconds"):
            out += [format_scaled(self.mean[k]), format_scaled(self.std[k])]
        return out


REPORT_HEADER = [
    "Model Type", "Asset", "Optimization",
    "Abs. VWAP Loss (1e-2) Mean", "Std", "Quad. VWAP Loss (1e-4) Mean", "Std",
    "R2 Vol. Curve Mean", "Std", "Training Time (s) Mean", "Std",
]


def aggregate(results: Sequence[RunResult]) -> list[ReportRow]:
    """Group runs by (asset, model, loss); mean and sample std over seeds.

    Fewer than two successful seeds gives std 0 with ``single_seed`` set.
    Failed runs are excluded and listed.
    """
    groups: dict[tuple, list[RunResult]] = {}
    for r in results:
        groups.setdefault((r.asset, r.model, r.loss), []).append(r)
    rows = []
    for (asset, model, lossname), runs in groups.items():
        good = [r for r in runs if r.ok]
        failed = sorted(r.seed for r in runs if not r.ok)
        if not good:
            rows.append(ReportRow(model, asset, lossname, 0, {}, {}, True, failed))
            continue
        cols = {
            "abs_vwap_loss": [r.metrics.abs_vwap_loss * 1e2 for r in good],
            "quad_vwap_loss": [r.metrics.quad_vwap_loss * 1e4 for r in good],
            "r2_volume": [r.metrics.r2_volume for r in good],
            "seconds": [r.seconds for r in good],
        }
        single = len(good) < 2
        mean = {k: float(np.mean(v)) for k, v in cols.items()}
        std = {k: 0.0 if single else float(np.std(v, ddof=1)) for k, v in cols.items()}
        rows.append(ReportRow(model, asset, lossname, len(good), mean, std, single, failed))
    return sorted(rows, key=_row_order)


def _row_order(r: ReportRow):
    m = MODEL_NAMES.index(r.model) if r.model in MODEL_NAMES else len(MODEL_NAMES)
    losses = list(LOSS_LABELS)
    k = losses.index(r.loss) if r.loss in losses else -1
    return (r.asset, m, r.model, k, r.loss)


def write_report(rows: Sequence[ReportRow], out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    body = [r.cells() for r in rows if r.n_seeds > 0]
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER + ["n_seeds", "flags"])
        for r, cells in zip([r for r in rows if r.n_seeds > 0], body):
            w.writerow(cells + [r.n_seeds, _flags(r)])
    (out_dir / "report.txt").write_text(render_table(rows))


def _flags(r: ReportRow) -> str:
    flags = []
    if r.single_seed:
        flags.append("single-seed-std")
    if r.failed_seeds:
        flags.append("failed-seeds:" + "/".join(map(str, r.failed_seeds)))
    return ";".join(flags)


def render_table(rows: Sequence[ReportRow]) -> str:
    body = [r.cells() + [_flags(r)] for r in rows if r.n_seeds > 0]
    header = REPORT_HEADER + ["Flags"]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)] if body else [len(h) for h in header]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip() for row in body]
    failed = [r for r in rows if r.n_seeds == 0]
    for r in failed:
        lines.append(f"# all seeds failed: {r.model} / {r.asset} / {r.loss}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Dataset:
    asset: str
    train: WindowSet
    validation: WindowSet
    test: WindowSet


def run_dir(out_dir: Path, asset: str, model: str, lossname: str, seed: int) -> Path:
    # naive runs carry the label "n/a", which must not become two path parts
    return out_dir / "runs" / asset / model / lossname.replace("/", "") / f"seed_{seed}"


def run_one(
    data: Dataset, spec: ModelSpec, kind: LossKind, cfg: TrainConfig, seed: int, out_dir: str | Path | None = None
) -> RunResult:
    """Train + evaluate one (dataset, model, loss, seed) cell; failures are captured."""
    lossname = "n/a" if spec.kind == "naive" else LossKind(kind).value
    try:
        t0 = time.perf_counter()
        store, hist = train(spec, data.train, data.validation, cfg, seed, kind)
        seconds = 0.0 if spec.kind == "naive" else time.perf_counter() - t0
        model = Allocator(spec)
        ev = evaluate(model, store, data.test)
        result = RunResult(data.asset, spec.name, lossname, seed, ev.metrics, hist.best_val_loss,
                           hist.epochs, seconds, hist.stop_reason)
    except Exception as exc:  # one failed cell must not sink the grid
        log.exception("run failed: %s %s %s seed %d", data.asset, spec.name, lossname, seed)
        return RunResult(data.asset, spec.name, lossname, seed, None, error=f"{type(exc).__name__}: {exc}")
    if out_dir is not None:
        save_run_artifacts(Path(out_dir), result, spec, store, hist, ev)
    return result


def save_run_artifacts(out_dir: Path, result: RunResult, spec: ModelSpec, store: ParamStore,
                       hist: History, ev: Evaluation) -> Path:
    from .objectives import write_allocation_stats_csv, write_slippage_csv

    d = run_dir(out_dir, result.asset, result.model, result.loss, result.seed)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(store, d / "checkpoint.json", meta={"model": spec.to_dict(), "loss": result.loss,
                                                         "seed": result.seed})
    hist.write_csv(d / "history.csv")
    (d / "result.json").write_text(json.dumps(result.to_dict(), indent=2))
    write_slippage_csv(ev, d / "slippage.csv")
    write_allocation_stats_csv(ev, d / "allocation_stats.csv")
    return d


def run_experiment(
    datasets: Sequence[Dataset],
    specs: Sequence[ModelSpec],
    losses: Sequence[LossKind],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    jobs: int = 1,
) -> tuple[list[RunResult], list[ReportRow]]:
    tasks = []
    for data in datasets:
        for spec in specs:
            for kind in ([LossKind.ABSOLUTE] if spec.kind == "naive" else losses):
                for seed in cfg.seeds:
                    tasks.append((data, spec, kind, cfg, seed, out_dir))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    rows = aggregate(results)
    if out_dir is not None:
        write_report(rows, out_dir)
    return results, rows


def _run_task(task) -> RunResult:
    return run_one(*task)


def load_results(out_dir: str | Path) -> list[RunResult]:
    """Every stored per-seed result under ``out_dir/runs`` in a stable order."""
    paths = sorted(Path(out_dir).glob("runs/*/*/*/seed_*/result.json"))
    return [RunResult.from_dict(json.loads(p.read_text())) for p in paths]
