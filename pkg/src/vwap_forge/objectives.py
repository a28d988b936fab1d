"""VWAP slippage, the three training losses and evaluation metrics."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .numerics import tape
from .numerics.tape import Var


class ObjectiveError(ValueError):
    pass


class LossKind(str, Enum):
    ABSOLUTE = "absolute"
    QUADRATIC = "quadratic"
    VOLUME_CURVE = "volume-curve"

    @classmethod
    def parse(cls, s: str) -> "LossKind":
        s = s.replace("_vwap", "").replace("_", "-")
        try:
            return cls(s)
        except ValueError:
            raise ObjectiveError(f"unknown loss {s!r}; choose absolute, quadratic or volume-curve") from None


def market_vwap(prices: np.ndarray, vol_fracs: np.ndarray) -> np.ndarray:
    vwap = np.sum(prices * vol_fracs, axis=-1)
    if np.any(vwap <= 0):
        raise ObjectiveError("market VWAP must be positive")
    return vwap


def _relative_deviation(prices: np.ndarray, vol_fracs: np.ndarray) -> np.ndarray:
    mkt = market_vwap(prices, vol_fracs)
    return (prices - mkt[..., None]) / mkt[..., None]


def slippage(prices, v, vol_fracs) -> np.ndarray | float:
    """Relative signed slippage ``(sum P v - sum P V) / sum P V`` per window.

    Allocation curves sum to one, so this is evaluated as
    ``sum v (P - VWAP) / VWAP``, which avoids cancelling against 1.
    """
    prices = np.asarray(prices, dtype=np.float64)
    vol_fracs = np.asarray(vol_fracs, dtype=np.float64)
    out = np.sum(np.asarray(v) * _relative_deviation(prices, vol_fracs), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def slippage_var(prices: np.ndarray, v: Var, vol_fracs: np.ndarray) -> Var:
    """Differentiable slippage of a ``(B, h)`` allocation Var, shape ``(B,)``."""
    return tape.sum_(v * _relative_deviation(prices, vol_fracs), axis=1)


def loss_var(kind: LossKind, prices: np.ndarray, v: Var, vol_fracs: np.ndarray) -> Var:
    if prices.shape[0] == 0:
        raise ObjectiveError("empty batch")
    if not np.allclose(vol_fracs.sum(axis=1), 1.0, atol=1e-9):
        raise ObjectiveError("degenerate window in batch: volume fractions do not sum to 1")
    kind = LossKind(kind)
    if kind is LossKind.VOLUME_CURVE:
        return tape.mean(tape.square(v - vol_fracs))
    s = slippage_var(prices, v, vol_fracs)
    if kind is LossKind.ABSOLUTE:
        return tape.mean(tape.absolute(s))
    return tape.mean(tape.square(s))


def loss(kind: LossKind, prices, v, vol_fracs) -> float:
    prices = np.atleast_2d(np.asarray(prices, dtype=np.float64))
    vol_fracs = np.atleast_2d(np.asarray(vol_fracs, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    return float(loss_var(kind, prices, tape.as_var(v), vol_fracs).value)


def r2_volume_curve(predictions, targets) -> float:
    """R^2 against the uniform curve: ``1 - SSE / sum (V - 1/h)^2``.

    With this baseline the naive uniform allocator scores exactly 0.
    """
    v = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    V = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if v.shape != V.shape or v.shape[0] == 0:
        raise ObjectiveError(f"shape mismatch or empty: {v.shape} vs {V.shape}")
    h = V.shape[1]
    denom = np.sum((V - 1.0 / h) ** 2)
    if denom == 0:
        raise ObjectiveError("R^2 undefined: every target curve is uniform")
    return float(1.0 - np.sum((v - V) ** 2) / denom)


def slippage_bound_terms(prices, v, vol_fracs) -> tuple[np.ndarray, np.ndarray]:
    """Diagnostic split of |slippage| (relative units) into a price-deviation
    term ``sum |(P_t - VWAP) v_t|`` and an allocation-error term
    ``sum |VWAP (v_t - V_t)|``, both divided by the market VWAP.

    Per-bin prices are already bin VWAPs, so the per-interval VWAP is ``P_t``
    and the price-deviation term measures ``P_t`` against the window VWAP.
    """
    prices = np.atleast_2d(prices)
    v = np.atleast_2d(v)
    vol_fracs = np.atleast_2d(vol_fracs)
    mkt = market_vwap(prices, vol_fracs)[:, None]
    price_term = np.sum(np.abs((prices - mkt) * v), axis=1) / mkt[:, 0]
    alloc_term = np.sum(np.abs(prices * (v - vol_fracs)), axis=1) / mkt[:, 0]
    return price_term, alloc_term


@dataclass
class MetricSet:
    abs_vwap_loss: float
    quad_vwap_loss: float
    r2_volume: float
    n_windows: int

    def __post_init__(self):
        if self.n_windows < 1:
            raise ObjectiveError("MetricSet needs at least one window")

    def scaled(self) -> dict:
        """Reporting units: abs x1e2, quad x1e4."""
        return {
            "abs_vwap_loss": self.abs_vwap_loss * 1e2,
            "quad_vwap_loss": self.quad_vwap_loss * 1e4,
            "r2_volume": self.r2_volume,
        }

    def to_dict(self) -> dict:
        return asdict(self)


def metric_set(prices, v, vol_fracs) -> MetricSet:
    s = slippage(prices, v, vol_fracs)
    s = np.atleast_1d(s)
    return MetricSet(
        abs_vwap_loss=float(np.mean(np.abs(s))),
        quad_vwap_loss=float(np.mean(s * s)),
        r2_volume=r2_volume_curve(v, vol_fracs),
        n_windows=len(s),
    )


def format_scaled(x: float) -> str:
    """Table formatting: eight decimals."""
    return f"{x:.8f}"


@dataclass
class Evaluation:
    metrics: MetricSet
    allocations: np.ndarray
    signed_slippage: np.ndarray
    naive_slippage: np.ndarray
    end_times: np.ndarray

    @property
    def abs_minus_naive(self) -> np.ndarray:
        return np.abs(self.signed_slippage) - np.abs(self.naive_slippage)


def evaluate(model, store, windows, batch_size: int = 512) -> Evaluation:
    """Run ``model`` over every window of ``windows`` and score it."""
    if len(windows) == 0:
        raise ObjectiveError("cannot evaluate on an empty dataset")
    allocs, prices, fracs = [], [], []
    for start in range(0, len(windows), batch_size):
        idx = np.arange(start, min(start + batch_size, len(windows)))
        x, p, f = windows.batch(idx)
        allocs.append(model.allocate(store, x, batch_size=batch_size))
        prices.append(p)
        fracs.append(f)
    v = np.concatenate(allocs)
    P = np.concatenate(prices)
    V = np.concatenate(fracs)
    h = V.shape[1]
    return Evaluation(
        metrics=metric_set(P, v, V),
        allocations=v,
        signed_slippage=slippage(P, v, V),
        naive_slippage=slippage(P, np.full_like(V, 1.0 / h), V),
        end_times=windows.end_times(),
    )


SLIPPAGE_COLUMNS = ["window_end_time", "signed_slippage", "abs_slippage", "abs_slippage_minus_naive"]


def write_slippage_csv(ev: Evaluation, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SLIPPAGE_COLUMNS)
        for t, s, d in zip(ev.end_times, ev.signed_slippage, ev.abs_minus_naive):
            w.writerow([int(t), repr(float(s)), repr(float(abs(s))), repr(float(d))])


def write_allocation_stats_csv(ev: Evaluation, path: str | Path) -> None:
    """Per-step mean, std and 5/95% quantiles of the executed curves."""
    v = ev.allocations
    q05, q95 = np.quantile(v, [0.05, 0.95], axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "mean", "std", "q05", "q95"])
        for i in range(v.shape[1]):
            w.writerow([i + 1, repr(float(v[:, i].mean())), repr(float(v[:, i].std())),
                        repr(float(q05[i])), repr(float(q95[i]))])
