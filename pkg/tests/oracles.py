"""Independent reference implementations used to derive frozen test values.

Nothing here imports the package under test; everything is scalar Python
(or scipy for B-splines) so mistakes in the vectorised code cannot leak in.
"""
from __future__ import annotations

import datetime as dt
import math

import numpy as np
from scipy.interpolate import BSpline


def sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def silu(z: float) -> float:
    return z * sigmoid(z)


# --- B-splines -----------------------------------------------------------------

def uniform_knots(grid_size: int, order: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    step = (hi - lo) / grid_size
    return np.array([lo + step * j for j in range(-order, grid_size + order + 1)])


def de_boor_basis(x: float, knots: np.ndarray, order: int, index: int) -> float:
    """Value of basis function ``index`` at ``x`` via scipy's De Boor evaluator."""
    coef = np.zeros(len(knots) - order - 1)
    coef[index] = 1.0
    return float(BSpline(knots, coef, order, extrapolate=False)(x))


def kan_scalar(s: float, w_base: float, coefs: list[float], grid_size: int = 5, order: int = 3) -> float:
    """1 -> 1 KAN unit: SiLU base path plus spline of the clamped input."""
    knots = uniform_knots(grid_size, order)
    xc = min(max(s, knots[order]), knots[-order - 1])
    spline = sum(c * de_boor_basis(xc, knots, order, j) for j, c in enumerate(coefs))
    return w_base * silu(s) + spline


# --- recurrent cells -----------------------------------------------------------

def lstm_step_scalar(x: float, h: float, c: float, w: dict) -> tuple[float, float]:
    """d = m = 1 LSTM step. ``w`` has W_g, U_g, b_g for g in f, i, o, c."""
    f = sigmoid(w["W_f"] * x + w["U_f"] * h + w["b_f"])
    i = sigmoid(w["W_i"] * x + w["U_i"] * h + w["b_i"])
    o = sigmoid(w["W_o"] * x + w["U_o"] * h + w["b_o"])
    g = math.tanh(w["W_c"] * x + w["U_c"] * h + w["b_c"])
    c = f * c + i * g
    return o * math.tanh(c), c


def tkan_step_scalar(x: float, h: float, c: float, sub_h: float, w: dict) -> tuple[float, float, float]:
    """One sublayer, every width 1. Returns (h, c, sub_h)."""
    s = w["W_x"] * x + w["W_h"] * sub_h
    o_l = kan_scalar(s, w["base"], w["spline"])
    sub_h = w["W_hh"] * sub_h + w["W_hz"] * o_l
    f = sigmoid(w["W_f"] * x + w["U_f"] * h + w["b_f"])
    i = sigmoid(w["W_i"] * x + w["U_i"] * h + w["b_i"])
    cand = math.tanh(w["W_c"] * o_l + w["b_c"])
    o = sigmoid(w["W_o"] * o_l + w["b_o"])
    c = f * c + i * cand
    return o * math.tanh(c), c, sub_h


# --- allocation -------------------------------------------------------------------

def sequential_allocation(alpha: list[float], base: list[float]) -> list[float]:
    v, spent = [], 0.0
    for a, b in zip(alpha, base[:-1]):
        x = min(max(a * b, 0.0), 1.0 - spent)
        v.append(x)
        spent += x
    v.append(1.0 - spent)
    return v


# --- metrics --------------------------------------------------------------------

def slippage(prices, v, vol) -> float:
    paid = sum(p * x for p, x in zip(prices, v))
    market = sum(p * x for p, x in zip(prices, vol))
    return (paid - market) / market


def metrics(prices, v, vol) -> tuple[float, float, float]:
    """(mean |s|, mean s^2, R^2 vs uniform) by plain loops."""
    s = [slippage(p, a, b) for p, a, b in zip(prices, v, vol)]
    sse = sst = 0.0
    for a, b in zip(v, vol):
        h = len(b)
        for x, y in zip(a, b):
            sse += (x - y) ** 2
            sst += (y - 1.0 / h) ** 2
    return sum(abs(x) for x in s) / len(s), sum(x * x for x in s) / len(s), 1.0 - sse / sst


# --- features -----------------------------------------------------------------

def feature_row(open_time, volume, bin_vwap, inactive, start: int, row: int, rolling_window: int) -> list[float]:
    """Feature row ``row`` of the window starting at bar ``start``."""
    i = start + row
    denom = sum(float(volume[k]) for k in range(start - rolling_window, start)) / rolling_window
    when = dt.datetime.fromtimestamp(int(open_time[i]) / 1000, tz=dt.timezone.utc)
    ha = 2 * math.pi * when.hour / 24
    da = 2 * math.pi * when.weekday() / 7
    ret = 0.0 if inactive[i] else bin_vwap[i] / bin_vwap[i - 1] - 1.0
    return [volume[i] / denom, math.sin(ha), math.cos(ha), math.sin(da), math.cos(da), ret]


# --- training callbacks ----------------------------------------------------------

def simulate_plateau(val_losses, patience=10, lr_patience=5, factor=0.25, floor=2.5e-5, min_delta=1e-5, lr=1e-3):
    """Returns (stop_epoch, [(epoch, new_lr) for each reduction])."""
    best = math.inf
    wait = wait_lr = 0
    cuts = []
    for epoch, val in enumerate(val_losses, start=1):
        if val < best - min_delta:
            best, wait, wait_lr = val, 0, 0
            continue
        wait += 1
        wait_lr += 1
        if wait_lr >= lr_patience:
            lr = max(lr * factor, floor)
            cuts.append((epoch, lr))
            wait_lr = 0
        if wait >= patience:
            return epoch, cuts
    return len(val_losses), cuts
