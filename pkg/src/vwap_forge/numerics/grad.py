"""Gradient entry points: the taped reverse pass and its finite-difference oracle."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import tape
from .params import ParamStore
from .tape import NonFiniteError, Var

Graph = Callable[[Mapping[str, Var], object], Var]


def bind(params: ParamStore, grad: bool = True) -> dict[str, Var]:
    if grad:
        return {name: tape.leaf(v) for name, v in params.values.items()}
    return {name: tape.as_var(v) for name, v in params.values.items()}


def forward(graph: Graph, params: ParamStore, inputs) -> float:
    out = graph(bind(params, grad=False), inputs)
    return float(out.value)


def forward_backward(graph: Graph, params: ParamStore, inputs) -> float:
    """Evaluate ``graph(bound_params, inputs)`` to a scalar and write the
    gradient of that scalar into ``params.grads`` (overwriting)."""
    leaves = bind(params, grad=True)
    loss = graph(leaves, inputs)
    if loss.value.size != 1:
        raise tape.ShapeError(f"graph must return a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.value):
        bad = tape.first_nonfinite(loss)
        where = f"{bad.op} node #{bad.id} shape {bad.shape}" if bad is not None else "loss"
        raise NonFiniteError(f"non-finite value first produced by {where}")
    tape.backward(loss)
    for name, node in leaves.items():
        g = params.grads[name]
        if node.grad is None:
            g.fill(0.0)
            continue
        if not np.all(np.isfinite(node.grad)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        g[...] = node.grad
    return float(loss.value)


def finite_diff_grad(
    loss_fn: Callable[[ParamStore], float],
    params: ParamStore,
    step: float = 1e-5,
    names: list[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central differences ``(f(w+eps) - f(w-eps)) / 2eps`` for every scalar
    entry of the selected parameters. Values are restored afterwards."""
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    out = {}
    for name in names or params.names():
        w = params.values[name]
        flat = w.reshape(-1)
        g = np.zeros(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = loss_fn(params)
            flat[k] = orig - step
            fm = loss_fn(params)
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss when perturbing {name}[{k}]")
            g[k] = (fp - fm) / (2.0 * step)
        out[name] = g.reshape(w.shape)
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``max |a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero
    entries from dominating."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
