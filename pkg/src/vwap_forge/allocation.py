"""Execution-curve heads: naive uniform, static softmax, and the dynamic
sequential allocator that adjusts a learnable base curve step by step."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .features import N_FEATURES
from .numerics import ParamStore, bind, tape
from .numerics.tape import Var
from .recurrent import LSTMCell, TKANCell

MODEL_NAMES = ("naive", "static-lstm", "static-tkan", "dynamic-lstm", "dynamic-tkan")


class AllocationError(ValueError):
    pass


@dataclass(frozen=True)
class TKANConfig:
    n_sublayers: int = 2
    kan_in: int = 20
    kan_out: int = 20
    grid_size: int = 5
    spline_order: int = 3


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "dynamic"          # naive | static | dynamic
    cell: str | None = "lstm"      # lstm | tkan (None for naive)
    lookback: int = 120
    horizon: int = 12
    n_features: int = N_FEATURES
    hidden: int = 100
    mlp_hidden: int = 32
    tkan: TKANConfig = field(default_factory=TKANConfig)

    def __post_init__(self):
        if self.kind not in ("naive", "static", "dynamic"):
            raise AllocationError(f"unknown allocator kind {self.kind!r}")
        if self.kind != "naive" and self.cell not in ("lstm", "tkan"):
            raise AllocationError(f"unknown recurrent cell {self.cell!r}")
        if self.horizon < 1:
            raise AllocationError("horizon must be >= 1")

    @property
    def name(self) -> str:
        return "naive" if self.kind == "naive" else f"{self.kind}-{self.cell}"

    @property
    def seq_len(self) -> int:
        return self.lookback + self.horizon - 1

    @classmethod
    def from_name(cls, name: str, **kw) -> "ModelSpec":
        if name not in MODEL_NAMES:
            raise AllocationError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
        if name == "naive":
            return cls(kind="naive", cell=None, **kw)
        kind, cell = name.split("-")
        return cls(kind=kind, cell=cell, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["tkan"] = TKANConfig(**d.get("tkan", {}))
        return cls(**d)


# --- building blocks ---------------------------------------------------------------

def base_curve(logits: Var) -> Var:
    """Learnable base volume curve, softmax of unconstrained logits."""
    return tape.softmax(logits, axis=-1)


@dataclass(frozen=True)
class AdjustmentNet:
    """``h - 1`` independent MLPs. Net ``i`` reads ``[hidden ; v_1..v_i]``."""

    m: int
    horizon: int
    width: int = 32
    prefix: str = "allocation.adjust"

    def init_params(self, store: ParamStore) -> None:
        for i in range(self.horizon - 1):
            P = f"{self.prefix}.{i}"
            store.glorot(f"{P}.W1", self.m + i, self.width)
            store.zeros(f"{P}.b1", self.width)
            store.glorot(f"{P}.W2", self.width, self.width)
            store.zeros(f"{P}.b2", self.width)
            store.glorot(f"{P}.W3", self.width, 1)
            store.zeros(f"{P}.b3", 1)

    def __call__(self, p: Mapping[str, Var], i: int, inp: Var) -> Var:
        P = f"{self.prefix}.{i}"
        z = tape.relu(inp @ p[f"{P}.W1"] + p[f"{P}.b1"])
        z = tape.relu(z @ p[f"{P}.W2"] + p[f"{P}.b2"])
        return z @ p[f"{P}.W3"] + p[f"{P}.b3"]


def clip_step(alpha: Var, base_i: Var, spent: Var) -> Var:
    """One allocation step: ``alpha * base_i`` clipped to ``[0, 1 - spent]``."""
    return tape.clamp(alpha * base_i, 0.0, 1.0 - spent)


def sequential_allocate(alpha, base) -> Var:
    """Allocate with fixed adjustment factors.

    ``alpha`` has shape ``(B, h-1)`` (or ``(h-1,)``) and ``base`` shape
    ``(h,)``; steps ``1..h-1`` go through :func:`clip_step` and the last step
    takes whatever volume remains.
    """
    base = tape.as_var(base)
    alpha = tape.as_var(np.atleast_2d(alpha) if not isinstance(alpha, Var) else alpha)
    h = base.shape[-1]
    if alpha.shape[-1] != h - 1:
        raise AllocationError(f"need {h - 1} adjustment factors, got {alpha.shape[-1]}")
    b = tape.unstack(base, axis=0)
    spent = tape.as_var(np.zeros((alpha.shape[0], 1)))
    vs = []
    for i in range(h - 1):
        v = clip_step(alpha[:, i:i + 1], b[i], spent)
        spent = spent + v
        vs.append(v)
    vs.append(1.0 - spent)
    return tape.concat(vs, axis=1)


# --- allocator models -----------------------------------------------------------------

class Allocator:
    """Maps feature windows ``(B, l+h-1, d)`` to execution curves ``(B, h)``."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.cell = None
        if spec.kind != "naive":
            if spec.cell == "lstm":
                self.cell = LSTMCell(spec.n_features, spec.hidden)
            else:
                t = spec.tkan
                self.cell = TKANCell(
                    spec.n_features, spec.hidden, t.n_sublayers, t.kan_in, t.kan_out, t.grid_size, t.spline_order
                )
        self.adjust = AdjustmentNet(spec.hidden, spec.horizon, spec.mlp_hidden) if spec.kind == "dynamic" else None

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def has_params(self) -> bool:
        return self.spec.kind != "naive"

    def init_params(self, seed: int) -> ParamStore:
        store = ParamStore(seed)
        if self.cell is not None:
            self.cell.init_params(store)
        if self.spec.kind == "dynamic":
            store.zeros("allocation.base_logits", self.spec.horizon)
            self.adjust.init_params(store)
        elif self.spec.kind == "static":
            store.zeros("allocation.static.W", self.spec.hidden, self.spec.horizon)
            store.zeros("allocation.static.b", self.spec.horizon)
        return store

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        want = (self.spec.seq_len, self.spec.n_features)
        if x.ndim != 3 or x.shape[1:] != want:
            raise AllocationError(f"expected features (B, {want[0]}, {want[1]}), got {x.shape}")
        return x

    def forward(self, p: Mapping[str, Var], x) -> Var:
        x = self._check(x)
        s = self.spec
        B = x.shape[0]
        if s.kind == "naive":
            return tape.as_var(np.full((B, s.horizon), 1.0 / s.horizon))
        if s.kind == "static":
            H = self.cell.scan(p, x, steps=s.lookback)
            last = H[:, s.lookback - 1]
            return tape.softmax(last @ p["allocation.static.W"] + p["allocation.static.b"], axis=-1)
        return self._dynamic(p, x)

    def _dynamic(self, p: Mapping[str, Var], x: np.ndarray) -> Var:
        s = self.spec
        l, h = s.lookback, s.horizon
        vb = tape.unstack(base_curve(p["allocation.base_logits"]), axis=0)
        if h == 1:
            return tape.as_var(np.ones((x.shape[0], 1)))
        # step i (1-based) reads the hidden state after row l+i-1
        H = self.cell.scan(p, x, steps=l + h - 2)
        hidden = tape.unstack(H[:, l - 1:l + h - 2], axis=1)
        spent = tape.as_var(np.zeros((x.shape[0], 1)))
        last = vb[h - 1]
        vs: list[Var] = []
        for i in range(h - 1):
            inp = hidden[i] if i == 0 else tape.concat([hidden[i], *vs], axis=1)
            alpha = 1.0 + tape.tanh(self.adjust(p, i, inp))
            v = clip_step(alpha, vb[i], spent)
            spent = spent + v
            # remainder written as vb_h plus what earlier steps left over;
            # equals 1 - spent since the base sums to one, but stays exactly
            # vb_h when no step was adjusted
            last = last + (vb[i] - v)
            vs.append(v)
        vs.append(last)
        return tape.concat(vs, axis=1)

    def allocate(self, store: ParamStore, x, batch_size: int = 512) -> np.ndarray:
        """Inference without gradient bookkeeping."""
        x = self._check(x)
        p = bind(store, grad=False)
        out = [self.forward(p, x[i:i + batch_size]).value for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.spec.horizon))

    def decided_steps(self, t: int) -> int:
        """How many allocations are final once ``t`` feature rows are known."""
        s = self.spec
        if t < s.lookback:
            raise AllocationError(f"execution starts after row {s.lookback}; got t={t}")
        if t > s.seq_len:
            raise AllocationError(f"t={t} beyond the last feature row {s.seq_len}")
        if s.kind != "dynamic":
            return s.horizon
        k = t - s.lookback + 1
        return s.horizon if k >= s.horizon - 1 else k

    def deploy_step(self, store: ParamStore, x_prefix, t: int) -> np.ndarray:
        """Allocations decided after observing feature rows ``1..t``.

        Rows after ``t`` (if present) are replaced by zeros before the full
        forward pass; causality makes the decided prefix identical to a run
        on complete data.
        """
        k = self.decided_steps(t)
        x_prefix = np.asarray(x_prefix, dtype=np.float64)
        if x_prefix.ndim == 3:
            if x_prefix.shape[0] != 1:
                raise AllocationError("deploy_step takes a single window")
            x_prefix = x_prefix[0]
        if x_prefix.shape[0] < t:
            raise AllocationError(f"only {x_prefix.shape[0]} feature rows observed, t={t}")
        padded = np.zeros((self.spec.seq_len, self.spec.n_features))
        padded[:t] = x_prefix[:t]
        return self.allocate(store, padded[None])[0, :k]


def naive_allocate(h: int) -> np.ndarray:
    if h < 1:
        raise AllocationError("horizon must be >= 1")
    return np.full(h, 1.0 / h)
