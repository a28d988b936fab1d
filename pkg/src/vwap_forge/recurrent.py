"""Recurrent cores producing the causal hidden-state sequence.

Both cells map a feature tensor ``(B, T, d)`` to hidden states ``(B, T, m)``
with zero initial state. Parameters live in a :class:`ParamStore` under
``recurrent.<cell>.<tensor>``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from .numerics import ParamStore, tape
from .numerics.tape import Var, _sigmoid


class RecurrentInputError(ValueError):
    pass


def _check_input(x: np.ndarray, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != d:
        raise RecurrentInputError(f"expected features of shape (B, T, {d}), got {x.shape}")
    bad = ~np.isfinite(x)
    if bad.any():
        t = int(np.argwhere(bad)[0][1])
        raise RecurrentInputError(f"non-finite input at timestep {t}")
    return x


# --- LSTM -------------------------------------------------------------------

LSTM_GATES = ("f", "i", "o", "c")


@dataclass(frozen=True)
class LSTMCell:
    d: int
    m: int
    prefix: str = "recurrent.lstm"

    def init_params(self, store: ParamStore) -> None:
        for g in LSTM_GATES:
            store.glorot(f"{self.prefix}.W_{g}", self.d, self.m)
            store.glorot(f"{self.prefix}.U_{g}", self.m, self.m)
            store.zeros(f"{self.prefix}.b_{g}", self.m)

    def scan(self, p: Mapping[str, Var], x, steps: int | None = None) -> Var:
        """Hidden states ``(B, steps, m)``; ``steps`` defaults to all rows."""
        x = _check_input(x, self.d)
        if steps is not None:
            x = x[:, :steps]
        W = tape.concat([p[f"{self.prefix}.W_{g}"] for g in LSTM_GATES], axis=1)
        U = tape.concat([p[f"{self.prefix}.U_{g}"] for g in LSTM_GATES], axis=1)
        b = tape.concat([p[f"{self.prefix}.b_{g}"] for g in LSTM_GATES], axis=0)
        return lstm_recurrence(tape.matmul(x, W) + b, U)


def lstm_recurrence(zx: Var, U: Var) -> Var:
    """Run the LSTM recursion over pre-projected inputs ``zx = xW + b``.

    Gate blocks along the last axis are ordered forget, input, output,
    candidate. Backward is hand-written BPTT.
    """
    B, T, four_m = zx.shape
    m = four_m // 4
    Uv = U.value
    zxv = zx.value
    H = np.empty((B, T, m))
    C = np.empty((B, T, m))
    gates = np.empty((B, T, four_m))
    tanh_c = np.empty((B, T, m))
    h = np.zeros((B, m))
    c = np.zeros((B, m))
    for t in range(T):
        z = zxv[:, t] + h @ Uv
        a = gates[:, t]
        a[:, :3 * m] = _sigmoid(z[:, :3 * m])
        a[:, 3 * m:] = np.tanh(z[:, 3 * m:])
        c = a[:, :m] * c + a[:, m:2 * m] * a[:, 3 * m:]
        tc = np.tanh(c)
        h = a[:, 2 * m:3 * m] * tc
        C[:, t] = c
        tanh_c[:, t] = tc
        H[:, t] = h

    def vjp(dH):
        dzx = np.empty_like(zxv)
        dU = np.zeros_like(Uv)
        dh_next = np.zeros((B, m))
        dc_next = np.zeros((B, m))
        Ut = Uv.T
        for t in range(T - 1, -1, -1):
            a = gates[:, t]
            f, i, o, g = a[:, :m], a[:, m:2 * m], a[:, 2 * m:3 * m], a[:, 3 * m:]
            tc = tanh_c[:, t]
            c_prev = C[:, t - 1] if t > 0 else 0.0
            h_prev = H[:, t - 1] if t > 0 else None
            dh = dH[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dzx[:, t]
            dz[:, :m] = dc * c_prev * f * (1.0 - f)
            dz[:, m:2 * m] = dc * g * i * (1.0 - i)
            dz[:, 2 * m:3 * m] = dh * tc * o * (1.0 - o)
            dz[:, 3 * m:] = dc * i * (1.0 - g * g)
            dc_next = dc * f
            if h_prev is not None:
                dU += h_prev.T @ dz
            dh_next = dz @ Ut
        return dzx, dU

    return tape.custom(H, (zx, U), vjp, "lstm_scan")


# --- KAN layer ----------------------------------------------------------------

@dataclass(frozen=True)
class KANLayer:
    """``out_j = sum_i w_base[i,j] * silu(s_i) + sum_i sum_c coef[i,c,j] * B_c(clamp(s_i))``

    with order-``spline_order`` B-splines on a uniform grid of ``grid_size``
    intervals over [-1, 1], extended by ``spline_order`` knots on each side
    so every point of the closed range has full basis support.
    """

    n_in: int
    n_out: int
    grid_size: int = 5
    spline_order: int = 3
    prefix: str = "kan"

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.spline_order

    def knots(self) -> np.ndarray:
        k, G = self.spline_order, self.grid_size
        step = 2.0 / G
        return -1.0 + step * np.arange(-k, G + k + 1)

    def init_params(self, store: ParamStore) -> None:
        store.glorot(f"{self.prefix}.base", self.n_in, self.n_out)
        store.glorot(f"{self.prefix}.spline", self.n_in * self.n_basis, self.n_out)

    def __call__(self, p: Mapping[str, Var], s: Var) -> Var:
        basis = bspline_basis(s, self.knots(), self.spline_order)
        flat = tape.reshape(basis, basis.shape[:-2] + (self.n_in * self.n_basis,))
        return tape.silu(s) @ p[f"{self.prefix}.base"] + flat @ p[f"{self.prefix}.spline"]


def _local_basis(u: np.ndarray, order: int) -> np.ndarray:
    """The ``order + 1`` nonzero uniform B-splines at local coordinate
    ``u`` in [0, 1] of a knot interval (de Boor triangle)."""
    u = u[..., None]
    vals = np.ones(u.shape)
    for k in range(1, order + 1):
        r = np.arange(k + 1)
        pad = np.zeros(u.shape)
        vals = (np.concatenate([pad, vals], axis=-1) * (u + k - r)
                + np.concatenate([vals, pad], axis=-1) * (r + 1 - u)) / k
    return vals


@lru_cache(maxsize=None)
def _power_matrix(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Coefficients turning ``[1, u, .., u^k]`` into local basis values and
    their ``u``-derivatives."""
    nodes = np.linspace(0.0, 1.0, order + 1)
    coef = np.linalg.solve(np.vander(nodes, order + 1, increasing=True), _local_basis(nodes, order))
    dcoef = coef[1:] * np.arange(1, order + 1)[:, None]
    return coef, dcoef


def _basis_values(x: np.ndarray, knots: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Basis values and their derivatives on uniform ``knots``.

    ``x`` must lie inside the clamped range. Only the ``order + 1`` nonzero
    functions of each point's knot interval are evaluated, then scattered
    into full-width arrays.
    """
    step = knots[1] - knots[0]
    n_basis = len(knots) - order - 1
    pos = (x.ravel() - knots[0]) / step
    j = np.clip(np.floor(pos).astype(np.int64), order, len(knots) - order - 2)
    powers = np.vander(pos - j, order + 1, increasing=True)
    coef, dcoef = _power_matrix(order)
    rows = np.arange(len(pos))[:, None]
    cols = (j - order)[:, None] + np.arange(order + 1)
    basis = np.zeros((len(pos), n_basis))
    dbasis = np.zeros((len(pos), n_basis))
    basis[rows, cols] = powers @ coef
    if order > 0:
        dbasis[rows, cols] = powers[:, :-1] @ dcoef / step
    return basis.reshape(x.shape + (n_basis,)), dbasis.reshape(x.shape + (n_basis,))


def _clamped_basis(s: np.ndarray, knots: np.ndarray, order: int):
    lo, hi = knots[order], knots[-order - 1]
    basis, dbasis = _basis_values(np.clip(s, lo, hi), knots, order)
    inside = (s > lo) & (s < hi)
    return basis, dbasis, inside


def bspline_basis(s: Var, knots: np.ndarray, order: int) -> Var:
    """B-spline basis of ``clamp(s, lo, hi)`` where [lo, hi] is the knot
    range minus the ``order`` padding knots at each end. Shape ``s.shape + (n_basis,)``."""
    basis, dbasis, inside = _clamped_basis(s.value, knots, order)

    def vjp(g):
        return ((g * dbasis).sum(axis=-1) * inside,)

    return tape.custom(basis, (s,), vjp, "bspline_basis")


# --- TKAN ----------------------------------------------------------------------

@dataclass(frozen=True)
class TKANCell:
    """Recurrent KAN sublayers with private memory feeding a gated global state.

    Per step and sublayer ``l``::

        s_l  = x_t W_x[l] + sub_h[l] W_h[l]
        o_l  = kan_l(s_l)
        sub_h[l] <- sub_h[l] W_hh[l] + o_l W_hz[l]

    then ``r = concat(o_1..o_L)``, ``o_t = sigmoid(r W_o + b_o)``, forget and
    input gates read ``(x_t, h_{t-1})`` as in an LSTM, the candidate cell is
    ``tanh(r W_c + b_c)``, and ``h_t = o_t * tanh(c_t)``.
    """

    d: int
    m: int
    n_sublayers: int = 2
    kan_in: int = 20
    kan_out: int = 20
    grid_size: int = 5
    spline_order: int = 3
    prefix: str = "recurrent.tkan"

    def kan(self, l: int) -> KANLayer:
        return KANLayer(self.kan_in, self.kan_out, self.grid_size, self.spline_order, f"{self.prefix}.sub{l}.kan")

    def init_params(self, store: ParamStore) -> None:
        P = self.prefix
        for l in range(self.n_sublayers):
            store.glorot(f"{P}.sub{l}.W_x", self.d, self.kan_in)
            store.glorot(f"{P}.sub{l}.W_h", self.kan_out, self.kan_in)
            self.kan(l).init_params(store)
            store.glorot(f"{P}.sub{l}.W_hh", self.kan_out, self.kan_out)
            store.glorot(f"{P}.sub{l}.W_hz", self.kan_out, self.kan_out)
        for g in ("f", "i"):
            store.glorot(f"{P}.W_{g}", self.d, self.m)
            store.glorot(f"{P}.U_{g}", self.m, self.m)
            store.zeros(f"{P}.b_{g}", self.m)
        r_width = self.kan_out * self.n_sublayers
        store.glorot(f"{P}.W_c", r_width, self.m)
        store.zeros(f"{P}.b_c", self.m)
        store.glorot(f"{P}.W_o", r_width, self.m)
        store.zeros(f"{P}.b_o", self.m)

    def _weights(self, p: Mapping[str, Var]):
        P = self.prefix
        subs = [
            tuple(p[f"{P}.sub{l}.{n}"] for n in ("W_h", "kan.base", "kan.spline", "W_hh", "W_hz"))
            for l in range(self.n_sublayers)
        ]
        U_fi = tape.concat([p[f"{P}.U_f"], p[f"{P}.U_i"]], axis=1)
        W_co = tape.concat([p[f"{P}.W_c"], p[f"{P}.W_o"]], axis=1)
        b_co = tape.concat([p[f"{P}.b_c"], p[f"{P}.b_o"]], axis=0)
        return subs, U_fi, W_co, b_co

    def _input_projections(self, p: Mapping[str, Var], x: np.ndarray) -> tuple[Var, Var]:
        P = self.prefix
        W_x = tape.concat([p[f"{P}.sub{l}.W_x"] for l in range(self.n_sublayers)], axis=1)
        W_fi = tape.concat([p[f"{P}.W_f"], p[f"{P}.W_i"]], axis=1)
        b_fi = tape.concat([p[f"{P}.b_f"], p[f"{P}.b_i"]], axis=0)
        return tape.matmul(x, W_x), tape.matmul(x, W_fi) + b_fi

    def scan(self, p: Mapping[str, Var], x, steps: int | None = None) -> Var:
        """Hidden states ``(B, steps, m)`` via the fused recurrence."""
        x = _check_input(x, self.d)
        if steps is not None:
            x = x[:, :steps]
        xs, zfi = self._input_projections(p, x)
        subs, U_fi, W_co, b_co = self._weights(p)
        flat = [w for sub in subs for w in sub]
        return tkan_recurrence(xs, zfi, U_fi, W_co, b_co, flat, self.kan(0).knots(), self.spline_order)

    def scan_composed(self, p: Mapping[str, Var], x, steps: int | None = None) -> Var:
        """Same recurrence built from generic tape ops (slow; reference for tests)."""
        x = _check_input(x, self.d)
        if steps is not None:
            x = x[:, :steps]
        m, L, kin = self.m, self.n_sublayers, self.kan_in
        B, T, _ = x.shape
        kans = [self.kan(l) for l in range(L)]
        xs, zfi = self._input_projections(p, x)
        xs, zfi = tape.unstack(xs), tape.unstack(zfi)
        subs, U_fi, W_co, b_co = self._weights(p)
        sub_h = [tape.as_var(np.zeros((B, self.kan_out))) for _ in range(L)]
        h = tape.as_var(np.zeros((B, m)))
        c = tape.as_var(np.zeros((B, m)))
        hs = []
        for t in range(T):
            outs = []
            for l, (W_h, base, spline, W_hh, W_hz) in enumerate(subs):
                s = xs[t][:, l * kin:(l + 1) * kin] + sub_h[l] @ W_h
                basis = bspline_basis(s, kans[l].knots(), self.spline_order)
                flatb = tape.reshape(basis, (B, kin * kans[l].n_basis))
                o_l = tape.silu(s) @ base + flatb @ spline
                sub_h[l] = sub_h[l] @ W_hh + o_l @ W_hz
                outs.append(o_l)
            r = tape.concat(outs, axis=1) if L > 1 else outs[0]
            fi = tape.sigmoid(zfi[t] + h @ U_fi)
            co = r @ W_co + b_co
            cand = tape.tanh(co[:, :m])
            o_t = tape.sigmoid(co[:, m:])
            c = fi[:, :m] * c + fi[:, m:] * cand
            h = o_t * tape.tanh(c)
            hs.append(h)
        return stack_time(hs)


def tkan_recurrence(xs: Var, zfi: Var, U_fi: Var, W_co: Var, b_co: Var, sub_weights: list[Var],
                    knots: np.ndarray, order: int) -> Var:
    """Fused TKAN scan with hand-written BPTT.

    ``xs`` holds the per-sublayer input projections side by side
    ``(B, T, L*kan_in)``, ``zfi`` the forget/input pre-activations from
    ``x``. ``sub_weights`` lists ``W_h, base, spline, W_hh, W_hz`` for each
    sublayer in turn.
    """
    B, T, _ = xs.shape
    m = U_fi.shape[0]
    L = len(sub_weights) // 5
    W = [tuple(w.value for w in sub_weights[5 * l:5 * l + 5]) for l in range(L)]
    kin, kout = W[0][0].shape[1], W[0][0].shape[0]
    n_basis = len(knots) - order - 1
    xsv, zfiv, Uv, Wcov, bcov = xs.value, zfi.value, U_fi.value, W_co.value, b_co.value

    H = np.empty((B, T, m))
    C = np.empty((B, T, m))
    G = np.empty((B, T, 4 * m))  # f, i, cand, o
    R = np.empty((B, T, L * kout))
    S = np.empty((L, B, T, kin))
    SH = np.empty((L, B, T, kout))  # sublayer memory entering step t
    BAS = np.empty((L, B, T, kin * n_basis))
    DBAS = np.empty((L, B, T, kin, n_basis))
    INS = np.empty((L, B, T, kin), dtype=bool)
    sh = [np.zeros((B, kout)) for _ in range(L)]
    h = np.zeros((B, m))
    c = np.zeros((B, m))
    for t in range(T):
        for l, (W_h, base, spline, W_hh, W_hz) in enumerate(W):
            s = xsv[:, t, l * kin:(l + 1) * kin] + sh[l] @ W_h
            basis, dbasis, inside = _clamped_basis(s, knots, order)
            basis = basis.reshape(B, kin * n_basis)
            o_l = s * _sigmoid(s) @ base + basis @ spline
            SH[l, :, t] = sh[l]
            S[l, :, t] = s
            BAS[l, :, t] = basis
            DBAS[l, :, t] = dbasis
            INS[l, :, t] = inside
            R[:, t, l * kout:(l + 1) * kout] = o_l
            sh[l] = sh[l] @ W_hh + o_l @ W_hz
        g = G[:, t]
        g[:, :2 * m] = _sigmoid(zfiv[:, t] + h @ Uv)
        co = R[:, t] @ Wcov + bcov
        g[:, 2 * m:3 * m] = np.tanh(co[:, :m])
        g[:, 3 * m:] = _sigmoid(co[:, m:])
        c = g[:, :m] * c + g[:, m:2 * m] * g[:, 2 * m:3 * m]
        h = g[:, 3 * m:] * np.tanh(c)
        C[:, t] = c
        H[:, t] = h

    def vjp(dH):
        dxs = np.empty_like(xsv)
        dzfi = np.empty_like(zfiv)
        dU = np.zeros_like(Uv)
        dWco = np.zeros_like(Wcov)
        dbco = np.zeros_like(bcov)
        dW = [[np.zeros_like(w) for w in sub] for sub in W]
        dh_next = np.zeros((B, m))
        dc_next = np.zeros((B, m))
        dsh_next = [np.zeros((B, kout)) for _ in range(L)]
        UT, WcoT = Uv.T, Wcov.T
        for t in range(T - 1, -1, -1):
            g = G[:, t]
            f, i, cand, o = g[:, :m], g[:, m:2 * m], g[:, 2 * m:3 * m], g[:, 3 * m:]
            tc = np.tanh(C[:, t])
            c_prev = C[:, t - 1] if t > 0 else 0.0
            dh = dH[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dzfi[:, t]
            dz[:, :m] = dc * c_prev * f * (1.0 - f)
            dz[:, m:] = dc * cand * i * (1.0 - i)
            if t > 0:
                dU += H[:, t - 1].T @ dz
            dh_next = dz @ UT
            dc_next = dc * f
            dco = np.concatenate([dc * i * (1.0 - cand * cand), dh * tc * o * (1.0 - o)], axis=1)
            dWco += R[:, t].T @ dco
            dbco += dco.sum(axis=0)
            dr = dco @ WcoT
            for l, (W_h, base, spline, W_hh, W_hz) in enumerate(W):
                d_h, d_base, d_spline, d_hh, d_hz = dW[l]
                o_l = R[:, t, l * kout:(l + 1) * kout]
                sh_prev = SH[l, :, t]
                d_next = dsh_next[l]
                d_o = dr[:, l * kout:(l + 1) * kout] + d_next @ W_hz.T
                d_hz += o_l.T @ d_next
                d_hh += sh_prev.T @ d_next
                s = S[l, :, t]
                sig = _sigmoid(s)
                d_base += (s * sig).T @ d_o
                d_spline += BAS[l, :, t].T @ d_o
                d_b = (d_o @ spline.T).reshape(B, kin, n_basis)
                ds = (d_o @ base.T) * sig * (1.0 + s * (1.0 - sig)) + (d_b * DBAS[l, :, t]).sum(axis=-1) * INS[l, :, t]
                dxs[:, t, l * kin:(l + 1) * kin] = ds
                d_h += sh_prev.T @ ds
                dsh_next[l] = d_next @ W_hh.T + ds @ W_h.T
        grads = [dxs, dzfi, dU, dWco, dbco]
        for sub in dW:
            grads.extend(sub)
        return tuple(grads)

    parents = (xs, zfi, U_fi, W_co, b_co, *sub_weights)
    return tape.custom(H, parents, vjp, "tkan_scan")


def stack_time(hs: list[Var]) -> Var:
    """Stack per-step ``(B, m)`` states into ``(B, T, m)``."""
    value = np.stack([h.value for h in hs], axis=1)

    def vjp(g):
        return tuple(g[:, t] for t in range(len(hs)))

    return tape.custom(value, tuple(hs), vjp, "stack_time")


def make_cell(kind: str, d: int, m: int, **tkan_kw):
    if kind == "lstm":
        return LSTMCell(d, m)
    if kind == "tkan":
        return TKANCell(d, m, **tkan_kw)
    raise ValueError(f"unknown recurrent cell {kind!r}")
