"""GRU and LSTM update functions, for one module or a stack of independent modules.

Gate layout along the last weight axis: GRU ``[reset, update, candidate]``,
LSTM ``[input, forget, cell, output]``. Each gate has a single bias vector;
the GRU candidate uses ``tanh(W_x x + b + r * (W_h h))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

GATES = {"gru": 3, "lstm": 4}


@dataclass
class CellParams:
    """Weights of one cell (2-d) or of ``n`` stacked modules (leading axis ``n``)."""

    kind: str
    wx: Tensor  # (d_in, G*d_h) or (n, d_in, G*d_h)
    wh: Tensor  # (d_h, G*d_h) or (n, d_h, G*d_h)
    b: Tensor   # (G*d_h,) or (n, G*d_h)

    def __post_init__(self):
        if self.kind not in GATES:
            raise ValueError(f"unknown cell kind {self.kind!r}")
        g = GATES[self.kind]
        d_h = self.wh.shape[-2]
        if self.wh.shape[-1] != g * d_h or self.wx.shape[-1] != g * d_h or self.b.shape[-1] != g * d_h:
            raise DimensionError(f"{self.kind} gate shapes inconsistent: wx {self.wx.shape}, wh {self.wh.shape}, b {self.b.shape}")
        if self.wx.ndim != self.wh.ndim or self.b.ndim != self.wx.ndim - 1:
            raise DimensionError("cell parameters mix grouped and single layouts")

    @property
    def grouped(self) -> bool:
        return self.wx.ndim == 3

    @property
    def d_in(self) -> int:
        return self.wx.shape[-2]

    @property
    def d_h(self) -> int:
        return self.wh.shape[-2]

    def count(self) -> int:
        return self.wx.size + self.wh.size + self.b.size


@dataclass
class CellState:
    h: Tensor
    c: Tensor | None = None


def init_cell(rng: np.random.Generator, kind: str, d_in: int, d_h: int, n: int | None = None, dtype=None) -> CellParams:
    g = GATES[kind]
    lead = () if n is None else (n,)
    bound = 1.0 / math.sqrt(d_h)
    wx = Tensor(rng.uniform(-bound, bound, size=lead + (d_in, g * d_h)), requires_grad=True, dtype=dtype)
    wh = Tensor(rng.uniform(-bound, bound, size=lead + (d_h, g * d_h)), requires_grad=True, dtype=dtype)
    b = np.zeros(lead + (g * d_h,))
    if kind == "lstm":
        b[..., d_h:2 * d_h] = 1.0
    return CellParams(kind, wx, wh, Tensor(b, requires_grad=True, dtype=dtype))


def _gate(x: Tensor, i: int, d_h: int) -> Tensor:
    return T.index(x, (..., slice(i * d_h, (i + 1) * d_h)))


def cell_step(p: CellParams, x: Tensor, s: CellState) -> CellState:
    """One recurrent update. ``x``/``s.h`` are ``(..., d)`` for a single cell or
    ``(B, n, d)`` for grouped parameters, where module ``k`` uses only slice ``k``."""
    if x.shape[-1] != p.d_in or s.h.shape[-1] != p.d_h:
        raise DimensionError(f"cell expects input width {p.d_in} and hidden width {p.d_h}, got {x.shape} and {s.h.shape}")
    if p.kind == "lstm" and s.c is None:
        raise ValueError("LSTM step needs a cell state")
    if p.grouped:
        if x.ndim != 3 or x.shape[1] != p.wx.shape[0] or s.h.shape[:2] != x.shape[:2]:
            raise DimensionError(f"grouped cell with {p.wx.shape[0]} modules got input {x.shape}, state {s.h.shape}")
        px = T.group_linear(x, p.wx, p.b)
        ph = T.group_linear(s.h, p.wh)
    else:
        px = T.linear(x, p.wx, p.b)
        ph = T.linear(s.h, p.wh)
    d = p.d_h
    if p.kind == "gru":
        r = T.sigmoid(T.add(_gate(px, 0, d), _gate(ph, 0, d)))
        z = T.sigmoid(T.add(_gate(px, 1, d), _gate(ph, 1, d)))
        cand = T.tanh(T.add(_gate(px, 2, d), T.mul(r, _gate(ph, 2, d))))
        h = T.add(T.mul(T.sub(1.0, z), cand), T.mul(z, s.h))
        return CellState(h)
    pre = T.add(px, ph)
    i = T.sigmoid(_gate(pre, 0, d))
    f = T.sigmoid(_gate(pre, 1, d))
    g = T.tanh(_gate(pre, 2, d))
    o = T.sigmoid(_gate(pre, 3, d))
    c = T.add(T.mul(f, s.c), T.mul(i, g))
    return CellState(T.mul(o, T.tanh(c)), c)
