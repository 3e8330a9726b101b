"""Layered modular recurrent networks with attention between and within layers.

A step processes layers bottom to top. An attention layer reads from three
sources (null, the current-step layer below, the previous-step layer above),
activates the ``m`` modules that put the least weight on null, updates those
modules with their own cell, and lets active modules read from all modules of
the same layer through a residual attention. Inactive modules keep their
previous state bit for bit.

All step functions are functional in the parameters: pass ``params`` to run
with a different set of tensors (used for per-step gradient accounting and
finite-difference checks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .attention import Affine, ProjectionSet, attend, project_batched
from .cells import GATES, CellParams, CellState, cell_step
from .config import ATTENTION_VARIANTS, TOP_DOWN_VARIANTS, BrimsConfig, ConfigError
from .tensor import DimensionError, Tensor

Params = Mapping[str, Tensor]


@dataclass
class LayerState:
    """Module states ``h`` (and ``c`` for LSTM cells) of shape ``(B, n, d)``
    plus the active mask ``(B, n)`` from the step that produced them."""

    h: Tensor
    c: Tensor | None
    active: np.ndarray

    def active_sets(self) -> list[set[int]]:
        return [set(np.flatnonzero(row).tolist()) for row in self.active]

    def flat(self) -> Tensor:
        b, n, d = self.h.shape
        return T.reshape(self.h, (b, n * d))


@dataclass
class NetworkState:
    layers: list[LayerState]


@dataclass
class LayerTrace:
    """``scores``: ``(B, n, S)`` inter-layer attention averaged over heads, columns
    ``(null, bottom_up[, top_down])``; ``None`` for layers without attention."""

    scores: np.ndarray | None
    active: np.ndarray
    comm_scores: np.ndarray | None = None


@dataclass
class StepTrace:
    layers: list[LayerTrace]


@dataclass
class InterlayerRead:
    scores: Tensor       # (B, H, n, S) raw scores over every source row
    shares: np.ndarray   # (B, n, 2 or 3) grouped by source, head-averaged
    read: Tensor         # (B, n, H*d_v) personalised read per module


def select_mask(null_scores: np.ndarray, m: int) -> np.ndarray:
    """Boolean ``(B, n)`` mask of the ``m`` lowest null scores per row; ties go to the lower index."""
    null_scores = np.atleast_2d(null_scores)
    b, n = null_scores.shape
    if not 1 <= m <= n:
        raise ValueError(f"cannot activate {m} of {n} modules")
    order = np.argsort(null_scores, axis=1, kind="stable")[:, :m]
    mask = np.zeros((b, n), dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def select_active(scores, m: int, variant: str = "BRIMS", copied: set[int] | None = None) -> set[int]:
    """Active set from an ``(n, S)`` score matrix whose column 0 is null."""
    scores = np.asarray(getattr(scores, "data", scores))
    if scores.ndim != 2:
        raise DimensionError(f"expected an (n, S) score matrix, got {scores.shape}")
    if m > scores.shape[0]:
        raise ValueError(f"m={m} exceeds n={scores.shape[0]}")
    if variant == "MLD_RIMS" and copied is not None:
        return set(copied)
    return set(np.flatnonzero(select_mask(scores[:, 0][None, :], m)[0]).tolist())


class Layer:
    """Parameter layout and step logic for one layer of a configured network."""

    def __init__(self, cfg: BrimsConfig, l: int):
        self.cfg = cfg
        self.l = l
        self.n = cfg.n_modules[l]
        self.m = cfg.n_active[l]
        self.d = cfg.d_module[l]
        self.kind = cfg.cell_kind
        self.heads = cfg.num_heads
        self.attention = cfg.variant in ATTENTION_VARIANTS
        top = l == cfg.layers - 1
        self.top_down = not top and (cfg.variant in TOP_DOWN_VARIANTS or cfg.variant == "LSTM_HB")
        self.communicate = self.attention and cfg.variant not in ("LSTM_HA", "LSTM_HAB")
        self.copy_selection = cfg.variant == "MLD_RIMS" and l > 0
        self.per_module_keys = cfg.per_module_keys
        self.lower_width = cfg.embed_dim if l == 0 else cfg.layer_width(l - 1)
        self.higher_width = cfg.layer_width(l + 1) if self.top_down else 0
        self.p = f"l{l}."

    # ------------------------------------------------------------------
    # parameter layout

    def param_specs(self) -> list[tuple[str, tuple, str, int]]:
        """``(name, shape, init, fan_in)`` for every parameter of this layer."""
        cfg, n, d, p = self.cfg, self.n, self.d, self.p
        g = GATES[self.kind]
        specs = []
        if self.attention:
            e, v = cfg.d_att, cfg.d_v
            specs.append((p + "inq.w", (n, d, e), "uniform", d))
            specs.append((p + "inq.b", (n, e), "uniform", d))
            lw = self._source_row_width(self.l - 1) if self.per_module_keys else self.lower_width
            specs.append((p + "null.k", (e,), "uniform", lw))
            specs.append((p + "null.v", (v,), "uniform", lw))
            for tag, w in (("bu", lw),) + ((("td", self._td_row_width()),) if self.top_down else ()):
                specs.append((p + f"{tag}.wk", (w, e), "uniform", w))
                specs.append((p + f"{tag}.bk", (e,), "uniform", w))
                specs.append((p + f"{tag}.wv", (w, v), "uniform", w))
                specs.append((p + f"{tag}.bv", (v,), "uniform", w))
            d_in = v
        else:
            d_in = self.lower_width + self.higher_width
        specs.append((p + "cell.wx", (n, d_in, g * d), "cell", d))
        specs.append((p + "cell.wh", (n, d, g * d), "cell", d))
        specs.append((p + "cell.b", (n, g * d), "lstm_bias" if self.kind == "lstm" else "zeros", d))
        if self.communicate:
            e = cfg.d_att
            for tag, width in (("comq", e), ("comk", e), ("comv", d)):
                specs.append((p + f"{tag}.w", (n, d, width), "uniform", d))
                specs.append((p + f"{tag}.b", (n, width), "uniform", d))
        return specs

    def _source_row_width(self, l: int) -> int:
        return self.cfg.embed_dim if l < 0 else self.cfg.d_module[l]

    def _td_row_width(self) -> int:
        return self.cfg.d_module[self.l + 1] if self.per_module_keys else self.higher_width

    def cell_params(self, params: Params) -> CellParams:
        p = self.p
        return CellParams(self.kind, params[p + "cell.wx"], params[p + "cell.wh"], params[p + "cell.b"])

    def projection_set(self, params: Params) -> ProjectionSet:
        p = self.p
        tags = ("bu", "td") if self.top_down else ("bu",)
        keys = [Affine(params[p + f"{t}.wk"], params[p + f"{t}.bk"]) for t in tags]
        vals = [Affine(params[p + f"{t}.wv"], params[p + f"{t}.bv"]) for t in tags]
        return ProjectionSet(params[p + "inq.w"], params[p + "inq.b"], keys, vals,
                             params[p + "null.k"], params[p + "null.v"], heads=self.heads)

    # ------------------------------------------------------------------
    # step phases

    def interlayer_read(self, params: Params, h_prev: Tensor, lower: Tensor, higher: Tensor | None) -> InterlayerRead:
        if not self.attention:
            raise ConfigError("model.variant", f"layer {self.l} of {self.cfg.variant} has no inter-layer attention")
        if higher is not None and not self.top_down:
            raise DimensionError(f"layer {self.l} takes no top-down input")
        if higher is None and self.top_down:
            raise DimensionError(f"layer {self.l} needs the previous-step state of layer {self.l + 1}")
        bsz = h_prev.shape[0]
        sources = [self._rows(lower, self.l - 1, bsz)]
        if higher is not None:
            sources.append(self._rows(higher, self.l + 1, bsz))
        ps = self.projection_set(params)
        q, k, v = project_batched(ps, h_prev, sources)
        out = attend(q, k, v, self.heads)
        scores = out.scores if out.scores.ndim == 4 else T.reshape(out.scores, (bsz, 1) + out.scores.shape[1:])
        mean_s = scores.data.mean(axis=1)
        groups = [1] + [s.shape[1] if s.ndim == 3 else 1 for s in sources]
        edges = np.cumsum([0] + groups)
        shares = np.stack([mean_s[..., a:b].sum(axis=-1) for a, b in zip(edges[:-1], edges[1:])], axis=-1)
        return InterlayerRead(scores, shares, out.result)

    def _rows(self, src: Tensor, l: int, bsz: int) -> Tensor:
        if src.shape[0] != bsz:
            raise DimensionError(f"source batch {src.shape[0]} differs from state batch {bsz}")
        if not self.per_module_keys or l < 0:
            return src
        n, d = self.cfg.n_modules[l], self.cfg.d_module[l]
        return T.reshape(src, (bsz, n, d))

    def communicate_step(self, params: Params, h_bar: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        p = self.p
        q = T.group_linear(h_bar, params[p + "comq.w"], params[p + "comq.b"])
        k = T.group_linear(h_bar, params[p + "comk.w"], params[p + "comk.b"])
        v = T.group_linear(h_bar, params[p + "comv.w"], params[p + "comv.b"])
        if self.cfg.comm_activation == "tanh":
            # bounded values keep the residual from compounding when update gates saturate
            v = T.tanh(v)
        out = attend(q, k, v, self.heads)
        h = T.where(mask[:, :, None], T.add(h_bar, out.result), h_bar)
        sc = out.scores.data if out.scores.ndim == 3 else out.scores.data.mean(axis=1)
        return h, sc

    def step(self, params: Params, lower: Tensor, higher: Tensor | None, state: LayerState,
             force: np.ndarray | None = None, copied: np.ndarray | None = None) -> tuple[LayerState, LayerTrace]:
        if state.h.shape[1:] != (self.n, self.d):
            raise DimensionError(f"layer {self.l} state {state.h.shape} does not match (B, {self.n}, {self.d})")
        bsz = state.h.shape[0]
        if not self.attention:
            inp = lower if higher is None else T.concat([lower, higher], axis=-1)
            if inp.shape[-1] != self.lower_width + self.higher_width:
                raise DimensionError(f"layer {self.l} input width {inp.shape[-1]} != {self.lower_width + self.higher_width}")
            cs = cell_step(self.cell_params(params), T.reshape(inp, (bsz, 1, inp.shape[-1])), CellState(state.h, state.c))
            mask = np.ones((bsz, 1), dtype=bool)
            return LayerState(cs.h, cs.c, mask), LayerTrace(None, mask)

        att = self.interlayer_read(params, state.h, lower, higher)
        if force is not None:
            mask = np.broadcast_to(np.asarray(force, dtype=bool), (bsz, self.n)).copy()
            if np.any(mask.sum(axis=1) != self.m):
                raise ValueError(f"forced selection must activate exactly {self.m} modules")
        elif copied is not None:
            mask = copied.copy()
        else:
            mask = select_mask(att.shares[..., 0], self.m)
        cs = cell_step(self.cell_params(params), att.read, CellState(state.h, state.c))
        m3 = mask[:, :, None]
        h_bar = T.where(m3, cs.h, state.h)
        c_bar = T.where(m3, cs.c, state.c) if state.c is not None else None
        comm = None
        h = h_bar
        if self.communicate:
            h, comm = self.communicate_step(params, h_bar, mask)
        return LayerState(h, c_bar, mask), LayerTrace(att.shares, mask, comm)


def init_state(cfg: BrimsConfig, batch_size: int) -> NetworkState:
    """Zero states; the initial active set is the first ``m_l`` modules."""
    dtype = np.dtype(cfg.dtype)
    layers = []
    for n, m, d in zip(cfg.n_modules, cfg.n_active, cfg.d_module):
        h = Tensor._wrap(np.zeros((batch_size, n, d), dtype=dtype))
        c = Tensor._wrap(np.zeros((batch_size, n, d), dtype=dtype)) if cfg.cell_kind == "lstm" else None
        active = np.zeros((batch_size, n), dtype=bool)
        active[:, :m] = True
        layers.append(LayerState(h, c, active))
    return NetworkState(layers)


def param_specs(cfg: BrimsConfig) -> list[tuple[str, tuple, str, int]]:
    specs = []
    if cfg.per_channel_encoder:
        e = cfg.embed_dim // cfg.input_dim
        for c in range(cfg.input_dim):
            specs += [(f"enc.{c}.w", (1, e), "uniform", 1), (f"enc.{c}.b", (e,), "uniform", 1)]
    else:
        specs += [("enc.w", (cfg.input_dim, cfg.embed_dim), "uniform", cfg.input_dim),
                  ("enc.b", (cfg.embed_dim,), "uniform", cfg.input_dim)]
    for l in range(cfg.layers):
        specs += Layer(cfg, l).param_specs()
    top = cfg.layer_width(cfg.layers - 1)
    if cfg.head == "classification":
        specs += [("head.w1", (top, cfg.head_hidden), "uniform", top), ("head.b1", (cfg.head_hidden,), "uniform", top),
                  ("head.w2", (cfg.head_hidden, cfg.output_dim), "uniform", cfg.head_hidden),
                  ("head.b2", (cfg.output_dim,), "uniform", cfg.head_hidden)]
    else:
        specs += [("head.w", (top, cfg.output_dim), "uniform", top), ("head.b", (cfg.output_dim,), "uniform", top)]
    return specs


def count_parameters(cfg: BrimsConfig) -> int:
    return int(sum(math.prod(shape) for _, shape, _, _ in param_specs(cfg)))


def _init_param(rng: np.random.Generator, shape, init: str, fan_in: int, dtype) -> Tensor:
    if init == "zeros":
        arr = np.zeros(shape)
    elif init == "lstm_bias":
        arr = np.zeros(shape)
        d = shape[-1] // 4
        arr[..., d:2 * d] = 1.0
    else:
        bound = 1.0 / math.sqrt(fan_in)
        arr = rng.uniform(-bound, bound, size=shape)
    return Tensor(arr, requires_grad=True, dtype=dtype)


class Architecture:
    """A configured network: encoder, recurrent layers and output head."""

    def __init__(self, cfg: BrimsConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.layers = [Layer(cfg, l) for l in range(cfg.layers)]
        rng = np.random.default_rng(seed)
        dtype = np.dtype(cfg.dtype)
        self.params: dict[str, Tensor] = {
            name: _init_param(rng, shape, init, fan_in, dtype) for name, shape, init, fan_in in param_specs(cfg)
        }
        for name, t in self.params.items():
            t.name = name

    # ------------------------------------------------------------------

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        for name, t in self.params.items():
            if name not in state:
                if strict:
                    raise KeyError(f"missing parameter {name}")
                continue
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise DimensionError(f"parameter {name}: expected {t.shape}, got {arr.shape}")
            t.data = arr.astype(t.dtype, copy=True)
        if strict:
            extra = set(state) - set(self.params)
            if extra:
                raise KeyError(f"unexpected parameters {sorted(extra)}")

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def init_state(self, batch_size: int) -> NetworkState:
        return init_state(self.cfg, batch_size)

    # ------------------------------------------------------------------

    def embed(self, x, params: Params | None = None, training: bool = False, rng=None) -> Tensor:
        """Encode one step of raw features ``(B, F)`` and apply embedding dropout."""
        params = params or self.params
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.dtype(cfg.dtype)))
        if x.shape[-1] != cfg.input_dim:
            raise DimensionError(f"input has {x.shape[-1]} features, config expects {cfg.input_dim}")
        if cfg.per_channel_encoder:
            parts = [T.linear(T.index(x, (slice(None), slice(c, c + 1))), params[f"enc.{c}.w"], params[f"enc.{c}.b"])
                     for c in range(cfg.input_dim)]
            e = T.concat(parts, axis=-1)
        else:
            e = T.linear(x, params["enc.w"], params["enc.b"])
        return T.dropout(e, cfg.dropout, rng, training)

    def step(self, x_emb: Tensor, state: NetworkState, params: Params | None = None,
             force_active: Sequence | None = None) -> tuple[NetworkState, StepTrace]:
        """One time step over all layers, bottom to top."""
        params = params or self.params
        if len(state.layers) != len(self.layers):
            raise DimensionError(f"state has {len(state.layers)} layers, model has {len(self.layers)}")
        if x_emb.shape[-1] != self.cfg.embed_dim:
            raise DimensionError(f"embedded input width {x_emb.shape[-1]} != {self.cfg.embed_dim}")
        new_layers: list[LayerState] = []
        traces: list[LayerTrace] = []
        lower = x_emb
        for i, layer in enumerate(self.layers):
            higher = state.layers[i + 1].flat() if layer.top_down else None
            force = None if force_active is None else force_active[i]
            copied = new_layers[0].active if layer.copy_selection else None
            ls, tr = layer.step(params, lower, higher, state.layers[i], force=force, copied=copied)
            new_layers.append(ls)
            traces.append(tr)
            lower = ls.flat()
        return NetworkState(new_layers), StepTrace(traces)

    def unroll(self, seq: Sequence[Tensor], init: NetworkState, params=None,
               force_active: Sequence | None = None) -> tuple[NetworkState, list[StepTrace]]:
        """Fold :meth:`step` over embedded inputs. ``params`` may be a single mapping
        or one mapping per step."""
        if len(seq) == 0:
            raise ValueError("cannot unroll an empty sequence")
        per_step = isinstance(params, (list, tuple))
        if per_step and len(params) != len(seq):
            raise ValueError(f"{len(params)} parameter sets for {len(seq)} steps")
        state, traces = init, []
        for t, x in enumerate(seq):
            p = params[t] if per_step else params
            fa = None if force_active is None else force_active[t]
            state, tr = self.step(x, state, p, fa)
            traces.append(tr)
        return state, traces

    def head(self, state: NetworkState, params: Params | None = None) -> Tensor:
        """Prediction from the final top-layer state: logits ``(B, C)`` or values ``(B,)``."""
        params = params or self.params
        top = state.layers[-1].flat()
        if self.cfg.head == "classification":
            hid = T.relu(T.linear(top, params["head.w1"], params["head.b1"]))
            return T.linear(hid, params["head.w2"], params["head.b2"])
        out = T.linear(top, params["head.w"], params["head.b"])
        if self.cfg.output_dim == 1:
            out = T.reshape(out, (out.shape[0],))
        return out

    def forward(self, inputs: np.ndarray, params: Params | None = None, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[Tensor, list[StepTrace]]:
        """Run raw inputs ``(T, B, F)`` through encoder, layers and head."""
        inputs = np.asarray(inputs)
        if inputs.ndim != 3:
            raise DimensionError(f"expected (T, B, F) inputs, got {inputs.shape}")
        params = params or self.params
        state = self.init_state(inputs.shape[1])
        traces = []
        for t in range(inputs.shape[0]):
            x = self.embed(inputs[t], params, training, rng)
            state, tr = self.step(x, state, params)
            traces.append(tr)
        return self.head(state, params), traces


def make_variant(cfg: BrimsConfig, seed: int = 0) -> Architecture:
    return Architecture(cfg, seed)


def parameter_count(arch: Architecture) -> int:
    return arch.parameter_count()


def interlayer_read(arch: Architecture, l: int, layer_state: LayerState, lower: Tensor,
                    higher_prev: Tensor | None = None, params: Params | None = None) -> InterlayerRead:
    return arch.layers[l].interlayer_read(params or arch.params, layer_state.h, lower, higher_prev)


def layer_step(arch: Architecture, l: int, lower: Tensor, higher_prev: Tensor | None, state: LayerState,
               params: Params | None = None, force=None, copied=None) -> tuple[LayerState, LayerTrace]:
    return arch.layers[l].step(params or arch.params, lower, higher_prev, state, force=force, copied=copied)


def brims_step(arch: Architecture, x_t: Tensor, state: NetworkState, params: Params | None = None):
    return arch.step(x_t, state, params)


def unroll(arch: Architecture, seq: Sequence[Tensor], init: NetworkState, params=None):
    return arch.unroll(seq, init, params)


def matched_config(cfg: BrimsConfig, variant: str = "LSTM", layers: int | None = None) -> BrimsConfig:
    """LSTM-family config whose parameter count is closest to ``cfg``'s.

    Keeps the encoder, head and embedding; searches one shared hidden width.
    """
    target = count_parameters(cfg)
    L = layers if layers is not None else (1 if variant == "LSTM" else max(cfg.layers, 2))
    best, best_gap = None, None
    for hdim in range(1, 4097):
        cand = cfg.replace(variant=variant, n_modules=[1] * L, n_active=[1] * L, d_module=[hdim] * L,
                           cell="lstm", per_module_keys=False)
        n = count_parameters(cand)
        gap = abs(n - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = cand, gap
        if n > target:
            break
    return best
