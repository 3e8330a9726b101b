"""Scaled dot-product key-value attention and its projection maps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass
class AttentionOutput:
    """``scores`` rows lie on the simplex; ``result = scores @ values``."""

    scores: Tensor
    result: Tensor


@dataclass
class Affine:
    w: Tensor
    b: Tensor

    @property
    def d_in(self) -> int:
        return self.w.shape[0]

    @property
    def d_out(self) -> int:
        return self.w.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def init_affine(rng: np.random.Generator, d_in: int, d_out: int, dtype=None) -> Affine:
    return Affine(uniform_init(rng, (d_in, d_out), d_in, dtype), uniform_init(rng, (d_out,), d_in, dtype))


@dataclass
class ProjectionSet:
    """Per-module query maps plus key/value maps over a list of sources.

    ``query_w``/``query_b`` hold one affine map per module stacked on the
    leading axis. ``key_maps``/``value_maps`` hold one map per source slot; a
    single map is shared by every source. When ``null_key``/``null_value`` are
    set, the first key/value row comes from the all-zero null source, which
    reduces an affine map to its bias.
    """

    query_w: Tensor
    query_b: Tensor
    key_maps: list[Affine]
    value_maps: list[Affine]
    null_key: Tensor | None = None
    null_value: Tensor | None = None
    heads: int = 1

    def __post_init__(self):
        if len(self.key_maps) != len(self.value_maps) or not self.key_maps:
            raise DimensionError("need matching, non-empty key and value map lists")
        d_att = self.query_w.shape[2]
        for km in self.key_maps:
            if km.d_out != d_att:
                raise DimensionError(f"key width {km.d_out} differs from query width {d_att}")
        d_v = self.value_maps[0].d_out
        if any(vm.d_out != d_v for vm in self.value_maps):
            raise DimensionError("value maps disagree on output width")
        if self.null_key is not None and (self.null_key.shape != (d_att,) or self.null_value.shape != (d_v,)):
            raise DimensionError("null key/value widths do not match the maps")

    @property
    def n_queries(self) -> int:
        return self.query_w.shape[0]

    @property
    def d_att(self) -> int:
        return self.query_w.shape[2]

    @property
    def d_v(self) -> int:
        return self.value_maps[0].d_out


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> AttentionOutput:
    """Softmax(Q Kᵀ / √d) V.

    Accepts unbatched ``(q, d)`` / ``(k, d)`` / ``(k, d_v)`` matrices or batched
    ``(B, q, H·d)`` inputs. With ``heads > 1`` the feature axes are split into
    ``heads`` equal chunks; scores come back as ``(B, H, q, k)``.
    """
    if q.ndim == 2:
        out = attend(T.reshape(q, (1,) + q.shape), T.reshape(k, (1,) + k.shape),
                     T.reshape(v, (1,) + v.shape), heads)
        return AttentionOutput(T.reshape(out.scores, out.scores.shape[1:]), T.reshape(out.result, out.result.shape[1:]))
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise DimensionError(f"attend expects 2-d or 3-d operands, got {q.shape}, {k.shape}, {v.shape}")
    b, nq, dq = q.shape
    if k.shape[1] == 0:
        raise DimensionError("attend needs at least one key")
    if k.shape[0] != b or v.shape[0] != b or k.shape[2] != dq or v.shape[1] != k.shape[1]:
        raise DimensionError(f"attend: incompatible query {q.shape}, key {k.shape}, value {v.shape}")
    if dq % heads or v.shape[2] % heads:
        raise DimensionError(f"widths {dq}, {v.shape[2]} not divisible by {heads} heads")
    d = dq // heads
    if heads == 1:
        logits = T.bmm(q, k, transpose_b=True)
        scores = T.softmax(T.scale(logits, 1.0 / math.sqrt(d)), axis=-1)
        return AttentionOutput(scores, T.bmm(scores, v))
    nk = k.shape[1]
    qh = T.reshape(q, (b, nq, heads, d))
    kh = T.reshape(k, (b, nk, heads, d))
    vh = T.reshape(v, (b, nk, heads, v.shape[2] // heads))
    logits = T.einsum("bqhd,bkhd->bhqk", qh, kh)
    scores = T.softmax(T.scale(logits, 1.0 / math.sqrt(d)), axis=-1)
    res = T.einsum("bhqk,bkhv->bqhv", scores, vh)
    return AttentionOutput(scores, T.reshape(res, (b, nq, v.shape[2])))


def project_batched(ps: ProjectionSet, states: Tensor, sources: list[Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Batched projection: ``states`` is ``(B, n, d)``, each source ``(B, d_s)``.

    Returns Q ``(B, n, d_att)``, K ``(B, S, d_att)`` and V ``(B, S, d_v)``.
    """
    if states.ndim != 3 or states.shape[1] != ps.n_queries:
        raise DimensionError(f"{states.shape[1] if states.ndim == 3 else '?'} module states for {ps.n_queries} query maps")
    bsz = states.shape[0]
    q = T.group_linear(states, ps.query_w, ps.query_b)
    shared = len(ps.key_maps) == 1
    if not shared and len(ps.key_maps) != len(sources):
        raise DimensionError(f"{len(sources)} sources for {len(ps.key_maps)} key/value maps")
    k_rows, v_rows = [], []
    if ps.null_key is not None:
        k_rows.append(T.expand(ps.null_key, (bsz, 1, ps.d_att)))
        v_rows.append(T.expand(ps.null_value, (bsz, 1, ps.d_v)))
    for i, src in enumerate(sources):
        km = ps.key_maps[0 if shared else i]
        vm = ps.value_maps[0 if shared else i]
        if src.shape[-1] != km.d_in:
            raise DimensionError(f"source {i} width {src.shape[-1]} does not match map input {km.d_in}")
        src3 = src if src.ndim == 3 else T.reshape(src, (bsz, 1, src.shape[-1]))
        k_rows.append(km(src3))
        v_rows.append(vm(src3))
    if not k_rows:
        raise DimensionError("no sources to attend over")
    return q, T.concat(k_rows, axis=1), T.concat(v_rows, axis=1)


def project(ps: ProjectionSet, module_states: list[Tensor], source_vectors: list[Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Unbatched form: one state vector per module, one vector per source."""
    if len(module_states) != ps.n_queries:
        raise DimensionError(f"{len(module_states)} module states for {ps.n_queries} query maps")
    states = T.reshape(T.stack(module_states, axis=0), (1, ps.n_queries, -1))
    sources = [T.reshape(s, (1, s.shape[-1])) for s in source_vectors]
    q, k, v = project_batched(ps, states, sources)
    return (T.reshape(q, q.shape[1:]), T.reshape(k, k.shape[1:]), T.reshape(v, v.shape[1:]))
