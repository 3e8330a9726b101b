"""Finite-difference verification of every primitive and of a full network unroll.

Each check reduces the output with fixed random weights so that no entry of
the gradient cancels to zero by symmetry (a softmax row sums to one, so its
plain sum has zero gradient and relative error would be pure roundoff).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .arch import Architecture, LayerState, NetworkState
from .config import BrimsConfig
from .tensor import Tensor, finite_diff_check

Case = tuple[Callable[[Tensor], Tensor], Tensor]


def _w(rng, shape) -> Tensor:
    return Tensor._wrap(rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape))


def _reduce(out: Tensor, w: Tensor) -> Tensor:
    return T.tsum(T.mul(out, w))


def _x(rng, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _unary(rng, op, shape=(3, 4), low=-1.0, high=1.0) -> Case:
    w = _w(rng, shape)
    return (lambda x: _reduce(op(x), w)), _x(rng, shape, low, high)


def _binary(rng, op, sa, sb, out_shape, which: int) -> Case:
    a, b = _x(rng, sa), _x(rng, sb)
    w = _w(rng, out_shape)
    if which == 0:
        return (lambda x: _reduce(op(x, b), w)), a
    return (lambda x: _reduce(op(a, x), w)), b


def primitive_cases(seed: int = 0) -> dict[str, Case]:
    rng = np.random.default_rng(seed)
    cases: dict[str, Case] = {}
    for name, op, sa, sb, so in [
        ("add", T.add, (3, 4), (3, 4), (3, 4)),
        ("sub", T.sub, (3, 4), (3, 4), (3, 4)),
        ("mul", T.mul, (3, 4), (3, 4), (3, 4)),
        ("matmul", T.matmul, (3, 4), (4, 5), (3, 5)),
        ("linear", T.linear, (3, 4), (4, 5), (3, 5)),
        ("bmm", T.bmm, (2, 3, 4), (2, 4, 5), (2, 3, 5)),
        ("bmm_t", lambda a, b: T.bmm(a, b, transpose_b=True), (2, 3, 4), (2, 5, 4), (2, 3, 5)),
        ("einsum", lambda a, b: T.einsum("bhqd,bhkd->bhqk", a, b), (2, 2, 3, 4), (2, 2, 5, 4), (2, 2, 3, 5)),
        ("group_linear", T.group_linear, (2, 3, 4), (3, 4, 5), (2, 3, 5)),
    ]:
        for which in (0, 1):
            cases[f"{name}[{'ab'[which]}]"] = _binary(rng, op, sa, sb, so, which)
    bias = _x(rng, (5,))
    gbias = _x(rng, (3, 5))
    cases["linear[bias]"] = (lambda x, a=_x(rng, (3, 4)), w=_x(rng, (4, 5)), r=_w(rng, (3, 5)):
                             _reduce(T.linear(a, w, x), r)), bias
    cases["group_linear[bias]"] = (lambda x, a=_x(rng, (2, 3, 4)), w=_x(rng, (3, 4, 5)), r=_w(rng, (2, 3, 5)):
                                   _reduce(T.group_linear(a, w, x), r)), gbias
    cases["scale"] = _unary(rng, lambda x: T.scale(x, -1.7))
    cases["sigmoid"] = _unary(rng, T.sigmoid, low=-4, high=4)
    cases["tanh"] = _unary(rng, T.tanh, low=-2, high=2)
    cases["relu"] = _unary(rng, T.relu)
    cases["exp"] = _unary(rng, T.exp)
    cases["log"] = _unary(rng, T.log, low=0.5, high=2.0)
    cases["square"] = _unary(rng, T.square)
    cases["dropout"] = _unary(rng, lambda x: T.dropout(x, 0.3, np.random.default_rng(5), training=True))
    mask = rng.random((3, 4)) < 0.5
    other = _x(rng, (3, 4))
    cases["where[a]"] = _unary(rng, lambda x: T.where(mask, x, other))
    cases["where[b]"] = _unary(rng, lambda x: T.where(mask, other, x))
    cases["softmax"] = _unary(rng, lambda x: T.softmax(x, axis=-1))
    cases["softmax_axis0"] = _unary(rng, lambda x: T.softmax(x, axis=0))
    cases["log_softmax"] = _unary(rng, lambda x: T.log_softmax(x, axis=-1))
    cases["tsum"] = (lambda x, r=_w(rng, (3,)): _reduce(T.tsum(x, axis=1), r)), _x(rng, (3, 4))
    cases["mean"] = (lambda x, r=_w(rng, (4,)): _reduce(T.mean(x, axis=0), r)), _x(rng, (3, 4))
    cases["reshape"] = (lambda x, r=_w(rng, (2, 6)): _reduce(T.reshape(x, (2, 6)), r)), _x(rng, (3, 4))
    cases["transpose"] = (lambda x, r=_w(rng, (4, 3)): _reduce(T.transpose(x), r)), _x(rng, (3, 4))
    cases["index_basic"] = (lambda x, r=_w(rng, (3, 2)): _reduce(T.index(x, (slice(None), slice(1, 3))), r)), _x(rng, (3, 4))
    cases["index_fancy"] = (lambda x, r=_w(rng, (4, 4)): _reduce(T.index(x, np.array([0, 2, 0, 1])), r)), _x(rng, (3, 4))
    cases["expand"] = (lambda x, r=_w(rng, (3, 4)): _reduce(T.expand(x, (3, 4)), r)), _x(rng, (4,))
    cases["concat"] = (lambda x, o=_x(rng, (3, 2)), r=_w(rng, (3, 6)): _reduce(T.concat([x, o], axis=1), r)), _x(rng, (3, 4))
    cases["split"] = (lambda x, r=_w(rng, (3, 3)): _reduce(T.split(x, [1, 3], axis=1)[1], r)), _x(rng, (3, 4))
    cases["stack"] = (lambda x, o=_x(rng, (3, 4)), r=_w(rng, (3, 2, 4)): _reduce(T.stack([x, o], axis=1), r)), _x(rng, (3, 4))
    labels = np.array([1, 0, 3])
    cases["cross_entropy"] = (lambda x: T.cross_entropy(x, labels)), _x(rng, (3, 4))
    target = _x(rng, (3, 4))
    cases["mse[pred]"] = (lambda x: T.mse(x, target)), _x(rng, (3, 4))
    pred = _x(rng, (3, 4))
    cases["mse[target]"] = (lambda x: T.mse(pred, x)), _x(rng, (3, 4))
    cases["fanout"] = (lambda x, r=_w(rng, (3, 4)): _reduce(T.add(T.mul(x, x), T.tanh(x)), r)), _x(rng, (3, 4))
    return cases


def check_primitives(seed: int = 0, eps: float = 1e-6) -> dict[str, float]:
    return {name: finite_diff_check(f, x, eps) for name, (f, x) in primitive_cases(seed).items()}


GRADCHECK_CONFIG = BrimsConfig(variant="BRIMS", n_modules=[3, 2], n_active=[2, 1], d_module=[8, 8], d_att=6, d_v=6,
                               input_dim=2, embed_dim=6, output_dim=3, head="classification", head_hidden=5,
                               dropout=0.0)


def unroll_cases(cfg: BrimsConfig = GRADCHECK_CONFIG, steps: int = 3, batch: int = 2, seed: int = 0) -> dict[str, Case]:
    """One case for the raw input sequence and one per parameter tensor of ``cfg``.

    The unroll starts from random states and the loss reads the head output
    and every module's final state, so every parameter has a gradient well
    above central-difference roundoff.
    """
    if cfg.dtype != "float64":
        raise ValueError("finite-difference checks need 64-bit parameters")
    arch = Architecture(cfg.replace(dropout=0.0), seed=seed)
    rng = np.random.default_rng([seed, 1])
    inputs = rng.uniform(-1, 1, size=(steps, batch, cfg.input_dim))
    init = arch.init_state(batch)
    lstm = cfg.cell_kind == "lstm"
    h0 = [Tensor._wrap(rng.uniform(-1, 1, size=ls.h.shape)) for ls in init.layers]
    c0 = [Tensor._wrap(rng.uniform(-1, 1, size=ls.h.shape)) if lstm else None for ls in init.layers]
    init = NetworkState([LayerState(h, c, ls.active) for h, c, ls in zip(h0, c0, init.layers)])
    w_out = _w(rng, (batch,) if cfg.head == "regression" and cfg.output_dim == 1 else (batch, cfg.output_dim))
    w_state = [_w(rng, ls.h.shape) for ls in init.layers]

    def run(params, seq):
        state = init
        for t in range(steps):
            x = arch.embed(T.index(seq, t), params)
            state, _ = arch.step(x, state, params)
        loss = _reduce(arch.head(state, params), w_out)
        for w, ls in zip(w_state, state.layers):
            loss = T.add(loss, _reduce(ls.h, w))
        return loss

    fixed = {k: Tensor._wrap(v.data) for k, v in arch.params.items()}
    seq = Tensor(inputs, requires_grad=True)
    cases: dict[str, Case] = {"inputs": ((lambda x: run(fixed, x)), seq)}
    const_seq = Tensor._wrap(inputs)
    for name, p in arch.params.items():
        x = Tensor(p.data.copy(), requires_grad=True)
        cases[name] = ((lambda x, name=name: run({**fixed, name: x}, const_seq)), x)
    return cases


# Parameters whose gradients pass through several attention softmaxes reach
# magnitudes near 1e-6. At eps=1e-6 the roundoff in f (about 1e-16 |f| / eps)
# is then comparable to the gradient itself; 1e-4 keeps both roundoff and the
# truncation term (eps^2 times the third derivative) far below 1e-5 relative.
UNROLL_EPS = 1e-4


def check_unroll(cfg: BrimsConfig = GRADCHECK_CONFIG, steps: int = 3, batch: int = 2, seed: int = 0,
                 eps: float = UNROLL_EPS) -> dict[str, float]:
    return {name: finite_diff_check(f, x, eps) for name, (f, x) in unroll_cases(cfg, steps, batch, seed).items()}
