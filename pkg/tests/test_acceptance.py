"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that the terminal summary prints as
``criterion N: PASS|FAIL``. Criteria 5-7 train real models and dominate the
runtime; their setups live in ``configs/`` so the CLI can reproduce them.
"""

import gzip
import io
import re
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from brims import tensor as T
from brims.arch import Architecture, LayerState, layer_step, matched_config
from brims.attention import attend
from brims.cells import CellState, cell_step, init_cell
from brims.cli import load_run_config, main
from brims.config import BrimsConfig
from brims.gradcheck import GRADCHECK_CONFIG, check_primitives, check_unroll
from brims.tasks import (AddingTask, DigitsTask, IdxFormatError, Shift, bundled_digits, load_idx,
                         predict_mean_baseline_mse)
from brims.telemetry import (AttentionLog, aggregate_shares, export, noise_sweep, read_records, read_table,
                             record_attention)
from brims.tensor import Tensor, backward
from brims.training import Checkpoint, TrainConfig, evaluate, evaluate_shifted, train

import oracles
from conftest import ACCEPTANCE
from helpers import rand_cfg

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = (0, 1, 2)


def verdict(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1


def test_criterion_01_gradient_correctness():
    cfg = GRADCHECK_CONFIG
    assert (cfg.n_modules, cfg.n_active, cfg.d_module, cfg.dtype) == ([3, 2], [2, 1], [8, 8], "float64")
    t0 = time.perf_counter()
    prim = check_primitives()
    model = check_unroll(cfg, steps=3)
    elapsed = time.perf_counter() - t0
    worst = max(max(prim.values()), max(model.values()))
    verdict(1, worst <= 1e-5 and elapsed <= 60,
            f"max rel err {worst:.2e} over {len(prim)} primitive and {len(model)} unroll checks in {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


FREEZE_VARIANTS = ("BRIMS", "HIER_RIMS", "MLD_RIMS", "RIMS")
MODULE_PARAMS = ("cell.wx", "cell.wh", "cell.b", "inq.w", "inq.b", "comq.w", "comq.b")


def _freeze_case(seed):
    rng = np.random.default_rng(seed)
    variant = FREEZE_VARIANTS[seed % len(FREEZE_VARIANTS)]
    L = 1 if variant == "RIMS" else 2
    n = [4] * L if variant == "MLD_RIMS" else [4, 3][:L]
    m = [2] * L if variant == "MLD_RIMS" else [2, 1][:L]
    cfg = BrimsConfig(variant=variant, n_modules=n, n_active=m, d_module=[3] * L, d_att=4, d_v=4, input_dim=2,
                      embed_dim=4, output_dim=2, head_hidden=3, dropout=0.0, cell="lstm" if seed % 2 else "gru")
    arch = Architecture(cfg, seed)
    steps = 10
    per_step = [{k: Tensor(v.data, requires_grad=True) for k, v in arch.params.items()} for _ in range(steps)]
    state = arch.init_state(1)
    for ls in state.layers:
        ls.h = Tensor(rng.uniform(-1, 1, size=ls.h.shape))
        if ls.c is not None:
            ls.c = Tensor(rng.uniform(-1, 1, size=ls.c.shape))
    seq = [arch.embed(rng.uniform(-1, 1, size=(1, 2))) for _ in range(steps)]
    states, prev, traces = [], state, []
    for t in range(steps):
        prev, tr = arch.step(seq[t], prev, per_step[t])
        states.append(prev)
        traces.append(tr)
    loss = T.tsum(arch.head(prev))
    for ls in prev.layers:
        loss = T.add(loss, T.tsum(T.mul(ls.h, Tensor(rng.uniform(0.5, 1.5, size=ls.h.shape)))))
    backward(loss)
    frozen_checks = grad_checks = 0
    for t in range(steps):
        before = state if t == 0 else states[t - 1]
        for l in range(L):
            active = traces[t].layers[l].active[0]
            for k in np.flatnonzero(~active):
                if not np.array_equal(states[t].layers[l].h.data[0, k], before.layers[l].h.data[0, k]):
                    return False, f"seed {seed} step {t} layer {l} module {k}: h changed"
                if cfg.cell_kind == "lstm" and not np.array_equal(states[t].layers[l].c.data[0, k],
                                                                  before.layers[l].c.data[0, k]):
                    return False, f"seed {seed} step {t} layer {l} module {k}: c changed"
                frozen_checks += 1
                for name in MODULE_PARAMS:
                    g = per_step[t][f"l{l}.{name}"].grad
                    if g is not None and g[k].any():
                        return False, f"seed {seed} step {t} layer {l} module {k}: gradient on {name}"
                    grad_checks += 1
    return True, (frozen_checks, grad_checks)


def test_criterion_02_freeze_invariant():
    frozen = grads = 0
    for seed in range(100):
        ok, info = _freeze_case(seed)
        if not ok:
            verdict(2, False, info)
        frozen += info[0]
        grads += info[1]
    verdict(2, frozen > 0, f"{frozen} inactive module-steps bitwise frozen, {grads} per-step gradients exactly zero "
                           f"over 100 seeds x 10 steps")


# ---------------------------------------------------------------- 3

ORACLE_VARIANTS = ("LSTM", "LSTM_H", "LSTM_HB", "LSTM_HA", "LSTM_HAB", "RIMS", "HIER_RIMS", "MLD_RIMS", "BRIMS")


def _oracle_case(trial):
    rng = np.random.default_rng(1000 + trial)
    worst = 0.0

    # attend
    heads = int(rng.integers(1, 3))
    nq, nk, d, dv = (int(v) for v in rng.integers(1, 5, size=4))
    q, k, v = rng.normal(size=(nq, d * heads)), rng.normal(size=(nk, d * heads)), rng.normal(size=(nk, dv * heads))
    out = attend(Tensor(q), Tensor(k), Tensor(v), heads)
    s, r = oracles.attend(q, k, v, heads)
    worst = max(worst, np.abs(out.result.data - r).max(), np.abs(out.scores.data.reshape(heads, nq, nk) - s).max())

    # cell_step
    kind = ("gru", "lstm")[trial % 2]
    d_in, d_h = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    p = init_cell(rng, kind, d_in, d_h)
    p.b.data = rng.normal(size=p.b.shape)
    x, h, c = rng.normal(size=d_in), rng.uniform(-1, 1, size=d_h), rng.normal(size=d_h)
    cs = cell_step(p, Tensor(x), CellState(Tensor(h), Tensor(c) if kind == "lstm" else None))
    if kind == "gru":
        eh, ec = oracles.gru(x.tolist(), h.tolist(), p.wx.data, p.wh.data, p.b.data), None
    else:
        eh, ec = oracles.lstm(x.tolist(), h.tolist(), c.tolist(), p.wx.data, p.wh.data, p.b.data)
    worst = max(worst, np.abs(cs.h.data - eh).max())
    if ec is not None:
        worst = max(worst, np.abs(cs.c.data - ec).max())

    # layer_step on a random state, every layer
    cfg = rand_cfg(rng, ORACLE_VARIANTS[trial % len(ORACLE_VARIANTS)])
    arch = Architecture(cfg, seed=trial)
    interp = oracles.Interpreter(cfg, arch.state_dict())
    lstm_cell = cfg.cell_kind == "lstm"
    for l, layer in enumerate(arch.layers):
        n, dm = cfg.n_modules[l], cfg.d_module[l]
        lower = rng.uniform(-1, 1, size=layer.lower_width)
        higher = rng.uniform(-1, 1, size=layer.higher_width) if layer.top_down else None
        hs, cc = rng.uniform(-1, 1, size=(n, dm)), rng.uniform(-1, 1, size=(n, dm))
        copied = None
        if layer.copy_selection:
            copied = np.zeros((1, n), dtype=bool)
            copied[0, rng.choice(n, size=cfg.n_active[l], replace=False)] = True
        st = LayerState(Tensor(hs[None]), Tensor(cc[None]) if lstm_cell else None, np.ones((1, n), dtype=bool))
        new, tr = layer_step(arch, l, Tensor(lower[None]), None if higher is None else Tensor(higher[None]), st,
                             copied=copied)
        eh, ec, act, shares = interp.layer(l, lower.tolist(), None if higher is None else higher.tolist(),
                                           hs.tolist(), cc.tolist() if lstm_cell else None,
                                           None if copied is None else set(np.flatnonzero(copied[0]).tolist()))
        if act != set(np.flatnonzero(tr.active[0]).tolist()):
            return np.inf
        worst = max(worst, np.abs(new.h.data[0] - np.array(eh)).max())
        if lstm_cell:
            worst = max(worst, np.abs(new.c.data[0] - np.array(ec)).max())
        if shares is not None:
            worst = max(worst, np.abs(tr.scores[0] - np.array(shares)).max())

    # brims_step over a few steps
    xs = rng.uniform(-1, 1, size=(3, 1, cfg.input_dim))
    out, traces = arch.forward(xs)
    state = interp.zero_state()
    for t in range(3):
        state, acts, shares = interp.step(interp.embed(list(xs[t, 0])), state)
        for l in range(cfg.layers):
            if acts[l] != set(np.flatnonzero(traces[t].layers[l].active[0]).tolist()):
                return np.inf
            if shares[l] is not None:
                worst = max(worst, np.abs(traces[t].layers[l].scores[0] - np.array(shares[l])).max())
    worst = max(worst, np.abs(out.data[0] - np.array(interp.head(state))).max())
    return worst


def test_criterion_03_oracle_equivalence():
    errs = [_oracle_case(trial) for trial in range(20)]
    worst = max(errs)
    verdict(3, worst <= 1e-12, f"max abs deviation {worst:.2e} across attend, cell_step, layer_step and "
                               f"brims_step on 20 random configurations")


# ---------------------------------------------------------------- 4


def _structural():
    rng = np.random.default_rng(4)
    xs = rng.uniform(-1, 1, size=(6, 4, 2))
    base = dict(n_modules=[4], n_active=[2], d_module=[4], d_att=4, d_v=4, input_dim=2, embed_dim=4, output_dim=3,
                head_hidden=4, dropout=0.0)
    one = Architecture(BrimsConfig(variant="BRIMS", **base), 7)
    rims = Architecture(BrimsConfig(variant="RIMS", **base), 7)
    rims.load_state_dict(one.state_dict())
    o1, tr1 = one.forward(xs)
    o2, _ = rims.forward(xs)
    no_td = all(tr.layers[0].scores.shape[-1] == 2 for tr in tr1)
    same = np.array_equal(o1.data, o2.data)

    mld = Architecture(BrimsConfig(variant="MLD_RIMS", **{**base, "n_modules": [4, 4, 4], "n_active": [2, 2, 2],
                                                        "d_module": [4, 4, 4]}), 3)
    _, trm = mld.forward(xs)
    copied = all(np.array_equal(tr.layers[0].active, tr.layers[l].active) for tr in trm for l in (1, 2))

    full_cfg = BrimsConfig(variant="BRIMS", **{**base, "n_modules": [3, 2], "n_active": [3, 2], "d_module": [4, 4]})
    full = Architecture(full_cfg, 5)
    of, trf = full.forward(xs)
    everything = all(tr.layers[l].active.all() for tr in trf for l in range(2))
    # selection ordering comes from null scores; rescaling the null key reorders them without changing the set
    other = Architecture(full_cfg, 5)
    for l in range(2):
        other.params[f"l{l}.null.k"].data = -3.0 * other.params[f"l{l}.null.k"].data
    same_null_change = all(np.array_equal(a.layers[l].active, b.layers[l].active)
                           for a, b in zip(trf, other.forward(xs)[1]) for l in range(2))
    forced = [[np.ones(3, dtype=bool), np.ones(2, dtype=bool)]] * xs.shape[0]
    st, _ = full.unroll([full.embed(x) for x in xs], full.init_state(4), force_active=forced)
    same_forced = np.array_equal(full.head(st).data, of.data)
    # permuting the modules of a single-layer m=n network permutes its state and nothing else
    perm = np.array([2, 0, 3, 1])
    eq_cfg = BrimsConfig(variant="RIMS", **{**base, "n_active": [4]})
    a, b = Architecture(eq_cfg, 9), Architecture(eq_cfg, 9)
    for name, t in b.params.items():
        if name.startswith("l0.") and not name.startswith(("l0.null", "l0.bu")):
            t.data = a.params[name].data[perm]
    w1 = a.params["head.w1"].data.reshape(4, 4, -1)
    b.params["head.w1"].data = w1[perm].reshape(16, -1)
    oa, ob = a.forward(xs)[0].data, b.forward(xs)[0].data
    equivariant = np.abs(oa - ob).max() <= 1e-12
    checks = {"L=1 has no top-down column": no_td, "L=1 BRIMs equals RIMS": same, "MLD copies selection": copied,
              "m=n activates all": everything, "m=n unaffected by null-score order": same_null_change,
              "m=n equals forced full selection": same_forced, "m=n module permutation equivariant": equivariant}
    return checks


def test_criterion_04_structural_reductions():
    checks = _structural()
    failed = [k for k, v in checks.items() if not v]
    verdict(4, not failed, "all structural checks hold" if not failed else f"failed: {', '.join(failed)}")


# ---------------------------------------------------------------- 5


@pytest.fixture(scope="module")
def adding_runs():
    rc = load_run_config(CONFIGS / "adding.json")
    brims_cfg, tcfg, spec = rc["model"], rc["train"], dict(rc["task"])
    spec.pop("task")
    models = {"BRIMS": brims_cfg, "LSTM": matched_config(brims_cfg, "LSTM")}
    out = {}
    for name, cfg in models.items():
        t0 = time.perf_counter()
        rows = []
        for s in SEEDS:
            task = AddingTask(**{**spec, "seed": s})
            res = train(Architecture(cfg, seed=s), task, TrainConfig(**{**tcfg.__dict__, "seed": s}))
            rows.append({r[0]: r[2] for r in evaluate_shifted(res.best, task, ["len=100", "len=200"])})
        out[name] = (rows, time.perf_counter() - t0, Architecture(cfg).parameter_count())
    return out


def test_criterion_05_adding_task(adding_runs):
    b_rows, b_time, b_params = adding_runs["BRIMS"]
    l_rows, l_time, l_params = adding_runs["LSTM"]
    mean = lambda rows, key: float(np.mean([r[key] for r in rows]))
    b100, b200, l100, l200 = mean(b_rows, "len=100"), mean(b_rows, "len=200"), mean(l_rows, "len=100"), mean(l_rows, "len=200")
    base = predict_mean_baseline_mse(2)
    ok_a = b100 < 0.02
    ok_b = b200 < l200
    ok_c = b100 < base and l100 < base
    ok_time = b_time <= 15 * 60 and l_time <= 15 * 60
    verdict(5, ok_a and ok_b and ok_c and ok_time,
            f"BRIMs ({b_params} params) T=100 {b100:.4g}, T=200 {b200:.4g}; LSTM ({l_params} params) T=100 "
            f"{l100:.4g}, T=200 {l200:.4g}; baseline {base:.4g}; train {b_time / 60:.1f} / {l_time / 60:.1f} min")


# ---------------------------------------------------------------- 6 and 7


@pytest.fixture(scope="module")
def digit_runs():
    rc = load_run_config(CONFIGS / "digits.json")
    brims_cfg, tcfg, spec = rc["model"], rc["train"], dict(rc["task"])
    spec.pop("task")
    models = {"BRIMS": brims_cfg, "LSTM": matched_config(brims_cfg, "LSTM")}
    out = {}
    for name, cfg in models.items():
        t0 = time.perf_counter()
        runs = []
        for s in SEEDS:
            task = DigitsTask(**{**spec, "seed": s})
            res = train(Architecture(cfg, seed=s), task, TrainConfig(**{**tcfg.__dict__, "seed": s}))
            acc = {r[0]: r[2] for r in evaluate_shifted(res.best, task, ["res=14", "res=16", "res=19"])
                   if r[1] == "accuracy"}
            runs.append((res, task, acc))
        out[name] = (runs, time.perf_counter() - t0)
    return out


def test_criterion_06_noise_reliance(digit_runs):
    res, task, _ = digit_runs["BRIMS"][0][0]
    log = noise_sweep(res.best.build(), task, rhos=(0.0, 0.125, 0.25, 0.5), layers=(0,))
    table = aggregate_shares(log, ("rho",))
    rows = {r[0]: r for r in table.rows}
    reliance = {rho: rows[rho][1] + rows[rho][3] for rho in rows}
    bu = [rows[rho][2] for rho in (0.0, 0.125, 0.25, 0.5)]
    margin = reliance[0.5] - reliance[0.0]
    monotone = all(b <= a + 0.02 for a, b in zip(bu, bu[1:]))
    verdict(6, margin > 0 and monotone and res.best.train.epochs <= 20,
            f"null+top-down {reliance[0.0]:.4f} -> {reliance[0.5]:.4f} (margin {margin:+.4f}); "
            f"bottom-up {', '.join(f'{b:.4f}' for b in bu)}")


def test_criterion_07_resolution_shift(digit_runs):
    drops, detail = {}, []
    for name in ("BRIMS", "LSTM"):
        runs, elapsed = digit_runs[name]
        d = [acc["res=14x14"] - acc["res=19x19"] for _, _, acc in runs]
        drops[name] = float(np.mean(d))
        acc14 = np.mean([acc["res=14x14"] for _, _, acc in runs])
        acc16 = np.mean([acc["res=16x16"] for _, _, acc in runs])
        acc19 = np.mean([acc["res=19x19"] for _, _, acc in runs])
        detail.append(f"{name} acc 14/16/19 {acc14:.3f}/{acc16:.3f}/{acc19:.3f} drop {drops[name]:+.3f} "
                      f"({elapsed / 60:.1f} min)")
        if elapsed > 30 * 60:
            verdict(7, False, f"{name} took {elapsed / 60:.1f} min")
    verdict(7, drops["BRIMS"] <= drops["LSTM"], "; ".join(detail))


# ---------------------------------------------------------------- 8


def test_criterion_08_parameter_parity():
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main(["param-count", "--config", str(CONFIGS / "brims.json"), "--compare", "lstm"])
    lines = buf.getvalue().strip().splitlines()
    brims_n = int(lines[0].split("\t")[1])
    lstm_n = int(lines[1].split("\t")[1])
    ratio = float(re.search(r"ratio=([0-9.]+)", lines[1]).group(1))
    gap = abs(lstm_n - brims_n) / brims_n
    verdict(8, code == 0 and gap <= 0.10 and abs(ratio - lstm_n / brims_n) < 1e-4,
            f"BRIMs {brims_n} vs matched LSTM {lstm_n} parameters ({gap:.2%} apart)")


# ---------------------------------------------------------------- 9


def test_criterion_09_reproducibility(tmp_path):
    cfg = str(CONFIGS / "tiny.json")
    with redirect_stdout(io.StringIO()):
        codes = [main(["train", "--config", cfg, "--seed", "3", "--out", str(tmp_path / r)]) for r in ("a", "b")]
    csv_a, csv_b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    rc = load_run_config(cfg)
    spec = dict(rc["task"])
    spec.pop("task")
    task = AddingTask(**{**spec, "seed": 3})
    res = train(Architecture(rc["model"], seed=3), task, TrainConfig(**{**rc["train"].__dict__, "seed": 3}))
    shifts = ["identity", "len=20", "k=3"]
    direct = evaluate_shifted(res.best, task, shifts)
    res.best.save(tmp_path / "best.ckpt")
    reloaded = evaluate_shifted(Checkpoint.load(tmp_path / "best.ckpt"), task, shifts)
    from_cli = evaluate(Checkpoint.load(tmp_path / "a" / "best.ckpt").build(), task.validation())
    ok = codes == [0, 0] and csv_a == csv_b and direct == reloaded and from_cli["mse"] == direct[0][2]
    verdict(9, ok, f"metrics CSVs identical ({len(csv_a)} bytes); checkpoint round trip reproduces "
                   f"{len(direct)} evaluation rows exactly")


# ---------------------------------------------------------------- 10


def test_criterion_10_format_fidelity(tmp_path):
    img_p, lab_p = bundled_digits()
    magics = []
    for p in (img_p, lab_p):
        with gzip.open(p, "rb") as fh:
            raw = fh.read()
        magics.append(int.from_bytes(raw[:4], "big"))
        (tmp_path / (p.name + ".cut")).write_bytes(raw[:-7])
    images, labels = load_idx(img_p), load_idx(lab_p)
    rejected = 0
    for p in (img_p, lab_p):
        try:
            load_idx(tmp_path / (p.name + ".cut"))
        except IdxFormatError:
            rejected += 1
    task = DigitsTask(resolution=8, n_train=20, n_test=16, seed=0)
    arch = Architecture(BrimsConfig(n_modules=[3, 2], n_active=[2, 1], d_module=[4, 4], d_att=4, d_v=4,
                                    embed_dim=4, head_hidden=4, dropout=0.0), 0)
    log = record_attention(arch, task.shifted(Shift(rho=0.25)), run_id="fmt", rho=0.25, layers=None)
    records = log.records()
    export(log, "ndjson", tmp_path / "r.ndjson")
    export(log, "csv", tmp_path / "r.csv")
    nd_ok = read_records(tmp_path / "r.ndjson", "ndjson") == records
    back = AttentionLog.from_records(read_records(tmp_path / "r.csv", "csv"))
    csv_ok = (np.abs(back.shares - log.shares).max() <= 1e-12 and back.run_id == log.run_id
              and np.array_equal(back.active, log.active) and np.array_equal(back.step, log.step))
    sums_ok = np.abs(log.shares.sum(axis=1) - 1).max() <= 1e-6
    curve = aggregate_shares(log, ("rho", "layer"))
    export(curve, "csv", tmp_path / "c.csv")
    curve_ok = read_table(tmp_path / "c.csv", "csv", curve.types).rows == curve.rows
    ok = (magics == [0x803, 0x801] and images.shape == (5000, 28, 28) and labels.shape == (5000,)
          and rejected == 2 and nd_ok and csv_ok and sums_ok and curve_ok)
    verdict(10, ok, f"IDX magics {magics[0]:#010x}/{magics[1]:#010x}, {rejected}/2 truncated files rejected, "
                    f"{len(records)} attention records round-trip (NDJSON exact, CSV <= 1e-12)")
