import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brims.arch import Architecture
from brims.config import BrimsConfig
from brims.tasks import DigitsTask, Shift
from brims.telemetry import (RECORD_COLUMNS, AttentionLog, AttentionLogRecord, RunManifest, Table, aggregate_shares,
                             config_hash, export, log_from_traces, noise_sweep, read_records, read_table,
                             record_attention, usage_statistics)


def rec(sample=0, step=0, module=0, shares=(0.2, 0.3, 0.5), rho=0.0, active=True, run="r", layer=0):
    return AttentionLogRecord(run, rho, sample, step, layer, module, *shares, active)


def test_record_rejects_bad_shares():
    with pytest.raises(ValueError):
        rec(shares=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        rec(shares=(-0.1, 0.6, 0.5))
    rec(shares=(0.5, 0.5 + 5e-7, 0.0))


def test_aggregate_example():
    records = [rec(shares=(0.2, 0.8, 0.0), rho=0.0), rec(shares=(0.4, 0.6, 0.0), rho=0.0, module=1),
               rec(shares=(0.1, 0.2, 0.7), rho=0.5, active=False)]
    t = aggregate_shares(records, ("rho",))
    assert t.columns == ("rho", "null", "bottom_up", "top_down", "count")
    assert t.rows[0][0] == 0.0 and t.rows[0][1:4] == pytest.approx((0.3, 0.7, 0.0)) and t.rows[0][4] == 2
    assert t.rows[1] == pytest.approx((0.5, 0.1, 0.2, 0.7, 1))
    only = aggregate_shares(records, ("rho",), active_only=True)
    assert len(only.rows) == 1
    with pytest.raises(ValueError):
        aggregate_shares([], ("rho",))
    with pytest.raises(ValueError):
        aggregate_shares(records, ("sample",))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([0.0, 0.25]), st.integers(0, 2), st.floats(0, 1), st.floats(0, 1)),
                min_size=1, max_size=30))
def test_aggregate_matches_python_grouping(items):
    records = []
    for i, (rho, module, a, b) in enumerate(items):
        a, b = min(a, 1.0), min(b, 1.0 - min(a, 1.0))
        records.append(rec(sample=i, module=module, rho=rho, shares=(a, b, max(0.0, 1.0 - a - b))))
    table = aggregate_shares(records, ("rho", "module"))
    groups = {}
    for r in records:
        groups.setdefault((r.rho, r.module), []).append((r.null, r.bottom_up, r.top_down))
    assert [row[:2] for row in table.rows] == sorted(groups)
    for row in table.rows:
        vals = groups[row[:2]]
        assert row[5] == len(vals)
        for j in range(3):
            assert row[2 + j] == pytest.approx(sum(v[j] for v in vals) / len(vals), abs=1e-12)
        assert sum(row[2:5]) == pytest.approx(1.0, abs=1e-9)


def test_usage_statistics_example():
    records = []
    # sample 0: top-down heavy on 5 steps, sample 1: only 4 steps
    for s, heavy in ((0, 5), (1, 4)):
        for t in range(6):
            td = 0.6 if t < heavy else 0.1
            records.append(rec(sample=s, step=t, module=0, shares=(1 - td, 0.0, td)))
            records.append(rec(sample=s, step=t, module=1, shares=(1.0, 0.0, 0.0)))
    frac, mean_td = usage_statistics(records, threshold=0.5, min_steps=5)
    assert frac == 0.5
    assert mean_td == pytest.approx(np.mean([r.top_down for r in records]))
    assert usage_statistics([]) == (0.0, 0.0)


def _tiny_arch():
    cfg = BrimsConfig(n_modules=[3, 2], n_active=[2, 1], d_module=[4, 4], d_att=4, d_v=4, input_dim=1, embed_dim=4,
                      output_dim=10, head_hidden=4, dropout=0.0)
    return Architecture(cfg, 0)


def test_log_from_traces_orders_and_pads():
    arch = _tiny_arch()
    xs = np.random.default_rng(0).random((5, 2, 1))
    _, traces = arch.forward(xs)
    log = log_from_traces(traces, "x", 0.25, sample_offset=10, layers=None)
    assert len(log) == 2 * 5 * (3 + 2)
    keys = list(zip(log.sample, log.step, log.layer, log.module))
    assert keys == sorted(keys) and log.sample.min() == 10
    top = log.select(log.layer == 1)
    assert not top.shares[:, 2].any()
    first = log.records()[0]
    np.testing.assert_allclose((first.null, first.bottom_up, first.top_down), traces[0].layers[0].scores[0, 0])
    assert first.active == bool(traces[0].layers[0].active[0, 0])


def test_record_attention_batches_consistently():
    arch = _tiny_arch()
    task = DigitsTask(resolution=6, n_train=20, n_test=30, seed=0)
    batch = task.shifted(Shift(res=(6, 6)))
    whole = record_attention(arch, batch, batch_size=30)
    parts = record_attention(arch, batch, batch_size=7)
    assert np.array_equal(whole.sample, parts.sample)
    np.testing.assert_allclose(whole.shares, parts.shares, atol=1e-12)
    sweep = noise_sweep(arch, task, rhos=(0.0, 0.5), n_samples=4)
    assert sorted(set(sweep.rho.tolist())) == [0.0, 0.5] and len(sweep) == 2 * 4 * 36 * 3


@pytest.mark.parametrize("fmt", ["csv", "ndjson"])
def test_record_export_round_trip(tmp_path, fmt):
    records = [rec(sample=1, shares=(0.1, 0.2, 0.7)), rec(sample=2, shares=(1 / 3, 1 / 3, 1 / 3), rho=0.125,
                                                         active=False, run="run,with\"quote")]
    export(AttentionLog.from_records(records), fmt, tmp_path / f"r.{fmt}")
    assert read_records(tmp_path / f"r.{fmt}", fmt) == records


@pytest.mark.parametrize("fmt", ["csv", "ndjson"])
def test_table_export_round_trip(tmp_path, fmt):
    t = Table(("rho", "null", "count"), ("float", "float", "int"), [(0.1, 0.1 + 0.2, 3), (0.5, 1e-17, 0)])
    export(t, fmt, tmp_path / f"t.{fmt}")
    back = read_table(tmp_path / f"t.{fmt}", fmt, types=t.types if fmt == "csv" else None)
    assert back.rows == t.rows and back.columns == t.columns


def test_export_errors(tmp_path):
    with pytest.raises(ValueError):
        export(Table(("a",), ("float",), []), "xml", tmp_path / "x")
    with pytest.raises(ValueError):
        export(Table(("a",), ("float",), [(float("nan"),)]), "ndjson", tmp_path / "x")
    export(Table(("a",), ("float",), [(1.0,)]), "csv", tmp_path / "y.csv")
    with pytest.raises(ValueError):
        read_table(tmp_path / "y.csv", "csv")
    assert RECORD_COLUMNS[0] == "run_id"


def test_config_hash_matches_git_blob_hash():
    # reference values from `git hash-object --stdin`
    assert config_hash({"b": [2, 3], "a": 1}) == "f33a8f81e4ca4d0f42951a566cba5573682d8645"
    assert config_hash({}) == "9e26dfeeb6e641a33dae4961196235bdb965b21b"


def test_manifest_round_trip_and_verify(tmp_path):
    m = RunManifest({"model": {"variant": "BRIMS"}}, seed=3, data_sources=[{"path": "x", "sha256": "0"}])
    assert m.verify() and m.finished is None
    m.finish()
    m.save(tmp_path / "manifest.json")
    back = RunManifest.from_json((tmp_path / "manifest.json").read_text())
    assert back == m and back.verify()
    back.config["model"]["variant"] = "RIMS"
    assert not back.verify()
