"""Attention telemetry: per-module source shares, aggregation, export and run manifests.

A record states how much of a module's inter-layer attention went to the null
row, to the layer below and to the layer above at one step of one sample.
Logs are columnar so a sweep over a test set stays compact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .arch import Architecture, StepTrace
from .tasks import SequenceBatch, Shift

SHARE_TOL = 1e-6

RECORD_COLUMNS = ("run_id", "rho", "sample", "step", "layer", "module", "null", "bottom_up", "top_down", "active")
RECORD_TYPES = ("str", "float", "int", "int", "int", "int", "float", "float", "float", "bool")


@dataclass(frozen=True)
class AttentionLogRecord:
    run_id: str
    rho: float
    sample: int
    step: int
    layer: int
    module: int
    null: float
    bottom_up: float
    top_down: float
    active: bool

    def __post_init__(self):
        s = (self.null, self.bottom_up, self.top_down)
        if min(s) < 0 or abs(sum(s) - 1.0) > SHARE_TOL:
            raise ValueError(f"shares {s} must be non-negative and sum to 1")


@dataclass
class AttentionLog:
    """Columnar attention records; every array has one entry per record."""

    run_id: list[str] = field(default_factory=list)
    rho: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sample: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    step: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    layer: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    module: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    shares: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    active: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self) -> int:
        return len(self.sample)

    @classmethod
    def from_records(cls, records: Sequence[AttentionLogRecord]) -> "AttentionLog":
        return cls(
            [r.run_id for r in records],
            np.array([r.rho for r in records], dtype=float),
            np.array([r.sample for r in records], dtype=np.int64),
            np.array([r.step for r in records], dtype=np.int64),
            np.array([r.layer for r in records], dtype=np.int64),
            np.array([r.module for r in records], dtype=np.int64),
            np.array([(r.null, r.bottom_up, r.top_down) for r in records], dtype=float).reshape(-1, 3),
            np.array([r.active for r in records], dtype=bool),
        )

    def records(self) -> list[AttentionLogRecord]:
        return [AttentionLogRecord(self.run_id[i], float(self.rho[i]), int(self.sample[i]), int(self.step[i]),
                                   int(self.layer[i]), int(self.module[i]), float(self.shares[i, 0]),
                                   float(self.shares[i, 1]), float(self.shares[i, 2]), bool(self.active[i]))
                for i in range(len(self))]

    def select(self, mask: np.ndarray) -> "AttentionLog":
        idx = np.flatnonzero(mask)
        return AttentionLog([self.run_id[i] for i in idx], self.rho[idx], self.sample[idx], self.step[idx],
                            self.layer[idx], self.module[idx], self.shares[idx], self.active[idx])

    @staticmethod
    def concat(logs: Sequence["AttentionLog"]) -> "AttentionLog":
        if not logs:
            return AttentionLog()
        return AttentionLog(
            [r for lg in logs for r in lg.run_id],
            np.concatenate([lg.rho for lg in logs]),
            np.concatenate([lg.sample for lg in logs]),
            np.concatenate([lg.step for lg in logs]),
            np.concatenate([lg.layer for lg in logs]),
            np.concatenate([lg.module for lg in logs]),
            np.concatenate([lg.shares for lg in logs]).reshape(-1, 3),
            np.concatenate([lg.active for lg in logs]),
        )

    def check(self) -> None:
        if len(self) and (self.shares.min() < 0 or np.abs(self.shares.sum(axis=1) - 1.0).max() > SHARE_TOL):
            raise ValueError("share rows must be non-negative and sum to 1")

    def to_table(self) -> "Table":
        return Table(RECORD_COLUMNS, RECORD_TYPES, [astuple_record(r) for r in self.records()])


def astuple_record(r: AttentionLogRecord) -> tuple:
    return tuple(getattr(r, c) for c in RECORD_COLUMNS)


def log_from_traces(traces: Sequence[StepTrace], run_id: str = "run", rho: float = 0.0, sample_offset: int = 0,
                    layers: Iterable[int] | None = None) -> AttentionLog:
    """Flatten per-step traces of a batch into records ordered by (sample, step, layer, module)."""
    if not traces:
        return AttentionLog()
    n_layers = len(traces[0].layers)
    want = range(n_layers) if layers is None else sorted(set(layers))
    parts = []
    for l in want:
        stack = [tr.layers[l].scores for tr in traces]
        if stack[0] is None:
            continue
        sc = np.stack(stack, axis=1)  # (B, T, n, S)
        act = np.stack([tr.layers[l].active for tr in traces], axis=1)
        b, t, n, s = sc.shape
        shares = np.zeros((b, t, n, 3))
        shares[..., :s] = sc
        si, ti, mi = np.meshgrid(np.arange(b), np.arange(t), np.arange(n), indexing="ij")
        parts.append((si.ravel(), ti.ravel(), np.full(b * t * n, l), mi.ravel(), shares.reshape(-1, 3), act.ravel()))
    if not parts:
        return AttentionLog()
    sample, step, layer, module, shares, active = (np.concatenate(c) for c in zip(*parts))
    order = np.lexsort((module, layer, step, sample))
    k = len(order)
    return AttentionLog([run_id] * k, np.full(k, float(rho)), sample[order] + sample_offset, step[order],
                        layer[order], module[order], shares[order], active[order])


def record_attention(arch: Architecture, batch: SequenceBatch, run_id: str = "run", rho: float = 0.0,
                     layers: Iterable[int] | None = (0,), batch_size: int = 250) -> AttentionLog:
    """Eval-mode forward over ``batch`` with attention logging."""
    logs = []
    with T.no_grad():
        for i in range(0, len(batch), batch_size):
            sub = batch.take(slice(i, i + batch_size))
            _, traces = arch.forward(sub.inputs)
            logs.append(log_from_traces(traces, run_id, rho, i, layers))
    return AttentionLog.concat(logs)


def noise_sweep(arch: Architecture, task, rhos: Sequence[float] = (0.0, 0.125, 0.25, 0.5), run_id: str = "run",
                layers: Iterable[int] | None = (0,), n_samples: int | None = None) -> AttentionLog:
    """Attention logs on the corrupted test set for each corruption fraction."""
    logs = []
    for rho in rhos:
        batch = task.shifted(Shift(rho=float(rho)))
        if n_samples is not None:
            batch = batch.take(slice(0, n_samples))
        logs.append(record_attention(arch, batch, run_id, rho, layers))
    return AttentionLog.concat(logs)


# --------------------------------------------------------------------------
# aggregation


@dataclass
class Table:
    columns: tuple[str, ...]
    types: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def __post_init__(self):
        if len(self.columns) != len(self.types):
            raise ValueError("columns and types differ in length")
        for t in self.types:
            if t not in _PARSERS:
                raise ValueError(f"unknown column type {t!r}")

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def as_dicts(self) -> list[dict]:
        return [dict(zip(self.columns, r)) for r in self.rows]


GROUP_KEYS = ("rho", "layer", "module")


def aggregate_shares(log: AttentionLog | Sequence[AttentionLogRecord], group_by: Sequence[str] = ("rho",),
                     active_only: bool = False) -> Table:
    """Mean (null, bottom_up, top_down) per group, sorted by group key."""
    if not isinstance(log, AttentionLog):
        log = AttentionLog.from_records(list(log))
    if isinstance(group_by, str):
        group_by = (group_by,)
    for g in group_by:
        if g not in GROUP_KEYS:
            raise ValueError(f"cannot group by {g!r}; expected a subset of {GROUP_KEYS}")
    if active_only:
        log = log.select(log.active)
    if len(log) == 0:
        raise ValueError("no records to aggregate")
    keys = np.stack([getattr(log, g) for g in group_by], axis=1) if group_by else np.zeros((len(log), 0))
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv, minlength=len(uniq))
    sums = np.stack([np.bincount(inv, weights=log.shares[:, j], minlength=len(uniq)) for j in range(3)], axis=1)
    means = sums / counts[:, None]
    types = tuple("float" if g == "rho" else "int" for g in group_by)
    rows = []
    for u, mu, c in zip(uniq, means, counts):
        key = tuple(float(v) if t == "float" else int(v) for v, t in zip(u, types))
        rows.append(key + (float(mu[0]), float(mu[1]), float(mu[2]), int(c)))
    return Table(tuple(group_by) + ("null", "bottom_up", "top_down", "count"), types + ("float",) * 3 + ("int",), rows)


def usage_statistics(log: AttentionLog | Sequence[AttentionLogRecord], threshold: float = 0.5,
                     min_steps: int = 5) -> tuple[float, float]:
    """Fraction of samples with at least ``min_steps`` steps where some module's
    top-down share reaches ``threshold``, and the grand mean top-down share."""
    if not isinstance(log, AttentionLog):
        log = AttentionLog.from_records(list(log))
    if len(log) == 0:
        return 0.0, 0.0
    runs = np.unique(np.asarray(log.run_id), return_inverse=True)[1].reshape(-1)
    samp = np.stack([runs, np.round(log.rho * 1e9).astype(np.int64), log.sample], axis=1)
    hit = log.shares[:, 2] >= threshold
    keys = np.concatenate([samp, log.step[:, None]], axis=1)
    step_keys, step_inv = np.unique(keys, axis=0, return_inverse=True)
    step_hit = np.zeros(len(step_keys), dtype=bool)
    np.logical_or.at(step_hit, step_inv.reshape(-1), hit)
    sample_keys, sample_inv = np.unique(step_keys[:, :3], axis=0, return_inverse=True)
    hits_per_sample = np.bincount(sample_inv.reshape(-1), weights=step_hit.astype(float), minlength=len(sample_keys))
    return float(np.mean(hits_per_sample >= min_steps)), float(log.shares[:, 2].mean())


# --------------------------------------------------------------------------
# export


def _parse_bool(s: str) -> bool:
    if s in ("true", "True", "1"):
        return True
    if s in ("false", "False", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_PARSERS = {"str": str, "int": int, "float": float, "bool": _parse_bool}


def _fmt(v, t: str) -> str:
    if t == "float":
        return format(float(v), ".17g")
    if t == "bool":
        return "true" if v else "false"
    return str(v)


def export(obj: AttentionLog | Table, fmt: str, path: str | Path) -> None:
    """Write records or a table as CSV (17 significant digits) or NDJSON (one object per line)."""
    table = obj.to_table() if isinstance(obj, AttentionLog) else obj
    if isinstance(obj, AttentionLog):
        obj.check()
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(table.columns)
            for row in table.rows:
                w.writerow([_fmt(v, t) for v, t in zip(row, table.types)])
    elif fmt == "ndjson":
        with open(path, "w") as fh:
            fh.write(json.dumps({"columns": list(table.columns), "types": list(table.types)}) + "\n")
            for row in table.rows:
                fh.write(json.dumps({c: _json_value(v, t) for c, v, t in zip(table.columns, row, table.types)}) + "\n")
    else:
        raise ValueError(f"unknown export format {fmt!r}; expected csv or ndjson")


def _json_value(v, t: str):
    if t == "float":
        v = float(v)
        if not math.isfinite(v):
            raise ValueError("non-finite values cannot be exported")
        return v
    if t == "int":
        return int(v)
    if t == "bool":
        return bool(v)
    return str(v)


def read_table(path: str | Path, fmt: str, types: Sequence[str] | None = None) -> Table:
    """Inverse of :func:`export`. CSV files carry no types, so pass ``types``
    unless the header matches the record schema."""
    path = Path(path)
    if fmt == "csv":
        with open(path, newline="") as fh:
            rdr = csv.reader(fh)
            header = tuple(next(rdr))
            if types is None:
                if header != RECORD_COLUMNS:
                    raise ValueError("column types required for a non-record CSV")
                types = RECORD_TYPES
            parsers = [_PARSERS[t] for t in types]
            rows = [tuple(p(v) for p, v in zip(parsers, r)) for r in rdr]
        return Table(header, tuple(types), rows)
    if fmt == "ndjson":
        with open(path) as fh:
            head = json.loads(fh.readline())
            cols, tys = tuple(head["columns"]), tuple(head["types"])
            rows = []
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    rows.append(tuple(_PARSERS[t](d[c]) if t != "bool" else bool(d[c]) for c, t in zip(cols, tys)))
        return Table(cols, tys, rows)
    raise ValueError(f"unknown format {fmt!r}")


def read_records(path: str | Path, fmt: str) -> list[AttentionLogRecord]:
    table = read_table(path, fmt)
    if table.columns != RECORD_COLUMNS:
        raise ValueError(f"not an attention record file: columns {table.columns}")
    return [AttentionLogRecord(*row) for row in table.rows]


# --------------------------------------------------------------------------
# manifests


def config_hash(config: dict) -> str:
    """Git blob hash of the canonical JSON encoding of ``config``."""
    data = canonical_json(config)
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    config: dict
    seed: int
    config_hash: str = ""
    data_sources: list[dict] = field(default_factory=list)
    started: str = field(default_factory=_now)
    finished: str | None = None

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)

    def verify(self) -> bool:
        return self.config_hash == config_hash(self.config)

    def finish(self) -> None:
        self.finished = _now()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())
