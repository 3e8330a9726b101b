"""Optimisation loop, checkpoints and evaluation under distribution shift."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .arch import Architecture, NetworkState
from .config import BrimsConfig, ConfigError, _from_dict
from .tasks import SequenceBatch, Shift
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "split", "metric", "value", "seed")


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0
    clip_mode: str = "global_norm"
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    eval_every: int = 1
    eval_batch_size: int = 500

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError("train.lr", f"must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"train.{name}", f"must lie in (0, 1), got {v}")
        if not self.eps > 0:
            raise ConfigError("train.eps", f"must be positive, got {self.eps}")
        if not self.clip > 0:
            raise ConfigError("train.clip", f"must be positive, got {self.clip}")
        if self.clip_mode not in ("global_norm", "value"):
            raise ConfigError("train.clip_mode", f"expected 'global_norm' or 'value', got {self.clip_mode!r}")
        for name in ("epochs", "batch_size", "eval_every", "eval_batch_size", "seed"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < (0 if name in ("epochs", "seed") else 1):
                raise ConfigError(f"train.{name}", f"invalid value {v!r}")

    @classmethod
    def from_dict(cls, d: dict, path: str = "train") -> "TrainConfig":
        return _from_dict(cls, d, path)


# --------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, Tensor], st: OptimizerState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, in place. Parameters without a gradient are skipped."""
    live = {k: p for k, p in params.items() if p.grad is not None}
    for name, p in live.items():
        if p.grad.shape != p.shape:
            raise T.DimensionError(f"gradient of {name} has shape {p.grad.shape}, parameter {p.shape}")
        if not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name} at optimiser step {st.step + 1}")
    st.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** st.step
    c2 = 1.0 - b2 ** st.step
    for name, p in live.items():
        g = p.grad
        m = st.m.get(name)
        if m is None:
            m = st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        v = st.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def clip_global_norm(grads: Sequence[np.ndarray], tau: float) -> float:
    """Scale every gradient in place by ``tau / ||g||`` when the joint norm exceeds ``tau``."""
    if tau <= 0:
        raise ValueError("clip threshold must be positive")
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm <= tau:
        return 1.0
    s = tau / norm
    for g in grads:
        g *= s
    return s


def clip_values(grads: Sequence[np.ndarray], tau: float) -> None:
    for g in grads:
        np.clip(g, -tau, tau, out=g)


# --------------------------------------------------------------------------
# losses and evaluation


def loss_from_output(kind: str, out: Tensor, target: np.ndarray) -> Tensor:
    if kind == "classification":
        return T.cross_entropy(out, np.asarray(target, dtype=np.int64))
    if kind == "regression":
        return T.mse(out, Tensor._wrap(np.asarray(target, dtype=out.dtype)))
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_head(arch: Architecture, final_state: NetworkState, target: np.ndarray, params=None) -> Tensor:
    """Head prediction from the final state followed by the matching loss."""
    return loss_from_output(arch.cfg.head, arch.head(final_state, params), target)


def evaluate(arch: Architecture, batch: SequenceBatch, batch_size: int = 500) -> dict[str, float]:
    """Eval-mode metrics: ``loss``/``accuracy`` for classification, ``mse`` for regression."""
    n = len(batch)
    total_loss, correct = 0.0, 0
    with T.no_grad():
        for i in range(0, n, batch_size):
            sub = batch.take(slice(i, i + batch_size))
            out, _ = arch.forward(sub.inputs)
            loss = loss_from_output(arch.cfg.head, out, sub.targets)
            total_loss += float(loss.data) * len(sub)
            if arch.cfg.head == "classification":
                correct += int(np.sum(out.data.argmax(axis=1) == sub.targets))
    if arch.cfg.head == "classification":
        return {"loss": total_loss / n, "accuracy": correct / n}
    return {"mse": total_loss / n}


def primary_metric(kind: str) -> tuple[str, bool]:
    """Metric used for best-checkpoint selection and whether higher is better."""
    return ("accuracy", True) if kind == "classification" else ("mse", False)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"BRIMSCKP"
VERSION = 1
_DTYPE_CODES = {np.dtype("float64"): 1, np.dtype("float32"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_GROUPS = ("param", "adam_m", "adam_v")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: BrimsConfig
    params: dict[str, np.ndarray]
    train: TrainConfig | None = None
    optimizer: OptimizerState | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, arch: Architecture, tcfg: TrainConfig | None = None, opt: OptimizerState | None = None,
                **meta) -> "Checkpoint":
        opt_copy = None
        if opt is not None:
            opt_copy = OptimizerState({k: v.copy() for k, v in opt.m.items()},
                                      {k: v.copy() for k, v in opt.v.items()}, opt.step)
        # normalise through JSON so a captured checkpoint equals its reloaded copy
        return cls(arch.cfg, arch.state_dict(), tcfg, opt_copy, json.loads(json.dumps(meta)))

    def build(self) -> Architecture:
        arch = Architecture(self.model)
        arch.load_state_dict(self.params)
        return arch

    def to_bytes(self) -> bytes:
        header = {
            "model": self.model.to_dict(),
            "train": asdict(self.train) if self.train is not None else None,
            "optimizer_step": self.optimizer.step if self.optimizer is not None else None,
            "meta": self.meta,
        }
        hb = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        buf.write(struct.pack("<Q", len(hb)))
        buf.write(hb)
        entries = [(0, k, v) for k, v in self.params.items()]
        if self.optimizer is not None:
            entries += [(1, k, v) for k, v in self.optimizer.m.items()]
            entries += [(2, k, v) for k, v in self.optimizer.v.items()]
        buf.write(struct.pack("<I", len(entries)))
        for group, name, arr in entries:
            arr = np.ascontiguousarray(arr)
            nb = name.encode()
            buf.write(struct.pack("<BH", group, len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        try:
            (version,) = struct.unpack_from("<I", raw, 8)
            if version != VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            (hlen,) = struct.unpack_from("<Q", raw, 12)
            off = 20
            header = json.loads(raw[off:off + hlen])
            off += hlen
            (count,) = struct.unpack_from("<I", raw, off)
            off += 4
            groups: list[dict[str, np.ndarray]] = [{}, {}, {}]
            for _ in range(count):
                group, nlen = struct.unpack_from("<BH", raw, off)
                off += 3
                name = raw[off:off + nlen].decode()
                off += nlen
                code, ndim = struct.unpack_from("<BB", raw, off)
                off += 2
                shape = struct.unpack_from(f"<{ndim}I", raw, off)
                off += 4 * ndim
                dt = _CODE_DTYPES[code].newbyteorder("<")
                nbytes = int(np.prod(shape)) * dt.itemsize
                if off + nbytes > len(raw):
                    raise CheckpointError(f"truncated tensor {name}")
                arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape)
                if group >= len(groups):
                    raise CheckpointError(f"unknown tensor group {group} for {name}")
                groups[group][name] = arr.astype(dt.newbyteorder("="))
                off += nbytes
            if off != len(raw):
                raise CheckpointError(f"{len(raw) - off} trailing bytes after the last tensor")
        except (struct.error, KeyError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint: {exc}") from None
        model = BrimsConfig.from_dict(header["model"])
        train = TrainConfig.from_dict(header["train"]) if header["train"] is not None else None
        opt = None
        if header["optimizer_step"] is not None:
            opt = OptimizerState(groups[1], groups[2], header["optimizer_step"])
        return cls(model, groups[0], train, opt, header["meta"])

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())


# --------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    rows: list[tuple[int, str, str, float, int]] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    parameter_count: int = 0

    def add(self, epoch: int, split: str, metric: str, value: float, seed: int) -> None:
        self.rows.append((int(epoch), split, metric, float(value), int(seed)))

    @property
    def epochs(self) -> list[int]:
        return sorted({r[0] for r in self.rows if r[1] == "train"})

    def series(self, split: str, metric: str) -> list[float]:
        return [r[3] for r in self.rows if r[1] == split and r[2] == metric]

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for epoch, split, metric, value, seed in self.rows:
            w.writerow([epoch, split, metric, repr(value), seed])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def read_csv(cls, path: str | Path) -> "Metrics":
        m = cls()
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if tuple(header) != METRIC_COLUMNS:
                raise ValueError(f"unexpected metrics header {header}")
            for epoch, split, metric, value, seed in r:
                m.add(int(epoch), split, metric, float(value), int(seed))
        return m


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    metrics: Metrics
    best: Checkpoint
    last: Checkpoint
    arch: Architecture


def train(arch: Architecture, task, tcfg: TrainConfig, out_dir: str | Path | None = None,
          resume: bool = False, log_every: int = 0) -> TrainResult:
    """Seeded training with per-epoch validation and best-validation checkpointing.

    With ``out_dir`` set, ``last.ckpt``, ``best.ckpt`` and ``metrics.csv`` are
    written after every epoch and ``resume=True`` continues from ``last.ckpt``.
    Data order and dropout masks depend only on ``(seed, epoch, batch)``.
    """
    if arch.cfg.head != task.kind:
        raise ConfigError("model.head", f"task is {task.kind} but model head is {arch.cfg.head}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    opt = OptimizerState()
    metrics = Metrics(parameter_count=arch.parameter_count())
    key, higher = primary_metric(task.kind)
    start = 0
    best: Checkpoint | None = None
    best_val: float | None = None
    if resume and out is not None and (out / "last.ckpt").exists():
        last = Checkpoint.load(out / "last.ckpt")
        arch.load_state_dict(last.params)
        opt = last.optimizer or OptimizerState()
        start = int(last.meta["epoch"])
        metrics.rows = [tuple(r) for r in last.meta.get("rows", [])]
        best = Checkpoint.load(out / "best.ckpt")
        best_val = best.meta.get("val")
        log.info("resumed from epoch %d", start)
    if best is None:
        best = Checkpoint.capture(arch, tcfg, opt, epoch=0, val=None)
    seed = tcfg.seed
    for epoch in range(start + 1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        losses, sizes = [], []
        for bi, batch in enumerate(task.train_batches(epoch, tcfg.batch_size, seed)):
            rng = np.random.default_rng([seed, epoch, bi, 7])
            arch.zero_grad()
            try:
                out_t, _ = arch.forward(batch.inputs, training=True, rng=rng)
                loss = loss_from_output(task.kind, out_t, batch.targets)
                loss.backward()
                grads = [p.grad for p in arch.params.values() if p.grad is not None]
                if tcfg.clip_mode == "global_norm":
                    clip_global_norm(grads, tcfg.clip)
                else:
                    clip_values(grads, tcfg.clip)
                adam_step(arch.params, opt, tcfg)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            losses.append(float(loss.data))
            sizes.append(len(batch))
            if log_every and bi % log_every == 0:
                log.info("epoch %d batch %d loss %.6f", epoch, bi, losses[-1])
        train_loss = float(np.average(losses, weights=sizes))
        metrics.add(epoch, "train", "loss", train_loss, seed)
        if epoch % tcfg.eval_every == 0 or epoch == tcfg.epochs:
            val = evaluate(arch, task.validation(), tcfg.eval_batch_size)
            for name in sorted(val):
                metrics.add(epoch, "val", name, val[name], seed)
            v = val[key]
            if best_val is None or (v > best_val if higher else v < best_val):
                best_val = v
                best = Checkpoint.capture(arch, tcfg, opt, epoch=epoch, val=v, task=task.describe())
                if out is not None:
                    best.save(out / "best.ckpt")
        metrics.wall_clock.append(time.perf_counter() - t0)
        log.info("epoch %d train %.6f %s", epoch, train_loss,
                 " ".join(f"{r[2]}={r[3]:.6f}" for r in metrics.rows if r[0] == epoch and r[1] == "val"))
        if out is not None:
            Checkpoint.capture(arch, tcfg, opt, epoch=epoch, rows=metrics.rows, task=task.describe()).save(out / "last.ckpt")
            metrics.to_csv(out / "metrics.csv")
    last = Checkpoint.capture(arch, tcfg, opt, epoch=tcfg.epochs, rows=metrics.rows, task=task.describe())
    if out is not None:
        if tcfg.epochs == 0 or not (out / "best.ckpt").exists():
            best.save(out / "best.ckpt")
        metrics.to_csv(out / "metrics.csv")
    return TrainResult(metrics, best, last, arch)


def evaluate_shifted(checkpoint: Checkpoint | Architecture, task, shifts: Iterable[Shift | str],
                     batch_size: int = 500) -> list[tuple[str, str, float]]:
    """Eval-mode metrics per shift as ``(shift, metric, value)`` rows, in the order given."""
    arch = checkpoint if isinstance(checkpoint, Architecture) else checkpoint.build()
    rows = []
    for s in shifts:
        shift = Shift.parse(s) if isinstance(s, str) else s
        res = evaluate(arch, task.shifted(shift), batch_size)
        for name in sorted(res):
            rows.append((shift.label(), name, res[name]))
    return rows


@dataclass
class SeedRun:
    seed: int
    result: TrainResult
    table: list[tuple[str, str, float]]


def run_seeds(model_cfg: BrimsConfig, make_task, tcfg: TrainConfig, seeds: Sequence[int],
              shifts: Sequence[Shift | str], use_best: bool = True) -> tuple[list[SeedRun], dict[tuple[str, str], tuple[float, float]]]:
    """Train and evaluate once per seed; returns per-seed runs and ``(mean, std)`` per (shift, metric)."""
    runs = []
    for s in seeds:
        task = make_task(s)
        arch = Architecture(model_cfg, seed=s)
        cfg = TrainConfig(**{**asdict(tcfg), "seed": s})
        res = train(arch, task, cfg)
        ck = res.best if use_best else res.last
        runs.append(SeedRun(s, res, evaluate_shifted(ck, task, shifts, tcfg.eval_batch_size)))
    summary: dict[tuple[str, str], list[float]] = {}
    for run in runs:
        for shift, metric, value in run.table:
            summary.setdefault((shift, metric), []).append(value)
    return runs, {k: (float(np.mean(v)), float(np.std(v))) for k, v in summary.items()}
