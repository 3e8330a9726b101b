"""Command-line entry point.

Run configs are JSON objects with ``model`` (model fields), ``train``
(optimiser and loop fields) and ``task`` (``{"task": "adding" | "digits", ...}``)
sections; unknown keys are rejected. Exit codes: 0 success, 1 invalid input,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .arch import Architecture, count_parameters, matched_config
from .config import VARIANTS, BrimsConfig, ConfigError, load_json
from .tasks import IdxFormatError, IncompatibleShift, Shift, make_task, write_adding_ndjson, write_idx
from .telemetry import RunManifest, Table, aggregate_shares, export, noise_sweep, usage_statistics
from .training import Checkpoint, CheckpointError, TrainConfig, evaluate_shifted, train

OUT_ENV = "BRIMS_OUT_DIR"
RUN_SECTIONS = ("model", "train", "task")
DEFAULT_RHOS = (0.0, 0.125, 0.25, 0.5)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def load_run_config(path: str) -> dict:
    """Read a run config and validate every section before any compute."""
    raw = load_json(path)
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    for key in raw:
        if key not in RUN_SECTIONS:
            raise ConfigError(key, f"unknown section; expected {', '.join(RUN_SECTIONS)}")
    if "model" not in raw:
        raise ConfigError("model", "missing section")
    out = {"model": BrimsConfig.from_dict(raw["model"])}
    out["train"] = TrainConfig.from_dict(raw.get("train", {}))
    out["task"] = raw.get("task")
    if out["task"] is not None and not isinstance(out["task"], dict):
        raise ConfigError("task", "expected an object")
    out["raw"] = raw
    return out


def _task(spec: dict | None, seed: int | None):
    if spec is None:
        raise ConfigError("task", "missing section")
    spec = dict(spec)
    if seed is not None:
        spec["seed"] = seed
    try:
        return make_task(spec)
    except TypeError as exc:
        raise ConfigError("task", str(exc)) from None
    except ValueError as exc:
        raise ConfigError("task", str(exc)) from None


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "runs")


def _print_table(table: Table) -> None:
    print("\t".join(table.columns))
    for row in table.rows:
        print("\t".join(repr(v) if isinstance(v, float) else str(v) for v in row))


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    tcfg = rc["train"]
    if args.seed is not None:
        tcfg = TrainConfig(**{**tcfg.__dict__, "seed": args.seed})
    task = _task(rc["task"], tcfg.seed)
    model = rc["model"]
    if model.input_dim != task.input_dim or model.output_dim != task.output_dim or model.head != task.kind:
        raise ConfigError("model", f"input_dim/output_dim/head must match the task "
                                   f"({task.input_dim}/{task.output_dim}/{task.kind})")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(rc["raw"], tcfg.seed, data_sources=[task.describe()])
    arch = Architecture(model, seed=tcfg.seed)
    res = train(arch, task, tcfg, out, resume=args.resume)
    manifest.finish()
    manifest.save(out / "manifest.json")
    key = "accuracy" if task.kind == "classification" else "mse"
    print(f"parameters {arch.parameter_count()}")
    print(f"best epoch {res.best.meta.get('epoch')} val {key} {res.best.meta.get('val')!r}")
    print(f"wrote {out / 'best.ckpt'} {out / 'metrics.csv'}")
    return 0


def _shifts(args, default: tuple[str, ...] = ("identity",)) -> list[Shift]:
    specs = args.shift or list(default)
    try:
        return [Shift.parse(s) for s in specs]
    except ValueError as exc:
        raise ConfigError("--shift", str(exc)) from None


def _checkpoint_task(args, ck: Checkpoint):
    if args.config:
        spec = load_run_config(args.config)["task"]
    else:
        spec = {k: v for k, v in ck.meta.get("task", {}).items() if k not in ("n_train", "n_val", "n_test")}
        if not spec:
            raise ConfigError("task", "checkpoint has no task description; pass --config")
        if spec.get("task") == "digits":
            spec.pop("images_path", None), spec.pop("labels_path", None)
    return _task(spec, args.seed)


def cmd_eval(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    task = _checkpoint_task(args, ck)
    rows = evaluate_shifted(ck, task, _shifts(args))
    table = Table(("shift", "metric", "value"), ("str", "str", "float"), rows)
    _print_table(table)
    if args.out:
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        export(table, args.format, out / f"eval.{args.format}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import GRADCHECK_CONFIG, check_primitives, check_unroll

    cfg = load_run_config(args.config)["model"] if args.config else GRADCHECK_CONFIG
    seed = args.seed or 0
    worst = 0.0
    results = {}
    if not args.model_only:
        results.update({f"op:{k}": v for k, v in check_primitives(seed).items()})
    results.update({f"model:{k}": v for k, v in check_unroll(cfg, seed=seed).items()})
    for name, err in results.items():
        print(f"{name}\t{err:.3e}")
        worst = max(worst, err)
    ok = worst <= args.tol
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAIL'} at tolerance {args.tol:g})")
    return 0 if ok else 2


def cmd_analyze(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    task = _checkpoint_task(args, ck)
    if task.kind != "classification":
        raise IncompatibleShift("attention sweeps need the digit task (pixel corruption)")
    shifts = _shifts(args, tuple(f"rho={r}" for r in DEFAULT_RHOS))
    rhos = []
    for s in shifts:
        if s.length is not None or s.k is not None or s.res is not None:
            raise ConfigError("--shift", f"analyze-attention takes rho shifts only, got {s.label()}")
        rhos.append(s.rho or 0.0)
    arch = ck.build()
    layers = None if args.layer is None else [args.layer]
    log = noise_sweep(arch, task, rhos, run_id=args.run_id, layers=layers, n_samples=args.samples)
    curve = aggregate_shares(log, ("rho",), active_only=args.active_only)
    _print_table(curve)
    frac, mean_td = usage_statistics(log, threshold=0.5)
    print(f"samples with >=5 high top-down steps {frac:.4f}; mean top-down share {mean_td:.4f}")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    export(curve, args.format, out / f"shares.{args.format}")
    if args.records:
        export(log, args.format, out / f"attention.{args.format}")
    return 0


def cmd_gen_data(args) -> int:
    rc = load_run_config(args.config)
    task = _task(rc["task"], args.seed)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    batches = {"train": task.train_set(), "val": task.validation()}
    for s in _shifts(args, ()):
        batches[s.label().replace("=", "").replace(",", "_")] = task.shifted(s)
    for name, batch in batches.items():
        if task.kind == "regression":
            path = out / f"adding-{name}.ndjson"
            write_adding_ndjson(batch, path)
        else:
            path = out / f"digits-{name}-seq-idx3-f8"
            write_idx(path, batch.inputs.transpose(1, 0, 2))
            write_idx(out / f"digits-{name}-labels-idx1-ubyte", batch.targets.astype("uint8"))
        print(f"{name}\t{len(batch)}\t{path}")
    return 0


def cmd_param_count(args) -> int:
    cfg = load_run_config(args.config)["model"] if args.config else BrimsConfig()
    base = count_parameters(cfg)
    print(f"{cfg.variant}\t{base}")
    for name in args.compare or []:
        variant = name.upper()
        if variant not in VARIANTS:
            raise ConfigError("--compare", f"unknown variant {name!r}")
        other = matched_config(cfg, variant)
        n = count_parameters(other)
        print(f"{variant}\t{n}\thidden={other.d_module[0]}\tratio={n / base:.4f}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="brims", description="Modular recurrent networks with bidirectional attention.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="JSON run config")
        sp.add_argument("--seed", type=int, help="override the seed")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
        sp.add_argument("--format", choices=("csv", "ndjson"), default="csv")

    sp = sub.add_parser("train", help="train from a run config")
    common(sp, True)
    sp.add_argument("--resume", action="store_true", help="continue from last.ckpt in --out")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint under shifts")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--shift", action="append", help="e.g. len=200, k=5, res=19x19, rho=0.25 (repeatable)")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(sp)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--model-only", action="store_true", help="skip the primitive checks")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("analyze-attention", help="attention shares under pixel corruption")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--shift", action="append", help="rho=<fraction> (repeatable)")
    sp.add_argument("--layer", type=int, default=0, help="layer to record (default 0)")
    sp.add_argument("--samples", type=int, help="limit the number of test samples")
    sp.add_argument("--active-only", action="store_true", help="average over active modules only")
    sp.add_argument("--records", action="store_true", help="also export per-record attention logs")
    sp.add_argument("--run-id", default="run")
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("gen-data", help="write seeded task batches")
    common(sp, True)
    sp.add_argument("--shift", action="append", help="also write shifted test sets")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("param-count", help="parameter counts and matched baselines")
    common(sp)
    sp.add_argument("--compare", action="append", help="variant to match, e.g. lstm (repeatable)")
    sp.set_defaults(fn=cmd_param_count)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, IncompatibleShift, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, IdxFormatError, OSError, ArithmeticError, RuntimeError, ValueError, KeyError) as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
