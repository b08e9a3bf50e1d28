"""``lacl`` command-line interface.

Exit codes: 0 success, 2 config/usage, 3 I/O, 4 training failure,
5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .checks import SUITES
from .config import RunConfig, load_config
from .data import generate, load_dataset, read_embeddings, save_dataset, split_fingerprint, split_patient_level, write_embeddings
from .errors import (FileFormatError, InvalidConfigError, InvalidInputError, InvalidStateError,
                     TrainingDivergedError)
from .evaluation import evaluate_features, extract_features
from .trainer import FINGERPRINTS, MODES, train

log = logging.getLogger("lacl")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAIN, EXIT_VERIFY = 0, 2, 3, 4, 5
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
METRIC_COLUMNS = (("ACC", "accuracy"), ("macro-AUC", "macro_auc"), ("macro-F1", "macro_f1"))
HEADLINE_PROBE = "lesion_linear"


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def _write_jsonl(path: Path, records) -> None:
    path.write_text("".join(_dump(r) + "\n" for r in records))


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.with_overrides(seed=args.seed, mode=getattr(args, "mode", None))


def _load_data(path):
    if path is None:
        raise CommandError("--data is required", EXIT_CONFIG)
    if not (Path(path) / "dataset.json").exists():
        raise CommandError(f"no dataset found in {path}", EXIT_IO)
    try:
        return load_dataset(path)
    except (KeyError, ValueError) as exc:
        raise CommandError(f"{path}: malformed dataset ({exc})", EXIT_CONFIG) from exc


def _write_manifest(out: Path, command: str, cfg: RunConfig | None, artifacts: dict,
                    inputs: dict, started: str) -> None:
    manifest = {
        "command": command,
        "config": cfg.to_sections() if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "inputs": inputs,
        "artifacts": artifacts,
        "tool_version": __version__,
        "started_at": started,
        "finished_at": _now(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _data_inputs(data_dir, ds, splits) -> dict:
    return {"data": str(data_dir), "dataset_fingerprint": ds.fingerprint(),
            "split_fingerprint": split_fingerprint(splits)}


def _report_records(reports: dict, extra: dict) -> list[dict]:
    return [{"probe": name, **extra, **rep.to_dict()} for name, rep in sorted(reports.items())]


# --- subcommands -------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    started = _now()
    out = Path(args.out)
    ds = generate(cfg.data)
    splits = split_patient_level(ds, seed=cfg.seed)
    artifacts = save_dataset(ds, splits, out)
    _write_manifest(out, "gen", cfg, artifacts,
                    {"dataset_fingerprint": ds.fingerprint(), "split_fingerprint": split_fingerprint(splits)}, started)
    log.info("wrote %d patches from %d slides to %s", len(ds.patches), ds.num_slides, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    ds, splits = _load_data(args.data)
    started = _now()
    out = Path(args.out)
    result = train(ds, splits["train"], cfg.train, out_dir=out, resume=args.resume, max_steps=args.max_steps)
    artifacts = {"checkpoint": str(result.checkpoint_path), "metrics": str(result.log_path)}
    ckpt_dir = out / "checkpoints"
    if ckpt_dir.exists():
        artifacts["cadence_checkpoints"] = sorted(str(p) for p in ckpt_dir.glob("*.ckpt"))
    inputs = _data_inputs(args.data, ds, splits)
    inputs.update(mode=cfg.train.mode, fingerprint=FINGERPRINTS[cfg.train.mode],
                  resume=str(args.resume) if args.resume else None, max_steps=args.max_steps)
    _write_manifest(out, "train", cfg, artifacts, inputs, started)
    last = result.state.history[-1] if result.state.history else None
    log.info("trained %d steps; last loss %s", result.state.step, last and last["loss"])
    return EXIT_OK


def cmd_extract(args) -> int:
    if args.checkpoint is None:
        raise CommandError("--checkpoint is required", EXIT_CONFIG)
    cfg = _resolve_config(args)
    ds, splits = _load_data(args.data)
    started = _now()
    ckpt = load_checkpoint(args.checkpoint)
    feats = extract_features(ckpt, ds.patches)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "embeddings.lemb", np.arange(len(feats)), feats)
    inputs = _data_inputs(args.data, ds, splits)
    inputs["checkpoint"] = str(args.checkpoint)
    _write_manifest(out, "extract", cfg, {"embeddings": str(out / "embeddings.lemb")}, inputs, started)
    return EXIT_OK


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.features is None):
        raise CommandError("give exactly one of --checkpoint or --features", EXIT_CONFIG)
    cfg = _resolve_config(args)
    ds, splits = _load_data(args.data)
    started = _now()
    inputs = _data_inputs(args.data, ds, splits)
    if args.checkpoint is not None:
        feats = extract_features(load_checkpoint(args.checkpoint), ds.patches)
        inputs["checkpoint"] = str(args.checkpoint)
    else:
        ids, vecs = read_embeddings(args.features)
        if len(ids) != len(ds.patches) or sorted(ids.tolist()) != list(range(len(ids))):
            raise CommandError(f"{args.features}: ids do not cover the {len(ds.patches)} dataset patches", EXIT_CONFIG)
        feats = vecs[np.argsort(ids)]
        inputs["features"] = str(args.features)
    reports = evaluate_features(feats, ds, splits, cfg.eval)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "report.jsonl", _report_records(reports, {}))
    _write_manifest(out, "eval", cfg, {"report": str(out / "report.jsonl")}, inputs, started)
    head = reports[HEADLINE_PROBE]
    print(f"ACC {head.accuracy:.4f}  macro-AUC {head.macro_auc:.4f}  macro-F1 {head.macro_f1:.4f}")
    return EXIT_OK


def format_table(rows: dict[str, dict]) -> str:
    """Fixed-width table, one row per mode and one column per headline metric."""
    header = f"{'mode':<15}" + "".join(f"{name:>11}" for name, _ in METRIC_COLUMNS)
    lines = [header]
    for mode, metrics in rows.items():
        if metrics is None:
            lines.append(f"{mode:<15}" + "".join(f"{'failed':>11}" for _ in METRIC_COLUMNS))
        else:
            lines.append(f"{mode:<15}" + "".join(f"{metrics[key]:>11.4f}" for _, key in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    cfg = _resolve_config(args)
    ds, splits = _load_data(args.data)
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shared = _data_inputs(args.data, ds, splits)
    records, table, status, artifacts = [], {}, {}, {}
    for mode in MODES:
        arm = replace(cfg.train, mode=mode)
        try:
            result = train(ds, splits["train"], arm, out_dir=out / mode)
        except (TrainingDivergedError, InvalidStateError) as exc:
            log.error("arm %s failed: %s", mode, exc)
            status[mode], table[mode] = f"failed: {exc}", None
            continue
        reports = evaluate_features(extract_features(result.state.params_q, ds.patches), ds, splits, cfg.eval)
        status[mode] = "ok"
        table[mode] = reports[HEADLINE_PROBE].to_dict()
        artifacts[mode] = {"checkpoint": str(result.checkpoint_path), "metrics": str(result.log_path)}
        records += _report_records(reports, {"mode": mode, "fingerprint": FINGERPRINTS[mode],
                                             "dataset_fingerprint": shared["dataset_fingerprint"],
                                             "split_fingerprint": shared["split_fingerprint"]})
    _write_jsonl(out / "comparison.jsonl", records)
    text = format_table(table)
    (out / "comparison.txt").write_text(text)
    artifacts.update(report=str(out / "comparison.jsonl"), table=str(out / "comparison.txt"))
    shared["arm_status"] = status
    _write_manifest(out, "compare", cfg, artifacts, shared, started)
    sys.stdout.write(text)
    failed = [m for m, s in status.items() if s != "ok"]
    if failed:
        raise CommandError(f"arms failed: {', '.join(failed)}", EXIT_TRAIN)
    return EXIT_OK


def cmd_check(args) -> int:
    chosen = [name for name in SUITES if getattr(args, name) or args.all] or list(SUITES)
    results = [SUITES[name](seed=args.seed or 0) for name in chosen]
    for res in results:
        print(res.summary())
    failures = {r.name: r.failures for r in results if not r.ok}
    if failures:
        path = Path(args.out) if args.out else Path("check_failures.json")
        path.write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")
        print(f"failing cases written to {path}")
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "extract": cmd_extract, "eval": cmd_eval,
            "compare": cmd_compare, "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lacl", description="Lesion-aware contrastive learning toolkit.")
    parser.add_argument("--version", action="version", version=f"lacl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out_required=True):
        p.add_argument("--config", help="INI config or a manifest.json from an earlier run")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--threads", type=int, help="limit BLAS threads")
        p.add_argument("--out", required=out_required, help="output directory")
        if data:
            p.add_argument("--data", help="dataset directory written by `lacl gen`")

    common(sub.add_parser("gen", help="generate a synthetic dataset"), data=False)
    p = sub.add_parser("train", help="train one mode")
    common(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many total steps")
    p = sub.add_parser("extract", help="write backbone embeddings for every patch")
    common(p)
    p.add_argument("--checkpoint")
    p = sub.add_parser("eval", help="probe a checkpoint or embedding file")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--features", help="embedding file written by `lacl extract`")
    p = sub.add_parser("compare", help="train and evaluate all three modes")
    common(p)
    p = sub.add_parser("check", help="run the built-in oracle suites")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="where to write failing cases")
    for name in SUITES:
        p.add_argument(f"--{name}", action="store_true")
    p.add_argument("--all", action="store_true")
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise CommandError("--threads must be positive", EXIT_CONFIG)
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    level_name = os.environ.get("LACL_LOG_LEVEL", "warn").lower()
    if level_name not in LOG_LEVELS:
        print(f"lacl: LACL_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=LOG_LEVELS[level_name], format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except CommandError as exc:
        print(f"lacl {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (InvalidConfigError, InvalidInputError, FileFormatError) as exc:
        print(f"lacl {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, InvalidStateError) as exc:
        print(f"lacl {args.command}: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except OSError as exc:
        print(f"lacl {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
