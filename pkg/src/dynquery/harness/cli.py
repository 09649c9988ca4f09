"""Command-line entry point: ``dynquery <verb> [options]``.

Results go to stdout as tab-separated lines or markdown tables, progress to
stderr. Failures exit nonzero with ``error[<category>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..autograd import DimensionError
from ..checks import BLOCK_CHECKS, OP_CHECKS, run_checks
from ..counting import ConfigError
from ..synth import DatasetParseError, SpecError, generate, load, save
from .ablate import AXES, ablate
from .config import ExperimentConfig, load_config, save_config
from .evaluate import EvalResult, evaluate_run
from .report import band_table, level_table, render_report
from .train import TrainingDiverged, load_datasets, stratified_eval_set, train

__all__ = ["main", "EXIT_CODES"]

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "data": 4,
    "diverged": 5,
    "grad-check": 6,
    "internal": 1,
}

logger = logging.getLogger("dynquery")


class GradCheckFailed(RuntimeError):
    pass


class UsageError(ValueError):
    pass


def _parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    section, name = key.split(".", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, name, value


def _config(args) -> ExperimentConfig:
    config = load_config(args.config)
    overrides: dict = {}
    for text in args.set or []:
        section, name, value = _parse_override(text)
        if section in ("seed", "output_dir"):
            raise ConfigError(f"use --seed or --out for {section}")
        overrides.setdefault(section, {})[name] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None):
        overrides["output_dir"] = str(args.out)
    if getattr(args, "data", None):
        overrides.setdefault("data", {})["path"] = str(args.data)
    for section in overrides:
        if section not in ("seed", "output_dir") and not hasattr(config, section):
            raise ConfigError(f"unknown configuration section {section!r}")
    return config.with_overrides(**overrides) if overrides else config


def _emit(*fields) -> None:
    print("\t".join(str(f) for f in fields))


# verbs ----------------------------------------------------------------------

def cmd_generate(args) -> None:
    config = _config(args)
    root = Path(args.out or config.output_dir)
    d = config.data
    splits = {
        "train": lambda: generate(d.scene_spec("train"), d.train_images),
        "val": lambda: generate(d.scene_spec("val"), d.val_images),
        "eval": lambda: stratified_eval_set(config),
    }
    _emit("split", "images", "objects", "mean_count", "path")
    for name in args.splits:
        ds = splits[name]()
        path = save(ds, root / name)
        _emit(name, len(ds), int(ds.counts.sum()), f"{ds.counts.mean():.3f}", path)
    save_config(config, root / "config.json")


def cmd_train(args) -> None:
    config = _config(args)
    run_dir = Path(config.output_dir)
    datasets = load_datasets(config)

    def progress(entry: dict) -> None:
        logger.info(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in entry.items()))

    record = train(config, datasets, run_dir, progress=None if args.quiet else progress, eval_set=None if args.no_eval else datasets[1])
    _emit("key", "value")
    _emit("run_dir", run_dir)
    _emit("config_hash", record.config_hash)
    _emit("stage1_counting_accuracy", record.stage1_counting_accuracy)
    _emit("counting_accuracy", record.counting_accuracy)
    if record.metrics:
        _emit("ap", record.metrics["report"]["ap"])
    _emit("final_checkpoint", record.final_checkpoint)
    _emit("wall_clock_s", f"{record.wall_clock:.1f}")


def _eval_name(result: EvalResult) -> str:
    return "eval_dynamic.json" if result.mode == "dynamic" else f"eval_k{result.mode.split('=')[1]}.json"


def cmd_eval(args) -> None:
    config = _config(args)
    if args.dataset:
        dataset = load(args.dataset)
    elif args.split == "val":
        dataset = load_datasets(config)[1]
    else:
        dataset = stratified_eval_set(config)
    result = evaluate_run(args.checkpoint, dataset, config, args.fixed_k)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    path = out / _eval_name(result)
    doc = result.as_dict()
    path.write_text(json.dumps(doc, indent=1))
    print(level_table(doc))
    print(band_table([doc]))
    _emit("written", path)


def cmd_ablate(args) -> None:
    if args.axis not in AXES:
        raise UsageError(f"unknown ablation axis {args.axis!r}; choose from {', '.join(AXES)}")
    config = _config(args)
    result = ablate(config, args.axis, args.out or config.output_dir, progress=lambda name: logger.info("cell %s", name))
    print(result.to_markdown())


def cmd_grad_check(args) -> None:
    names = args.only or None
    reports = run_checks(names, eps=args.eps, seed=args.seed)
    _emit("check", "kind", "max_rel_error", "entries", "status")
    failed = []
    for r in reports:
        ok = r.passed(args.tol)
        kind = "block" if r.op_name in BLOCK_CHECKS else "op"
        _emit(r.op_name, kind, f"{r.max_rel_error:.3e}", r.entries_checked, "PASS" if ok else "FAIL")
        if not ok:
            failed.append(r.op_name)
    if failed:
        raise GradCheckFailed(f"{len(failed)} check(s) above tolerance {args.tol:g}: {', '.join(failed)}")


def cmd_report(args) -> None:
    for path in render_report(args.run, args.out):
        _emit("written", path)


# parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynquery", description="Dynamic-query tiny-object detector experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="verb", required=True)

    def with_config(p):
        p.add_argument("--config", type=Path, help="JSON experiment config (defaults when omitted)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field")
        p.add_argument("--seed", type=int)
        return p

    p = with_config(sub.add_parser("generate-data", help="write synthetic train/val/eval splits"))
    p.add_argument("--out", type=Path, help="dataset root (default: config output_dir)")
    p.add_argument("--splits", nargs="+", choices=["train", "val", "eval"], default=["train", "val", "eval"])
    p.set_defaults(func=cmd_generate)

    p = with_config(sub.add_parser("train", help="two-stage training"))
    p.add_argument("--out", type=Path, help="run directory (overrides output_dir)")
    p.add_argument("--data", type=Path, help="dataset root with train/ and val/ (overrides data.path)")
    p.add_argument("--no-eval", action="store_true", help="skip the final validation evaluation")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, help="saved dataset directory")
    p.add_argument("--split", choices=["val", "stratified"], default="stratified", help="generated split when --dataset is absent")
    p.add_argument("--fixed-k", type=int, help="fixed query budget instead of the configured policy")
    p.add_argument("--out", type=Path, help="where to write the result (default: checkpoint directory)")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("ablate", help="run an ablation grid"))
    p.add_argument("--axis", required=True, help=f"one of {', '.join(AXES)}")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--only", nargs="+", choices=sorted({**OP_CHECKS, **BLOCK_CHECKS}), metavar="NAME")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("report", help="render figures and tables for a run directory")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_report)
    return parser


def _fail(category: str, message: str) -> int:
    print(f"error[{category}]: {message}", file=sys.stderr)
    return EXIT_CODES[category]


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except GradCheckFailed as exc:
        return _fail("grad-check", str(exc))
    except TrainingDiverged as exc:
        return _fail("diverged", str(exc))
    except DatasetParseError as exc:
        return _fail("data", str(exc))
    except UsageError as exc:
        return _fail("usage", str(exc))
    except (ConfigError, SpecError) as exc:
        return _fail("config", str(exc))
    except (DimensionError, ValueError, OSError) as exc:
        return _fail("internal", f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
