"""Command-line entry point: ``pvada <command> [flags]``.

Commands: gen-data, corrupt, train, eval, gradcheck, report, params-count.
Exit codes: 0 success, 1 invalid input (flags, files, configs), 2 numerical
abort during training.

Configuration precedence is built-in defaults < ``--config`` JSON file <
command-line flags. The config file may hold the sections ``model``,
``train``, ``data`` and ``corruption``. Every command that writes files
stores the resolved configuration next to them as ``config.json`` and
logs it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .corruptions import (
    ATOMIC_KINDS, SEVERITIES, CorruptionKind, CorruptionParams, CorruptionSpec, corrupt, derive_seed,
)
from .data import DEFAULT_CLASSES, generate_dataset, read_class_names, read_cloud, read_split, write_cloud, write_dataset
from .exceptions import NumericalError, PVAdaError
from .gradcheck import run_all
from .metrics import BaselineTable, EvalReport, build_report, render_table
from .model import REFERENCE_PARAMETER_COUNT, ModelConfig, count_parameters
from .training import TrainConfig, evaluate_oa, train

logger = logging.getLogger("pvada")

THREADS_ENV = "PVADA_THREADS"
CHECKPOINT_NAME = "model.pvada"


class UsageError(PVAdaError):
    """Bad command-line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------


def _load_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"--config: no such file {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config {path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"--config {path}: expected a JSON object")
    unknown = set(data) - {"model", "train", "data", "corruption"}
    if unknown:
        raise UsageError(f"--config {path}: unknown sections {sorted(unknown)}")
    return data


def _flags(ns: argparse.Namespace, prefix: str) -> dict:
    """Explicitly given flags of one section (their dests start with ``prefix``)."""
    return {k[len(prefix):]: v for k, v in vars(ns).items() if k.startswith(prefix)}


def _resolve(section: str, file_config: dict, ns: argparse.Namespace, defaults: dict) -> dict:
    merged = dict(defaults)
    from_file = file_config.get(section, {})
    unknown = set(from_file) - set(defaults)
    if unknown:
        raise UsageError(f"config section {section!r}: unknown keys {sorted(unknown)}")
    merged.update(from_file)
    merged.update(_flags(ns, f"{section}__"))
    return merged


def _corruption_params(d: dict) -> CorruptionParams:
    d = dict(d)
    d["renormalize"] = tuple(CorruptionKind.parse(k) for k in d.get("renormalize", ()))
    return CorruptionParams(**d)


def _corruption_defaults() -> dict:
    d = dataclasses.asdict(CorruptionParams())
    d["renormalize"] = [k.value for k in d["renormalize"]]
    return d


def _write_config(directory: Path, resolved: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _echo(resolved: dict) -> None:
    logger.info("resolved config: %s", json.dumps(resolved, sort_keys=True))


def _threads(ns: argparse.Namespace, fallback: int) -> int:
    if getattr(ns, "threads", None) is not None:
        value = ns.threads
    elif os.environ.get(THREADS_ENV):
        try:
            value = int(os.environ[THREADS_ENV])
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {os.environ[THREADS_ENV]!r}") from None
    else:
        value = fallback
    if value < 1:
        raise UsageError(f"--threads must be >= 1, got {value}")
    return value


# ---------------------------------------------------------------------------
# Flag groups
# ---------------------------------------------------------------------------


def _csv_ints(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _csv(text: str) -> list:
    return [x for x in text.split(",") if x]


def _none_or_str(text: str):
    return None if text.lower() == "none" else text


def _add_model_flags(p: argparse.ArgumentParser, with_classes: bool = False) -> None:
    g = p.add_argument_group("model")
    s = argparse.SUPPRESS
    g.add_argument("--k", dest="model__k", type=int, default=s, help="neighbors in local encoding (32)")
    g.add_argument("--dim", dest="model__dim", type=int, default=s, help="feature width D (128)")
    g.add_argument("--num-oa-blocks", dest="model__num_oa_blocks", type=int, default=s)
    g.add_argument("--voxel-size", dest="model__voxel_size", type=float, default=s, help="base voxel size v (0.05)")
    g.add_argument("--num-voxelizations", dest="model__num_voxelizations", type=int, default=s)
    g.add_argument("--interaction", dest="model__interaction", type=_none_or_str, default=s,
                   help="z1, z2, z3 or none")
    g.add_argument("--shared-weights", dest="model__shared_weights", action=argparse.BooleanOptionalAction, default=s)
    g.add_argument("--afa", dest="model__afa_enabled", action=argparse.BooleanOptionalAction, default=s,
                   help="score-weighted pooling (on by default)")
    g.add_argument("--leaky-slope", dest="model__leaky_slope", type=float, default=s)
    g.add_argument("--head-dims", dest="model__head_dims", type=_csv_ints, default=s, help="e.g. 512,256")
    g.add_argument("--head-dropout", dest="model__head_dropout", type=float, default=s)
    g.add_argument("--progressive", dest="model__progressive", action=argparse.BooleanOptionalAction, default=s)
    g.add_argument("--double-norm", dest="model__attention_double_norm", action=argparse.BooleanOptionalAction,
                   default=s)
    g.add_argument("--qk-divisor", dest="model__qk_divisor", type=int, default=s)
    if with_classes:
        g.add_argument("--num-classes", dest="model__num_classes", type=int, default=s)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    s = argparse.SUPPRESS
    g.add_argument("--epochs", dest="train__epochs", type=int, default=s)
    g.add_argument("--batch-size", dest="train__batch_size", type=int, default=s)
    g.add_argument("--micro-batch", dest="train__micro_batch", type=int, default=s,
                   help="clouds per forward pass; gradients are summed over the batch")
    g.add_argument("--lr", dest="train__lr", type=float, default=s)
    g.add_argument("--momentum", dest="train__momentum", type=float, default=s)
    g.add_argument("--weight-decay", dest="train__weight_decay", type=float, default=s)
    g.add_argument("--t-max", dest="train__t_max", type=int, default=s)
    g.add_argument("--eta-min", dest="train__eta_min", type=float, default=s)
    g.add_argument("--label-smoothing", dest="train__label_smoothing", type=float, default=s)
    g.add_argument("--augment", dest="train__augment", action=argparse.BooleanOptionalAction, default=s)
    g.add_argument("--seed", dest="train__seed", type=int, default=s)
    g.add_argument("--select-best-on", dest="train__select_best_on", choices=("clean_val", "corrupted_val"),
                   default=s)
    g.add_argument("--eval-every", dest="train__eval_every", type=int, default=s)
    g.add_argument("--dtype", dest="train__dtype", choices=("float32", "float64"), default=s)


def _add_corruption_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("corruption magnitudes")
    s = argparse.SUPPRESS
    for field in dataclasses.fields(CorruptionParams):
        if field.name == "renormalize":
            g.add_argument("--renormalize", dest="corruption__renormalize", type=_csv, default=s,
                           help="kinds re-normalized to the unit sphere after corruption (scale)")
            continue
        kind = int if field.type in ("int", int) else float
        g.add_argument(f"--{field.name.replace('_', '-')}", dest=f"corruption__{field.name}", type=kind, default=s)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pvada", description="Point-voxel point-cloud classifier and corruption benchmark.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic labelled shape dataset")
    p.add_argument("--out", required=True, help="output directory (train/, test/, classes.json)")
    p.add_argument("--config", help="JSON config file")
    s = argparse.SUPPRESS
    p.add_argument("--classes", dest="data__classes", type=_csv, default=s,
                   help=f"comma-separated shape names from {','.join(DEFAULT_CLASSES)}")
    p.add_argument("--per-class", dest="data__per_class", type=int, default=s)
    p.add_argument("--points", dest="data__n_points", type=int, default=s)
    p.add_argument("--seed", dest="data__seed", type=int, default=s)
    p.add_argument("--anisotropy", dest="data__anisotropy", type=float, default=s)
    p.add_argument("--train-fraction", dest="data__train_fraction", type=float, default=s)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("corrupt", help="corrupt one cloud file, a split directory, or build the full suite")
    p.add_argument("--input", required=True, help="a .pcld/.xyz file or a split directory <class>/<index>.pcld")
    p.add_argument("--output", required=True, help="output file (single file input) or directory")
    p.add_argument("--kind", choices=[k.value for k in CorruptionKind])
    p.add_argument("--severity", type=int)
    p.add_argument("--suite", action="store_true", help="write clean plus all 35 kind/severity sets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    p.add_argument("--config", help="JSON config file")
    _add_corruption_flags(p)
    p.set_defaults(handler=cmd_corrupt)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", required=True, help="output directory (checkpoint, history, config)")
    p.add_argument("--val-sets", help="suite directory from 'corrupt --suite' used for best-epoch selection")
    p.add_argument("--threads", type=int, help="evaluation threads (default 1 for determinism)")
    p.add_argument("--config", help="JSON config file")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corrupted-set directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sets", required=True, help="directory holding clean/ and <kind>_<severity>/ sets")
    p.add_argument("--baseline", help="baseline accuracy table (JSON); default: identity table, not a real model")
    p.add_argument("--out", help="report JSON path (default: print only)")
    p.add_argument("--name", help="model name shown in tables")
    p.add_argument("--threads", type=int)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every autodiff primitive and the model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablations", action="store_true", help="also check the z2/z3, unshared and 4-level layouts")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("report", help="merge evaluation reports into one table")
    p.add_argument("reports", nargs="+", help="report JSON files from 'eval'")
    p.add_argument("--out", help="write the merged reports as a JSON list")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("params-count", help="count learnable parameters of a model configuration")
    p.add_argument("--config", help="JSON config file")
    _add_model_flags(p, with_classes=True)
    p.set_defaults(handler=cmd_params_count)
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(ns) -> int:
    file_config = _load_config_file(ns.config)
    defaults = {"classes": list(DEFAULT_CLASSES), "per_class": 100, "n_points": 1024, "seed": 0,
                "anisotropy": 0.2, "train_fraction": 0.8}
    data = _resolve("data", file_config, ns, defaults)
    resolved = {"data": data}
    _echo(resolved)
    train_set, test_set = generate_dataset(**data)
    out = Path(ns.out)
    write_dataset(out, train_set, test_set, data["classes"])
    _write_config(out, resolved)
    logger.info("wrote %d train / %d test clouds to %s", len(train_set), len(test_set), out)
    return 0


def _parallel_map(fn, items, threads: int) -> list:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _split_files(directory: Path) -> list[Path]:
    files = sorted(directory.glob("*/*.pcld"), key=lambda p: (int(p.stem), p.parent.name))
    if not files:
        raise UsageError(f"--input: no <class>/<index>.pcld files under {directory}")
    return files


def cmd_corrupt(ns) -> int:
    file_config = _load_config_file(ns.config)
    cparams = _resolve("corruption", file_config, ns, _corruption_defaults())
    params = _corruption_params(cparams)
    threads = _threads(ns, os.cpu_count() or 1)
    if ns.suite and (ns.kind or ns.severity is not None):
        raise UsageError("--suite cannot be combined with --kind/--severity")
    if not ns.suite and ns.kind is None:
        raise UsageError("give --kind (with --severity) or --suite")
    source = Path(ns.input)
    if not source.exists():
        raise UsageError(f"--input: no such file or directory {source}")
    resolved = {"corruption": cparams, "seed": ns.seed, "kind": ns.kind, "severity": ns.severity, "suite": ns.suite}
    _echo(resolved)

    if source.is_file():
        if ns.suite:
            raise UsageError("--suite needs a split directory as --input")
        spec = CorruptionSpec(ns.kind, ns.severity, derive_seed(ns.seed, ns.kind, ns.severity, 0))
        result = corrupt(read_cloud(source), spec, params)
        Path(ns.output).parent.mkdir(parents=True, exist_ok=True)
        write_cloud(ns.output, result)
        logger.info("wrote %s (%d points)", ns.output, len(result))
        return 0

    files = _split_files(source)
    clouds = [read_cloud(f) for f in files]
    out = Path(ns.output)
    if ns.suite:
        jobs = [(CorruptionKind.CLEAN, None)] + [(k, s) for k in ATOMIC_KINDS for s in SEVERITIES]
    else:
        jobs = [(CorruptionKind.parse(ns.kind), ns.severity)]
    for kind, severity in jobs:
        CorruptionSpec(kind, severity)
        name = kind.value if severity is None else f"{kind.value}_{severity}"

        def one(i, kind=kind, severity=severity):
            spec = CorruptionSpec(kind, severity, derive_seed(ns.seed, kind, severity, i))
            return corrupt(clouds[i], spec, params)

        results = _parallel_map(one, list(range(len(clouds))), threads)
        target = out / name if ns.suite else out
        for f, cloud in zip(files, results):
            (target / f.parent.name).mkdir(parents=True, exist_ok=True)
            write_cloud(target / f.parent.name / f.name, cloud)
        logger.info("wrote set %s (%d clouds)", name, len(results))
    _write_config(out, resolved)
    return 0


def _read_sets(directory: Path) -> dict:
    if not directory.is_dir():
        raise UsageError(f"no such set directory {directory}")
    sets = {}
    for child in sorted(p for p in directory.iterdir() if p.is_dir()):
        sets[child.name] = read_split(child)
    if not sets:
        raise UsageError(f"{directory} holds no set directories")
    return sets


def cmd_train(ns) -> int:
    file_config = _load_config_file(ns.config)
    data_dir = Path(ns.data)
    classes = read_class_names(data_dir)
    model_defaults = ModelConfig(num_classes=len(classes)).to_dict()
    model = _resolve("model", file_config, ns, model_defaults)
    model["num_classes"] = len(classes)
    trainer = _resolve("train", file_config, ns, TrainConfig().to_dict())
    model_config = ModelConfig.from_dict(model)
    train_config = TrainConfig.from_dict(trainer)
    threads = _threads(ns, 1)
    resolved = {"model": model_config.to_dict(), "train": train_config.to_dict(), "data": str(data_dir),
                "val_sets": ns.val_sets}
    _echo(resolved)

    train_set = read_split(data_dir / "train")
    val_sets = {"clean": read_split(data_dir / "test")}
    if ns.val_sets:
        for name, clouds in _read_sets(Path(ns.val_sets)).items():
            if name != "clean":
                val_sets[name] = clouds

    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(out, resolved)
    history_path = out / "history.jsonl"
    with open(history_path, "w", encoding="utf-8") as history:
        def record(r):
            history.write(r.to_json() + "\n")
            history.flush()

        best, records = train(train_set, val_sets, model_config, train_config, on_epoch=record, threads=threads)
    save_checkpoint(out / CHECKPOINT_NAME, best, classes)
    final = evaluate_oa(val_sets["clean"], best, threads)
    logger.info("best checkpoint: clean test OA %.4f; wrote %s", final, out / CHECKPOINT_NAME)
    print(json.dumps({"checkpoint": str(out / CHECKPOINT_NAME), "clean_oa": final, "epochs": len(records)}))
    return 0


def cmd_eval(ns) -> int:
    threads = _threads(ns, os.cpu_count() or 1)
    params, meta = load_checkpoint(ns.checkpoint)
    baseline = BaselineTable.load(ns.baseline) if ns.baseline else BaselineTable.identity()
    sets = _read_sets(Path(ns.sets))
    expected = [f"{k.value}_{s}" for k in ATOMIC_KINDS for s in SEVERITIES]
    missing = [name for name in expected if name not in sets]
    if missing:
        raise UsageError(f"--sets {ns.sets}: missing corrupted sets: {', '.join(missing)}")
    _echo({"checkpoint": ns.checkpoint, "sets": ns.sets, "baseline": baseline.name})
    names = [n for n in ["clean"] + expected if n in sets]
    set_oa = {name: evaluate_oa(sets[name], params, threads) for name in names}
    report = build_report(set_oa, baseline, ns.name or Path(ns.checkpoint).stem)
    if ns.out:
        Path(ns.out).parent.mkdir(parents=True, exist_ok=True)
        Path(ns.out).write_text(report.to_json() + "\n")
    print(render_table([report]))
    return 0


def cmd_gradcheck(ns) -> int:
    results = run_all(ns.seed, ablations=ns.ablations)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def cmd_report(ns) -> int:
    reports = []
    for path in ns.reports:
        try:
            reports.append(EvalReport.load(path))
        except FileNotFoundError:
            raise UsageError(f"no such report {path}") from None
        except (json.JSONDecodeError, KeyError) as exc:
            raise UsageError(f"{path}: not an evaluation report ({exc})") from None
    print(render_table(reports))
    if ns.out:
        Path(ns.out).write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    return 0


def cmd_params_count(ns) -> int:
    file_config = _load_config_file(ns.config)
    model = _resolve("model", file_config, ns, ModelConfig().to_dict())
    config = ModelConfig.from_dict(model)
    _echo({"model": config.to_dict()})
    count = count_parameters(config)
    print(f"parameters: {count:,}  ({count / 1e6:.2f} M)")
    print(f"reference:  {REFERENCE_PARAMETER_COUNT / 1e6:.2f} M reported for the published model")
    print("caveat: the head widths and local-encoder layout behind the reference figure are not pinned down, "
          "so this count is a diagnostic, not a match target")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if ns.quiet else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr, force=True)
    try:
        return ns.handler(ns)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except (PVAdaError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
