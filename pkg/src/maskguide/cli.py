"""Command-line entry point: ``maskguide {generate,train,report,sweep}``.

Every subcommand accepts ``--config file.json``; flags override file values.
The config is validated against a JSON schema before any work starts and the
resolved document (defaults applied) is written next to the outputs.

Exit codes: 0 ok, 2 invalid config or dataset, 3 I/O failure, 4 training
abort (non-finite loss), 5 missing or corrupt run record.

Relative output paths are resolved under ``$MASKGUIDE_OUTPUT_ROOT`` when set.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema

from .curriculum import TrainConfig
from .errors import GenerationError, InvalidInputError, TrainingAbort
from .experiments import SPEC_NAMES, ExperimentSpec, load_records, run_experiment
from .features import CLASSIFIERS
from .storage import CorruptFileError, load_dataset, write_phantom_set
from .volumes import PhantomParams, stratified_folds

log = logging.getLogger("maskguide")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ABORT, EXIT_RECORD = 0, 2, 3, 4, 5
OUTPUT_ROOT_ENV = "MASKGUIDE_OUTPUT_ROOT"
LAMBDA_GRID = [round(0.1 * k, 1) for k in range(1, 21)]

_PHANTOM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "signal": {"type": "number", "minimum": 0},
        "signal_kind": {"enum": ["contrast", "variance"]},
        "context_spread": {"type": "number", "minimum": 0},
        "noise": {"type": "number", "minimum": 0},
        "lesion_scale": {"type": "number", "exclusiveMinimum": 0},
        "texture_sigma": {"type": "number", "minimum": 0},
    },
}

_TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "warmup_epochs": {"type": "integer", "minimum": 0},
        "max_epochs": {"type": "integer", "minimum": 1},
        "patience": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "lam": {"type": "number", "minimum": 0},
        "min_delta": {"type": "number", "minimum": 0},
        "augment": {"type": "boolean"},
        "lr_ramp_epochs": {"type": "integer", "minimum": 0},
        "normalize_grad": {"enum": ["full", "detached"]},
        "upsample": {"enum": ["trilinear", "nearest"]},
    },
}

SCHEMAS = {
    "generate": {
        "type": "object",
        "additionalProperties": False,
        "required": ["output_dir", "n", "class_balance", "grid", "seed", "phantom"],
        "properties": {
            "output_dir": {"type": "string", "minLength": 1},
            "n": {"type": "integer", "minimum": 2},
            "class_balance": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "grid": {"type": "array", "items": {"type": "integer", "minimum": 8}, "minItems": 3, "maxItems": 3},
            "seed": {"type": "integer", "minimum": 0},
            "phantom": _PHANTOM_SCHEMA,
        },
    },
    "train": {
        "type": "object",
        "additionalProperties": False,
        "required": ["spec", "dataset", "output_dir", "folds", "seed", "fold_seed", "train"],
        "properties": {
            "spec": {"enum": list(SPEC_NAMES)},
            "dataset": {"type": "string", "minLength": 1},
            "output_dir": {"type": "string", "minLength": 1},
            "folds": {"type": "integer", "minimum": 3},
            "seed": {"type": "integer", "minimum": 0},
            "fold_seed": {"type": "integer", "minimum": 0},
            "classifier": {"enum": [*CLASSIFIERS, None]},
            "arch": {"type": ["string", "object"]},
            "workers": {"type": "integer", "minimum": 1},
            "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "heatmap_class": {"enum": ["predicted", "true"]},
            "heatmap_samples": {"type": "integer", "minimum": 0},
            "train": _TRAIN_SCHEMA,
            "lambdas": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
        },
    },
    "report": {
        "type": "object",
        "additionalProperties": False,
        "required": ["runs", "output_dir"],
        "properties": {
            "runs": {"type": "array", "items": {"type": "string"}, "minItems": 1},
            "output_dir": {"type": "string", "minLength": 1},
            "panels": {"type": "boolean"},
        },
    },
}
SCHEMAS["sweep"] = copy.deepcopy(SCHEMAS["train"])

DEFAULTS = {
    "generate": {
        "output_dir": "phantoms", "n": 100, "class_balance": 0.27, "grid": [64, 64, 32], "seed": 0,
        "phantom": {},
    },
    "train": {
        "spec": "doctor_in_the_loop", "output_dir": None, "folds": 5, "seed": 0, "fold_seed": 0,
        "classifier": None, "arch": "compact", "workers": 1, "threshold": 0.5, "heatmap_class": "predicted",
        "heatmap_samples": 2, "train": {},
    },
    "report": {"output_dir": "report", "panels": True},
}
DEFAULTS["sweep"] = dict(DEFAULTS["train"], lambdas=LAMBDA_GRID)


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------- config plumbing


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _flag_overrides(args) -> dict:
    """Config keys set explicitly on the command line (``None`` means unset)."""
    out = {}
    for key, value in vars(args).items():
        if value is None or key in ("command", "config", "verbose", "func"):
            continue
        if key.startswith("train__") or key.startswith("phantom__"):
            section, field = key.split("__", 1)
            out.setdefault(section, {})[field] = value
        else:
            out[key] = value
    return out


def resolve_config(command: str, args) -> dict:
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must contain a JSON object")
    cfg = _merge(_merge(DEFAULTS[command], file_cfg), _flag_overrides(args))
    if command in ("train", "sweep") and not cfg.get("output_dir"):
        cfg["output_dir"] = f"runs/{cfg['spec']}" if command == "train" else f"runs/sweep_{cfg['spec']}"
    validate(command, cfg)
    return cfg


def validate(command: str, cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    errors = sorted(validator.iter_errors(cfg), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        e = errors[0]
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"invalid config field '{where}': {e.message}")
    if command in ("train", "sweep"):
        try:
            _experiment_spec(cfg)
        except InvalidInputError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc


def output_path(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _persist(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _experiment_spec(cfg: dict, lam=None) -> ExperimentSpec:
    train = dict(cfg["train"])
    if lam is not None:
        train["lam"] = lam
    return ExperimentSpec.named(
        cfg["spec"],
        classifier=cfg.get("classifier"),
        train=TrainConfig(**train),
        seed=cfg["seed"],
        arch=cfg.get("arch", "compact"),
        threshold=cfg.get("threshold", 0.5),
        heatmap_class=cfg.get("heatmap_class", "predicted"),
        heatmap_samples=cfg.get("heatmap_samples", 2),
    )


# --------------------------------------------------------------------------- commands


def cmd_generate(cfg: dict) -> int:
    out = output_path(cfg["output_dir"])
    params = PhantomParams(**cfg["phantom"])
    write_phantom_set(out, cfg["n"], cfg["class_balance"], tuple(cfg["grid"]), cfg["seed"], params)
    _persist(cfg, out / "resolved")
    print(out)
    return EXIT_OK


def _fold_job(payload):
    spec, dataset_dir, fold, out_dir = payload
    dataset = load_dataset(dataset_dir)
    return run_experiment(spec, dataset, [fold], out_dir)


def _train_one(spec: ExperimentSpec, dataset, dataset_dir: Path, cfg: dict, out: Path, stage0_cache=None) -> list:
    folds = stratified_folds([v.label for v in dataset], cfg["folds"], cfg["fold_seed"], ids=[v.id for v in dataset])
    from .experiments import check_compatibility

    check_compatibility(spec, dataset, folds)
    if cfg.get("workers", 1) > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            parts = pool.map(_fold_job, [(spec, dataset_dir, f, out) for f in folds])
            records = [r for part in parts for r in part]
    else:
        records = run_experiment(spec, dataset, folds, out, stage0_cache)
    return records


def _write_run_tables(records, out: Path) -> None:
    from .report import attention_table, competitor_table, performance_table, write_csv

    runs = {out.name: records}
    builder = competitor_table if records[0].spec in ("deep_features", "radiomics_features") else performance_table
    rows, cols = builder(runs)
    if builder is performance_table:
        arows, acols = attention_table(runs)
        for r, a in zip(rows, arows):
            r.update({k: a[k] for k in acols if k.startswith(("dice", "iou"))})
        cols = cols + [c for c in acols if c.startswith(("dice", "iou"))]
    write_csv(rows, out / "metrics.csv", [c for c in cols if c != "run"])


def _load(cfg: dict):
    dataset_dir = output_path(cfg["dataset"])
    if not (dataset_dir / "manifest.json").exists():
        raise FileNotFoundError(f"dataset manifest not found under {dataset_dir}")
    return dataset_dir, load_dataset(dataset_dir)


def cmd_train(cfg: dict) -> int:
    out = output_path(cfg["output_dir"])
    dataset_dir, dataset = _load(cfg)
    spec = _experiment_spec(cfg)
    _persist(cfg, out)
    records = _train_one(spec, dataset, dataset_dir, cfg, out)
    _write_run_tables(records, out)
    print(out)
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    from .report import summary_rows, write_csv

    out = output_path(cfg["output_dir"])
    dataset_dir, dataset = _load(cfg)
    _persist(cfg, out)
    cache: dict = {}
    rows = []
    for lam in cfg["lambdas"]:
        spec = _experiment_spec(cfg, lam)
        run_dir = out / f"lambda_{lam:.1f}"
        records = _train_one(spec, dataset, dataset_dir, dict(cfg, workers=1), run_dir, stage0_cache=cache)
        _write_run_tables(records, run_dir)
        last = max(s["stage"] for s in records[0].stages)
        row = next(r for r in summary_rows({run_dir.name: records}, ("acc", "auc", "tpr", "tnr", "dice", "iou"))
                   if r["stage"] == last)
        rows.append(dict(row, lam=float(lam)))
    cols = ["lam", "stage", "n", *[f"{m}_{k}" for m in ("acc", "auc", "tpr", "tnr", "dice", "iou")
                                   for k in ("mean", "se")]]
    write_csv(rows, out / "sweep.csv", cols)
    print(out)
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    from .report import render_heatmap_panels, write_report

    out = output_path(cfg["output_dir"])
    runs = {}
    for path in cfg["runs"]:
        p = output_path(path)
        runs[p.name] = load_records(p)
    write_report(runs, out)
    if cfg.get("panels", True):
        for path in cfg["runs"]:
            render_heatmap_panels(output_path(path), out / "panels")
    _persist(cfg, out)
    print(out)
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "report": cmd_report, "sweep": cmd_sweep}


# --------------------------------------------------------------------------- argument parsing


def _add_train_flags(p):
    p.add_argument("--spec", choices=SPEC_NAMES)
    p.add_argument("--dataset")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--fold-seed", dest="fold_seed", type=int)
    p.add_argument("--classifier", choices=CLASSIFIERS)
    p.add_argument("--arch")
    p.add_argument("--workers", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--heatmap-class", dest="heatmap_class", choices=("predicted", "true"))
    p.add_argument("--lr", dest="train__learning_rate", type=float)
    p.add_argument("--weight-decay", dest="train__weight_decay", type=float)
    p.add_argument("--warmup", dest="train__warmup_epochs", type=int)
    p.add_argument("--max-epochs", dest="train__max_epochs", type=int)
    p.add_argument("--patience", dest="train__patience", type=int)
    p.add_argument("--batch-size", dest="train__batch_size", type=int)
    p.add_argument("--lam", dest="train__lam", type=float)
    p.add_argument("--no-augment", dest="train__augment", action="store_const", const=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskguide", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic phantom dataset")
    g.add_argument("--config")
    g.add_argument("--out", dest="output_dir")
    g.add_argument("--n", type=int)
    g.add_argument("--balance", dest="class_balance", type=float)
    g.add_argument("--grid", type=int, nargs=3)
    g.add_argument("--seed", type=int)
    g.add_argument("--signal", dest="phantom__signal", type=float)
    g.add_argument("--signal-kind", dest="phantom__signal_kind")
    g.add_argument("--noise", dest="phantom__noise", type=float)

    t = sub.add_parser("train", help="run every fold of one experiment")
    t.add_argument("--config")
    _add_train_flags(t)

    s = sub.add_parser("sweep", help="train doctor_in_the_loop over a lambda grid")
    s.add_argument("--config")
    _add_train_flags(s)
    s.add_argument("--lambdas", type=float, nargs="+")

    r = sub.add_parser("report", help="aggregate runs into tables and heatmap panels")
    r.add_argument("--config")
    r.add_argument("runs", nargs="*", default=None)
    r.add_argument("--out", dest="output_dir")
    r.add_argument("--no-panels", dest="panels", action="store_const", const=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "runs", None) == []:
        args.runs = None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbort as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except CorruptFileError as exc:
        code = EXIT_RECORD if args.command == "report" else EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (InvalidInputError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
