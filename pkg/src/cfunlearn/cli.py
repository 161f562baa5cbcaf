"""Command line driver: ``cfunlearn <subcommand> --config run.json --out DIR``.

Every subcommand reads one JSON config (the experiment layout), validates
all of it before touching the disk, and writes its artifacts plus a
``manifest.json`` into the output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .counterfactual import CfSearchConfig, save_cf_cache
from .datagen import (
    DataError,
    Partition,
    ScmSpec,
    generate_scm_dataset,
    make_deletion,
    save_dataset_csv,
    scenario_from_dict,
    scenario_tag,
)
from .evaluation import (
    ExperimentConfig,
    derive_seed,
    evaluate_model,
    load_split,
    plot_data,
    read_reports,
    run_experiment,
    train_teacher,
    validate_config,
    write_reports,
)
from .model import load_checkpoint, save_checkpoint
from .unlearn import UnlearnConfig, unlearn

logger = logging.getLogger("cfunlearn")

OUT_ENV = "CFUNLEARN_OUT"
COMMANDS = ("gen-data", "train", "unlearn", "evaluate", "experiment", "plot-data")


class UsageError(Exception):
    """Bad arguments or config; reported without a traceback."""


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _load_config(path, seed_override) -> dict:
    if path is None:
        raise UsageError("--config is required")
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {p}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{p}: config must be a JSON object")
    if seed_override is not None:
        raw["seed"] = seed_override
    return raw


def _resolve_out(args, cfg: dict | None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg and cfg.get("output_dir"):
        return Path(cfg["output_dir"])
    return Path(os.environ.get(OUT_ENV, "cfunlearn-out")) / args.command


def _claim_out(out: Path, force: bool) -> None:
    if out.exists() and not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _write_manifest(out: Path, command: str, cfg: dict | None, seeds: dict, artifacts: dict) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config_sha256": None if cfg is None else config_hash(cfg),
        "config": cfg,
        "seeds": seeds,
        "artifacts": {k: str(v) for k, v in sorted(artifacts.items())},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _check_inputs(*paths) -> list[str]:
    return [f"{flag}: no such file {p}" for flag, p in paths if p is not None and not Path(p).is_file()]


def _validate(args, raw: dict) -> list[str]:
    need_scen = args.command in ("unlearn", "evaluate", "experiment")
    errors = validate_config(raw, need_scenarios=need_scen)
    if args.command == "gen-data" and "scm" not in (raw.get("dataset") or {}):
        errors.append("gen-data needs a 'dataset.scm' block")
    if args.command == "unlearn":
        if not args.teacher:
            errors.append("--teacher is required")
        errors += _check_inputs(("--teacher", args.teacher))
    if args.command == "evaluate":
        if not args.model or not args.partition:
            errors.append("--model and --partition are required")
        errors += _check_inputs(("--model", args.model), ("--partition", args.partition))
    return errors


# -- subcommands: each returns (seeds, artifacts) ------------------------------


def cmd_gen_data(cfg: ExperimentConfig, out: Path):
    seed = derive_seed(cfg.seed, 0, 0)
    ds = generate_scm_dataset(ScmSpec(**cfg.dataset["scm"]), seed)
    csv_path, schema_path = save_dataset_csv(ds, out / "data.csv")
    return {"data": seed}, {"data": csv_path, "schema": schema_path}


def cmd_train(cfg: ExperimentConfig, out: Path):
    train, test = load_split(cfg, 0)
    teacher = train_teacher(cfg, 0, train)
    ckpt = save_checkpoint(teacher, out / "teacher.ckpt")
    return {"teacher": derive_seed(cfg.seed, 0, 2)}, {"teacher": ckpt}


def cmd_unlearn(cfg: ExperimentConfig, out: Path, teacher_path):
    train, _ = load_split(cfg, 0)
    teacher = load_checkpoint(teacher_path)
    scenario = scenario_from_dict(cfg.scenarios[0])
    part_seed = derive_seed(cfg.seed, 0, 6, 0)
    partition = make_deletion(train, scenario, part_seed)
    ucfg = UnlearnConfig(**{**cfg.unlearn, "seed": derive_seed(cfg.seed, 0, 3, 0)})
    cf_cfg = CfSearchConfig(**{**cfg.cf_search, "seed": derive_seed(cfg.seed, 0, 4, 0)})
    log_path = out / "unlearn_log.jsonl"
    res = unlearn(teacher, train, partition, ucfg, cf_config=cf_cfg, log_path=log_path)
    part_path = out / "partition.json"
    part_path.write_text(json.dumps(partition.to_dict()))
    arts = {
        "student": save_checkpoint(res.student, out / "student.ckpt"),
        "partition": part_path,
        "cf_cache": save_cf_cache(res.forget_set.counterfactuals, out / "cf_cache.jsonl"),
        "context": res.context.dump(out / "context.json"),
        "log": log_path,
    }
    (out / "rte.json").write_text(json.dumps({"rte_seconds": res.rte_seconds}))
    arts["rte"] = out / "rte.json"
    seeds = {"partition": part_seed, "unlearn": ucfg.seed, "cf_search": cf_cfg.seed}
    return seeds, arts


def cmd_evaluate(cfg: ExperimentConfig, out: Path, model_path, partition_path, method="model"):
    train, test = load_split(cfg, 0)
    model = load_checkpoint(model_path)
    partition = Partition.from_dict(json.loads(Path(partition_path).read_text()))
    n = len(train)
    if len(partition.forget_indices) and max(partition.forget_indices.max(), partition.retain_indices.max()) >= n:
        raise DataError(f"{partition_path}: indices exceed the {n}-row training split")
    tag = scenario_tag(partition.scenario) if partition.scenario is not None else "custom"
    rep = evaluate_model(model, train, test, partition, method=method, scenario=tag, seed=cfg.seed,
                         fairness_on=cfg.fairness_on)
    jpath, cpath = write_reports([rep], out)
    return {"data": derive_seed(cfg.seed, 0, 0)}, {"reports_json": jpath, "reports_csv": cpath}


def cmd_experiment(cfg: ExperimentConfig, out: Path):
    reports = run_experiment(cfg)
    jpath, cpath = write_reports(reports, out)
    ppath = out / "plot_data.json"
    ppath.write_text(json.dumps(plot_data(reports), indent=2))
    failed = [r for r in reports if r.status != "ok"]
    for r in failed:
        logger.error("%s / %s / rep %d: %s", r.method, r.scenario, r.repetition, r.status)
    seeds = {"master": cfg.seed, "repetitions": cfg.repetitions}
    return seeds, {"reports_json": jpath, "reports_csv": cpath, "plot_data": ppath}, len(failed)


def cmd_plot_data(reports_path, out: Path):
    reports = read_reports(reports_path)
    ppath = out / "plot_data.json"
    ppath.write_text(json.dumps(plot_data(reports), indent=2))
    return {}, {"plot_data": ppath}


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfunlearn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
        if name == "unlearn":
            p.add_argument("--teacher", help="teacher checkpoint from `train`")
        if name == "evaluate":
            p.add_argument("--model", help="checkpoint to audit")
            p.add_argument("--partition", help="partition.json from `unlearn`")
            p.add_argument("--method", default="model", help="method tag for the report row")
        if name == "plot-data":
            p.add_argument("--reports", help="reports.json from `experiment`")
    return parser


def run(args) -> int:
    if args.command == "plot-data":
        if not args.reports:
            raise UsageError("--reports is required")
        if errs := _check_inputs(("--reports", args.reports)):
            raise UsageError(errs[0])
        out = _resolve_out(args, None)
        _claim_out(out, args.force)
        seeds, arts = cmd_plot_data(args.reports, out)
        _write_manifest(out, args.command, None, seeds, {**arts, "input": args.reports})
        return 0

    raw = _load_config(args.config, args.seed)
    errors = _validate(args, raw)
    if errors:
        raise UsageError("invalid config:\n  " + "\n  ".join(errors))
    cfg = ExperimentConfig.from_dict(raw)
    out = _resolve_out(args, raw)
    _claim_out(out, args.force)
    failed = 0
    if args.command == "gen-data":
        seeds, arts = cmd_gen_data(cfg, out)
    elif args.command == "train":
        seeds, arts = cmd_train(cfg, out)
    elif args.command == "unlearn":
        seeds, arts = cmd_unlearn(cfg, out, args.teacher)
    elif args.command == "evaluate":
        seeds, arts = cmd_evaluate(cfg, out, args.model, args.partition, args.method)
    else:
        seeds, arts, failed = cmd_experiment(cfg, out)
    path = _write_manifest(out, args.command, raw, seeds, arts)
    print(path)
    return 1 if failed else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except UsageError as exc:
        print(f"cfunlearn: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"cfunlearn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
