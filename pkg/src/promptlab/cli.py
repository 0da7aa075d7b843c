"""Command-line interface: binds TOML config files to the experiment
harness. Exit codes: 0 success, 1 validation error, 2 runtime failure.
Diagnostics go to stderr; reports go to the configured output paths.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from . import __version__, harness, taskconfig
from .corpus import write_split_manifest
from .depfilter import Filter, FilterError, default_catalog, grid_search
from .mapping import MappingError
from .taskconfig import ConfigError
from .template import TemplateError

logger = logging.getLogger("promptlab")

_VALIDATION_ERRORS = (
    ConfigError,
    TemplateError,
    FilterError,
    MappingError,
    ValueError,
    FileNotFoundError,
)


def _formatter(prog: str) -> argparse.HelpFormatter:
    return argparse.HelpFormatter(prog, width=96)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptlab",
        description="Prompt construction and K-shot evaluation with trainable verbalizer heads.",
        formatter_class=_formatter,
    )
    parser.add_argument("--version", action="version", version=f"promptlab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=help_text, formatter_class=_formatter)
        cmd.add_argument("--config", required=True, help="TOML experiment config file")
        cmd.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted config override, e.g. experiment.k=8 (repeatable)",
        )
        cmd.add_argument("--seed-list", default="", help="comma-separated seeds, e.g. 1,2,3")
        cmd.add_argument("--template", default="", help="template notation override")
        cmd.add_argument("--backend", choices=["tiny", "remote"], default="", help="backend override")
        cmd.add_argument("--report", default="", help="report output path (default: under output dir)")
        cmd.add_argument("--output-dir", default="", help="output directory (default: runs)")
        cmd.add_argument("-v", "--verbose", action="count", default=0, help="increase log detail")
        return cmd

    add("sample", "write K-shot split manifests for every seed")
    add("train", "train one grid cell and save its checkpoint")
    add("eval", "run the full protocol and write an evaluation report")
    add("search-filters", "rank candidate filters by harness accuracy")
    add("k-sweep", "evaluate increasing K with a fixed cell")
    add("ensemble", "run member mappings and report their joint inference")
    return parser


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")


def _experiment_config(raw: dict, args) -> harness.ExperimentConfig:
    exp = dict(raw.get("experiment", {}))
    model = dict(raw.get("model", {}))
    remote = dict(raw.get("remote", {}))
    data = dict(raw.get("data", {}))

    filter_spec = exp.pop("filter", None)
    flt: Optional[Filter] = None
    if filter_spec:
        try:
            flt = Filter(kind=filter_spec["kind"], name=filter_spec["name"])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"experiment.filter needs kind and name: {filter_spec!r}") from exc

    kwargs = {
        "task": exp.get("task", harness.ExperimentConfig.task),
        "template": exp.get("template", ""),
        "mapping": exp.get("mapping", "manual"),
        "ensemble": tuple(exp.get("ensemble", ())),
        "meta_parts": tuple(exp["meta_parts"]) if "meta_parts" in exp else None,
        "filter": flt,
        "max_snippet_tokens": int(exp.get("max_snippet_tokens", 8)),
        "k": int(exp.get("k", 16)),
        "seeds": tuple(int(s) for s in exp.get("seeds", (1, 2, 3, 4, 5))),
        "batch_sizes": tuple(int(b) for b in exp.get("batch_sizes", (4, 8, 16))),
        "learning_rates": tuple(float(r) for r in exp.get("learning_rates", (1e-5, 2e-5, 5e-5))),
        "max_steps": int(exp.get("max_steps", 1000)),
        "eval_every": int(exp.get("eval_every", 50)),
        "early_stop_dev": float(exp["early_stop_dev"]) if "early_stop_dev" in exp else None,
        "checkpoint_selection": exp.get("checkpoint_selection", "dev"),
        "parallelism": int(exp.get("parallelism", 1)),
        "backend": model.get("backend", "tiny"),
        "dim": int(model.get("dim", 16)),
        "layers": int(model.get("layers", 1)),
        "model_seed": int(model.get("seed", 0)),
        "optimizer": model.get("optimizer", "adamw"),
        "max_len": int(model.get("max_len", 24)),
        "lowercase": bool(model.get("lowercase", True)),
        "remote_url": remote.get("url", ""),
        "remote_vocab": remote.get("vocab_file", ""),
        "train_file": data.get("train_file", ""),
        "test_file": data.get("test_file", ""),
        "train_annotations": data.get("train_annotations", ""),
        "test_annotations": data.get("test_annotations", ""),
        "train_annotations1": data.get("train_annotations1", ""),
        "test_annotations1": data.get("test_annotations1", ""),
        "task_definition": json.dumps(raw["task"], sort_keys=True) if raw.get("task") else "",
        "catalog_file": exp.get("catalog_file", ""),
    }
    if args.seed_list:
        kwargs["seeds"] = tuple(int(s) for s in args.seed_list.split(","))
    if args.template:
        kwargs["template"] = args.template
    if args.backend:
        kwargs["backend"] = args.backend
    return harness.ExperimentConfig(**kwargs)


def _load(args) -> tuple[dict, harness.ExperimentConfig, Path]:
    raw = taskconfig.load_config_file(args.config)
    raw = taskconfig.apply_overrides(raw, args.override)
    config = _experiment_config(raw, args)
    out_dir = Path(args.output_dir or raw.get("output", {}).get("dir", "runs"))
    out_dir.mkdir(parents=True, exist_ok=True)
    return raw, config, out_dir


def _report_path(args, out_dir: Path, default_name: str) -> Path:
    return Path(args.report) if args.report else out_dir / default_name


def cmd_sample(args) -> int:
    _, config, out_dir = _load(args)
    task = harness.resolve_task(config)
    from .corpus import sample_kshot

    for seed in config.seeds:
        split = sample_kshot(task.train_examples, task.labels, config.k, seed)
        path = out_dir / f"split-{config.task}-k{config.k}-seed{seed}.json"
        write_split_manifest(split, path, task=config.task)
        print(f"seed {seed}: train {len(split.train)}, dev {len(split.dev)} -> {path}")
    return 0


def cmd_train(args) -> int:
    _, config, out_dir = _load(args)
    cell = dataclasses.replace(
        config,
        seeds=(config.seeds[0],),
        batch_sizes=(config.batch_sizes[0],),
        learning_rates=(config.learning_rates[0],),
    )
    report = harness.run_experiment(cell)
    seed = cell.seeds[0]
    artifacts = report.artifacts[seed]
    checkpoint = out_dir / f"model-{config.task}-seed{seed}.npz"
    if hasattr(artifacts.backend, "save"):
        artifacts.backend.save(checkpoint)
        print(f"checkpoint -> {checkpoint}")
    heads_path = out_dir / f"heads-{config.task}-seed{seed}.json"
    heads_path.write_text(
        json.dumps(
            [
                {"weights": [w.tolist() for w in h.weights], "biases": h.biases.tolist()}
                for h in artifacts.heads
            ],
            indent=2,
        ),
        encoding="utf-8",
    )
    print(f"heads -> {heads_path}")
    report.save(_report_path(args, out_dir, f"train-{config.task}.json"))
    print(f"cell accuracy: {report.formatted()}")
    return 0


def cmd_eval(args) -> int:
    _, config, out_dir = _load(args)
    report = harness.run_experiment(config)
    path = _report_path(args, out_dir, f"eval-{config.task}.json")
    report.save(path)
    print(f"{config.task}: {report.formatted()}  median {report.median * 100:.1f}")
    print(f"report -> {path}")
    return 0 if not report.incomplete else 2


def cmd_search_filters(args) -> int:
    raw, config, out_dir = _load(args)
    search = raw.get("search", {})
    if "candidates" in search:
        candidates = [Filter(kind=k, name=n) for k, n in search["candidates"]]
    elif config.catalog_file:
        catalog = taskconfig.load_filter_catalog(config.catalog_file)
        candidates = [Filter(kind, name) for kind, names in catalog.items() for name in names]
    else:
        candidates = default_catalog()
    results = grid_search(candidates, config)
    path = _report_path(args, out_dir, f"filters-{config.task}.json")
    payload = [
        {
            "kind": r.filter.kind,
            "name": r.filter.name,
            "mean": r.mean_accuracy,
            "variance": r.variance,
            "error": r.error,
        }
        for r in results
    ]
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print("filter\tmean\tvariance")
    for r in results:
        if r.failed:
            print(f"{r.filter}\tfailed\t{r.error}")
        else:
            print(f"{r.filter}\t{r.mean_accuracy:.4f}\t{r.variance:.6f}")
    print(f"report -> {path}")
    return 0


def cmd_k_sweep(args) -> int:
    raw, config, out_dir = _load(args)
    sweep = raw.get("sweep", {})
    ks = [int(k) for k in sweep.get("ks", (8, 16))]
    rows = harness.k_sweep(
        config,
        ks,
        batch_size=int(sweep.get("batch_size", 4)),
        learning_rate=float(sweep.get("learning_rate", 1e-5)),
        max_steps=int(sweep.get("max_steps", 1000)),
    )
    path = _report_path(args, out_dir, f"ksweep-{config.task}.json")
    path.write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    print("k\tmean\tgain")
    for row in rows:
        print(f"{row['k']}\t{row['mean'] * 100:.1f}\t{harness.format_gain(row['gain'])}")
    print(f"report -> {path}")
    return 0


def cmd_ensemble(args) -> int:
    raw, config, out_dir = _load(args)
    members = raw.get("ensemble", {}).get("members") or list(config.member_names)
    if len(members) < 1:
        raise ConfigError("ensemble needs at least one member mapping name")
    reports = []
    for name in members:
        member_config = dataclasses.replace(config, mapping=name, ensemble=())
        report = harness.run_experiment(member_config)
        reports.append(report)
        print(f"{name}: {report.formatted()}")
    joint = harness.ensemble_report(reports, config)
    path = _report_path(args, out_dir, f"ensemble-{config.task}.json")
    joint.save(path)
    print(f"Ensemble: {joint.formatted()}")
    print(f"report -> {path}")
    return 0


_HANDLERS = {
    "sample": cmd_sample,
    "train": cmd_train,
    "eval": cmd_eval,
    "search-filters": cmd_search_filters,
    "k-sweep": cmd_k_sweep,
    "ensemble": cmd_ensemble,
}


def dispatch(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    _configure_logging(args.verbose)
    try:
        return _HANDLERS[args.command](args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI owns the exit code
        logger.exception("run failed")
        print(f"failed: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
