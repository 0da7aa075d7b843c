"""The K-shot evaluation protocol: seeded splits x a hyperparameter
grid, dev-selected checkpoints, per-seed best selection, and
mean/variance/median aggregation. Also the K sweep and joint ensemble
inference over finished runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import synthetic
from .corpus import Example, KShotSplit, sample_kshot, split_overlap
from .depfilter import Filter, extract
from .lm.base import LmBackend
from .lm.tiny import TinyMlm, TinyMlmConfig
from .lm.tokenizer import TokenizerHandle
from .mapping import (
    LabelMapping,
    MappingEnsemble,
    MappingHead,
    ensemble_head_gradients,
    ensemble_logit_gradients,
    ensemble_nll_loss,
    init_head,
    nll_loss,
    predict_ensemble,
    predict_weighted,
)
from .optim import make_optimizer
from .taskconfig import ConfigError, TaskData, extended_filter_catalog, load_task_files
from .template import (
    Literal,
    MetaPrompt,
    RenderedInput,
    Template,
    compose_meta,
    insert_dep_slot,
    parse_template,
    render,
)

logger = logging.getLogger(__name__)


class HarnessError(RuntimeError):
    """Experiment cannot run as configured."""


def stable_seed(*parts) -> int:
    """Platform-independent 32-bit seed derived from the given parts."""
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = synthetic.MARKER_TASK
    template: str = ""  # empty: the task's bundled template
    mapping: str = "manual"
    ensemble: tuple[str, ...] = ()  # member mapping names; B = len
    meta_parts: Optional[tuple[str, ...]] = None  # None: no metadata blocks
    filter: Optional[Filter] = None
    max_snippet_tokens: int = 8
    k: int = 16
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    batch_sizes: tuple[int, ...] = (4, 8, 16)
    learning_rates: tuple[float, ...] = (1e-5, 2e-5, 5e-5)
    max_steps: int = 1000
    eval_every: int = 50
    early_stop_dev: Optional[float] = None
    checkpoint_selection: str = "dev"  # "test" reproduces the looser reading
    backend: str = "tiny"  # or "remote"
    dim: int = 16
    layers: int = 1
    model_seed: int = 0
    optimizer: str = "adamw"
    max_len: int = 24
    lowercase: bool = True
    remote_url: str = ""
    remote_vocab: str = ""
    parallelism: int = 1
    train_file: str = ""
    test_file: str = ""
    train_annotations: str = ""
    test_annotations: str = ""
    train_annotations1: str = ""
    test_annotations1: str = ""
    # canonical JSON of a user task definition; empty for built-in tasks
    task_definition: str = ""
    catalog_file: str = ""

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not self.batch_sizes or not self.learning_rates:
            raise ConfigError("need at least one batch size and one learning rate")
        if self.checkpoint_selection not in ("dev", "test"):
            raise ConfigError("checkpoint_selection must be 'dev' or 'test'")
        if self.backend not in ("tiny", "remote"):
            raise ConfigError("backend must be 'tiny' or 'remote'")

    @property
    def member_names(self) -> tuple[str, ...]:
        return self.ensemble if self.ensemble else (self.mapping,)

    def config_hash(self) -> str:
        payload = dataclasses.asdict(self)
        if self.filter is not None:
            payload["filter"] = [self.filter.kind, self.filter.name]
        canonical = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def with_filter(config: ExperimentConfig, flt: Optional[Filter]) -> ExperimentConfig:
    return dataclasses.replace(config, filter=flt)


# aggregation: these exact formulas are the report contract

def mean_of(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def population_variance(values: Sequence[float]) -> float:
    m = mean_of(values)
    return sum((v - m) ** 2 for v in values) / len(values)


def median_of(values: Sequence[float]) -> float:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    if n % 2:
        return ordered[mid]
    return (ordered[mid - 1] + ordered[mid]) / 2


def format_cell(mean: float, variance: float) -> str:
    """Accuracy cell in percent: mean to one decimal, variance of the
    percent-scale values in parentheses, e.g. "87.2 (3.4")."""
    return f"{mean * 100:.1f} ({variance * 100 * 100:.1f})"


def format_gain(gain: float) -> str:
    return f"({gain * 100:+.1f})"


@dataclass
class CellResult:
    seed: int
    batch_size: int
    learning_rate: float
    steps: int = 0
    best_step: int = 0
    dev_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    error: Optional[str] = None

    @property
    def key(self) -> tuple:
        return (self.seed, self.batch_size, self.learning_rate)


@dataclass
class SeedArtifacts:
    """Dev-selected model of a seed's best cell, ready for joint inference."""

    label_names: tuple[str, ...]
    backend: LmBackend
    heads: list[MappingHead]
    mappings: list[LabelMapping]
    rendered: dict[str, RenderedInput]

    def predict_proba(self, example: Example) -> np.ndarray:
        logits = self.backend.score(self.rendered[example.id])
        if len(self.mappings) == 1:
            return predict_weighted(logits, self.mappings[0], self.heads[0])
        ensemble = MappingEnsemble(tuple(zip(self.mappings, self.heads)))
        return predict_ensemble(logits, ensemble)


@dataclass
class EvalReport:
    task: str
    config_hash: str
    cells: list[CellResult]
    per_seed_best: dict[int, float]
    mean: float
    variance: float
    median: float
    incomplete: bool = False
    audit: list[str] = field(default_factory=list)
    artifacts: Optional[dict[int, SeedArtifacts]] = None  # runtime-only

    def formatted(self) -> str:
        return format_cell(self.mean, self.variance)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "config_hash": self.config_hash,
            "mean": self.mean,
            "variance": self.variance,
            "median": self.median,
            "formatted": self.formatted(),
            "incomplete": self.incomplete,
            "per_seed_best": {str(s): v for s, v in self.per_seed_best.items()},
            "cells": [
                {
                    "seed": c.seed,
                    "batch_size": c.batch_size,
                    "learning_rate": c.learning_rate,
                    "steps": c.steps,
                    "best_step": c.best_step,
                    "dev_accuracy": c.dev_accuracy,
                    "test_accuracy": c.test_accuracy,
                    "error": c.error,
                }
                for c in self.cells
            ],
            "audit": self.audit,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def resolve_task(config: ExperimentConfig) -> TaskData:
    if not config.task_definition and config.task in synthetic.SYNTHETIC_TASKS:
        return synthetic.build_synthetic_task(config.task)
    if not config.train_file or not config.test_file:
        raise ConfigError(f"task {config.task!r} needs train_file and test_file")
    return load_task_files(
        config.task,
        config.train_file,
        config.test_file,
        config.train_annotations,
        config.test_annotations,
        config.train_annotations1,
        config.test_annotations1,
        entry=json.loads(config.task_definition) if config.task_definition else None,
    )


@dataclass
class PreparedExperiment:
    config: ExperimentConfig
    task: TaskData
    template: Template
    meta: Optional[MetaPrompt]
    tokenizer: TokenizerHandle
    mappings: list[LabelMapping]
    rendered: dict[str, RenderedInput]
    backend_factory: Callable[[], LmBackend]


def _collect_vocab_texts(task: TaskData, template: Template, meta: Optional[MetaPrompt]) -> list[str]:
    texts = []
    for e in (*task.train_examples, *task.test_examples):
        texts.append(e.sent0)
        if e.sent1:
            texts.append(e.sent1)
    texts.extend(seg.text for seg in template.segments if isinstance(seg, Literal))
    if meta is not None:
        texts.extend(meta.parts)
    for words in task.mappings.values():
        texts.extend(" ".join(row) for row in words)
    for sentence in task.annotations.values():
        texts.append(" ".join(t.form for t in sentence.tokens))
    return texts


def prepare(config: ExperimentConfig, task: Optional[TaskData] = None) -> PreparedExperiment:
    task = task or resolve_task(config)

    meta: Optional[MetaPrompt] = None
    if config.meta_parts is not None:
        if task.meta is None:
            raise ConfigError(f"task {config.task!r} has no metadata descriptions")
        meta = compose_meta(task.meta, config.meta_parts)
        notation = config.template or task.meta_template or task.template
    else:
        notation = config.template or task.template
    template = parse_template(notation)
    if template.has_meta and meta is None:
        if task.meta is None:
            raise ConfigError("template has meta blocks but the task declares no meta texts")
        meta = task.meta

    if config.filter is not None:
        template = insert_dep_slot(template)
        if not task.annotations:
            raise ConfigError("a filter is configured but the task has no dependency annotations")

    if config.backend == "remote":
        if not config.remote_vocab:
            raise ConfigError("remote backend needs remote_vocab (the service's vocabulary file)")
        tokenizer = TokenizerHandle.from_vocab_file(config.remote_vocab, lowercase=config.lowercase)
    else:
        tokenizer = TokenizerHandle.build(
            _collect_vocab_texts(task, template, meta), lowercase=config.lowercase
        )

    mappings = [
        LabelMapping.from_words(name, task.mapping_words(name), tokenizer)
        for name in config.member_names
    ]

    if config.catalog_file:
        from .taskconfig import load_filter_catalog

        catalog = load_filter_catalog(config.catalog_file)
    else:
        catalog = extended_filter_catalog()
    rendered: dict[str, RenderedInput] = {}
    for e in (*task.train_examples, *task.test_examples):
        dep = None
        if config.filter is not None:
            # pair tasks: snippets come from the first sentence's parse
            sentence = task.annotations.get(e.id)
            if sentence is None:
                raise ConfigError(f"example {e.id} has no dependency annotation")
            dep = extract(sentence, config.filter, config.max_snippet_tokens, catalog=catalog)
        rendered[e.id] = render(template, e, tokenizer, dep=dep, meta=meta, max_len=config.max_len)

    if config.backend == "remote":
        from .lm.remote import RemoteLm

        if not config.remote_url:
            raise ConfigError("remote backend needs remote_url")
        shared = RemoteLm(config.remote_url)

        def backend_factory() -> LmBackend:
            return shared

    else:
        mlm_config = TinyMlmConfig(
            vocab_size=len(tokenizer),
            max_len=config.max_len,
            dim=config.dim,
            layers=config.layers,
            seed=config.model_seed,
            optimizer=config.optimizer,
        )

        def backend_factory() -> LmBackend:
            return TinyMlm(mlm_config)

    return PreparedExperiment(
        config=config,
        task=task,
        template=template,
        meta=meta,
        tokenizer=tokenizer,
        mappings=mappings,
        rendered=rendered,
        backend_factory=backend_factory,
    )


def _accuracy(
    backend: LmBackend,
    prepared: PreparedExperiment,
    heads: list[MappingHead],
    examples: Sequence[Example],
) -> float:
    hits = 0
    members = list(zip(prepared.mappings, heads))
    for e in examples:
        logits = backend.score(prepared.rendered[e.id])
        if len(members) == 1:
            p = predict_weighted(logits, *members[0])
        else:
            p = predict_ensemble(logits, MappingEnsemble(tuple(members)))
        hits += int(int(np.argmax(p)) == e.label)
    return hits / len(examples)


def _train_cell(
    prepared: PreparedExperiment,
    split: KShotSplit,
    batch_size: int,
    learning_rate: float,
    audit: list[str],
) -> tuple[CellResult, SeedArtifacts]:
    config = prepared.config
    result = CellResult(seed=split.seed, batch_size=batch_size, learning_rate=learning_rate)
    backend = prepared.backend_factory()
    heads = [
        init_head(m, stable_seed("head", split.seed, i)) for i, m in enumerate(prepared.mappings)
    ]
    head_params = [
        {**{f"w{t}": h.weights[t] for t in range(len(h.weights))}, "b": h.biases} for h in heads
    ]
    head_optimizers = [make_optimizer(config.optimizer, p) for p in head_params]
    members = MappingEnsemble(tuple(zip(prepared.mappings, heads)))
    single = len(prepared.mappings) == 1
    order_rng = np.random.default_rng(stable_seed("order", split.seed, batch_size, learning_rate))

    select_examples = split.dev if config.checkpoint_selection == "dev" else prepared.task.test_examples
    best_metric, best_step = -1.0, 0
    best_state: tuple | None = None

    def snapshot():
        backend_state = backend.copy_params() if isinstance(backend, TinyMlm) else None
        return (backend_state, [h.copy() for h in heads])

    def evaluate_selection(step: int) -> None:
        nonlocal best_metric, best_step, best_state
        metric = _accuracy(backend, prepared, heads, select_examples)
        if metric > best_metric:
            best_metric, best_step, best_state = metric, step, snapshot()
        audit.append(
            f"cell seed={split.seed} bs={batch_size} lr={learning_rate:g}: "
            f"step {step} {config.checkpoint_selection}={metric:.4f}"
        )

    queue: list[int] = []
    step = 0
    while step < config.max_steps:
        if not queue:
            queue = list(order_rng.permutation(len(split.train)))
        take, queue = queue[:batch_size], queue[batch_size:]
        batch = [split.train[i] for i in take]
        inputs = [prepared.rendered[e.id] for e in batch]
        gold = [e.label for e in batch]
        logits = [backend.score(r) for r in inputs]

        if single:
            mapping, head = prepared.mappings[0], heads[0]
            d_w, d_b = ensemble_head_gradients(logits, members, gold)[0]
            grads = [{**{f"w{t}": d_w[t] for t in range(len(d_w))}, "b": d_b}]
            losses = [
                nll_loss([predict_weighted(l, mapping, head)], [y]) for l, y in zip(logits, gold)
            ]
        else:
            member_grads = ensemble_head_gradients(logits, members, gold)
            grads = [
                {**{f"w{t}": d_w[t] for t in range(len(d_w))}, "b": d_b}
                for d_w, d_b in member_grads
            ]
            losses = [
                ensemble_nll_loss(
                    [[predict_weighted(l, m, h)] for m, h in members.members], [y]
                )
                for l, y in zip(logits, gold)
            ]
        for optimizer, grad in zip(head_optimizers, grads):
            optimizer.step(grad, learning_rate)
        if backend.trainable:
            mask_grads = [
                ensemble_logit_gradients(l, members, y) for l, y in zip(logits, gold)
            ]
            backend.train_step(inputs, mask_grads, learning_rate, losses=losses)
        step += 1
        if step % config.eval_every == 0 or step == config.max_steps:
            evaluate_selection(step)
            if config.early_stop_dev is not None and best_metric >= config.early_stop_dev:
                break

    if best_state is None:
        evaluate_selection(step)
    result.steps = step
    result.best_step = best_step
    backend_state, best_heads = best_state
    if backend_state is not None:
        backend.load_params(backend_state)
    heads = best_heads
    result.dev_accuracy = (
        best_metric
        if config.checkpoint_selection == "dev"
        else _accuracy(backend, prepared, heads, split.dev)
    )
    result.test_accuracy = _accuracy(backend, prepared, heads, prepared.task.test_examples)
    audit.append(
        f"cell seed={split.seed} bs={batch_size} lr={learning_rate:g}: "
        f"selected step {best_step}, test={result.test_accuracy:.4f}"
    )
    artifacts = SeedArtifacts(
        label_names=prepared.task.labels.names,
        backend=backend,
        heads=heads,
        mappings=prepared.mappings,
        rendered=prepared.rendered,
    )
    return result, artifacts


def run_experiment(config: ExperimentConfig, task_data: Optional[TaskData] = None) -> EvalReport:
    """Run the full protocol and aggregate per-seed bests.

    For each seed: sample a K-shot split; for each (batch size, learning
    rate) cell: train, select the checkpoint on dev, evaluate the full
    test set; the per-seed best is the max of cell test accuracies.
    Failed cells are recorded and flag the report incomplete.
    """
    prepared = prepare(config, task_data)
    audit: list[str] = []
    splits: dict[int, KShotSplit] = {}
    for seed in config.seeds:
        splits[seed] = sample_kshot(
            prepared.task.train_examples, prepared.task.labels, config.k, seed
        )
        audit.append(f"seed={seed}: sampled k={config.k} split")
    seed_list = list(config.seeds)
    for i, a in enumerate(seed_list):
        for b in seed_list[i + 1 :]:
            audit.append(
                f"overlap seeds {a}/{b}: {split_overlap(splits[a], splits[b])} shared train ids"
            )

    cell_keys = [
        (seed, bs, lr)
        for seed in config.seeds
        for bs in config.batch_sizes
        for lr in config.learning_rates
    ]

    def run_one(key):
        seed, bs, lr = key
        local_audit: list[str] = []
        try:
            result, artifacts = _train_cell(prepared, splits[seed], bs, lr, local_audit)
            return key, result, artifacts, local_audit
        except Exception as exc:  # noqa: BLE001 - a cell failure must not sink the run
            logger.warning("cell %s failed: %s", key, exc)
            result = CellResult(seed=seed, batch_size=bs, learning_rate=lr, error=str(exc))
            return key, result, None, local_audit + [f"cell {key}: failed: {exc}"]

    if config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            outcomes = list(pool.map(run_one, cell_keys))
    else:
        outcomes = [run_one(key) for key in cell_keys]
    outcomes.sort(key=lambda item: cell_keys.index(item[0]))

    cells: list[CellResult] = []
    best_per_seed: dict[int, tuple[float, SeedArtifacts]] = {}
    for key, result, artifacts, local_audit in outcomes:
        cells.append(result)
        audit.extend(local_audit)
        if result.error is None:
            current = best_per_seed.get(result.seed)
            if current is None or result.test_accuracy > current[0]:
                best_per_seed[result.seed] = (result.test_accuracy, artifacts)

    incomplete = any(c.error is not None for c in cells) or len(best_per_seed) < len(config.seeds)
    if not best_per_seed:
        raise HarnessError("every cell failed; no report to aggregate")
    per_seed_best = {seed: acc for seed, (acc, _) in sorted(best_per_seed.items())}
    bests = list(per_seed_best.values())
    report = EvalReport(
        task=config.task,
        config_hash=config.config_hash(),
        cells=cells,
        per_seed_best=per_seed_best,
        mean=mean_of(bests),
        variance=population_variance(bests),
        median=median_of(bests),
        incomplete=incomplete,
        audit=audit,
        artifacts={seed: art for seed, (_, art) in best_per_seed.items()},
    )
    return report


def k_sweep(
    config: ExperimentConfig,
    ks: Sequence[int],
    task_data: Optional[TaskData] = None,
    batch_size: int = 4,
    learning_rate: float = 1e-5,
    max_steps: int = 1000,
) -> list[dict]:
    """Evaluate increasing K with one fixed (batch size, learning rate)
    cell per seed; the gain column is the mean-accuracy delta between
    consecutive rows, "(+0.0)" for the first."""
    ks = list(ks)
    if any(b <= a for a, b in zip(ks, ks[1:])) or not ks:
        raise ConfigError("ks must be non-empty and strictly increasing")
    rows: list[dict] = []
    previous: Optional[float] = None
    for k in ks:
        run_config = dataclasses.replace(
            config,
            k=k,
            batch_sizes=(batch_size,),
            learning_rates=(learning_rate,),
            max_steps=max_steps,
        )
        report = run_experiment(run_config, task_data)
        gain = 0.0 if previous is None else report.mean - previous
        rows.append(
            {
                "k": k,
                "mean": report.mean,
                "variance": report.variance,
                "gain": gain,
                "formatted": f"{report.mean * 100:.1f} {format_gain(gain)}",
            }
        )
        previous = report.mean
    return rows


def ensemble_report(reports: Sequence[EvalReport], config: ExperimentConfig) -> EvalReport:
    """Joint inference over member runs: per seed, average the member
    class distributions on the test set and aggregate like a run."""
    if not reports:
        raise HarnessError("no member reports")
    label_sets = set()
    for report in reports:
        if report.artifacts is None:
            raise HarnessError("member report carries no artifacts for joint inference")
        label_sets.update(art.label_names for art in report.artifacts.values())
    if len(label_sets) != 1:
        raise HarnessError(f"members disagree on label sets: {sorted(label_sets)}")
    task = resolve_task(config)
    common_seeds = sorted(set.intersection(*(set(r.artifacts) for r in reports)))
    if not common_seeds:
        raise HarnessError("member reports share no seeds")
    audit = [f"ensemble of {len(reports)} runs over seeds {common_seeds}"]
    per_seed: dict[int, float] = {}
    cells: list[CellResult] = []
    for seed in common_seeds:
        members = [r.artifacts[seed] for r in reports]
        hits = 0
        for e in task.test_examples:
            mean_p: Optional[np.ndarray] = None
            for i, member in enumerate(members, start=1):
                p = member.predict_proba(e)
                mean_p = p if mean_p is None else mean_p + (p - mean_p) / i
            hits += int(int(np.argmax(mean_p)) == e.label)
        acc = hits / len(task.test_examples)
        per_seed[seed] = acc
        cells.append(
            CellResult(seed=seed, batch_size=0, learning_rate=0.0, test_accuracy=acc)
        )
        audit.append(f"ensemble seed={seed}: test={acc:.4f}")
    bests = [per_seed[s] for s in common_seeds]
    return EvalReport(
        task=f"{config.task}:ensemble",
        config_hash=config.config_hash(),
        cells=cells,
        per_seed_best=per_seed,
        mean=mean_of(bests),
        variance=population_variance(bests),
        median=median_of(bests),
        audit=audit,
    )
