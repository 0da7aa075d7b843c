"""Task and experiment configuration: bundled task definitions, TOML
config files, and dotted-key overrides."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .corpus import AnnotatedSentence, Example, LabelSet, TaskSchema, parse_conllu, parse_dataset
from .template import MetaPrompt


class ConfigError(ValueError):
    """Bad configuration file or override."""


@dataclass
class TaskData:
    """Everything an experiment needs about one task."""

    schema: TaskSchema
    labels: LabelSet
    train_examples: list[Example]
    test_examples: list[Example]
    template: str
    meta_template: str
    mappings: dict[str, list[list[str]]]
    meta: Optional[MetaPrompt] = None
    annotations: dict[str, AnnotatedSentence] = field(default_factory=dict)
    # second-sentence parses for pair tasks (aligned annotation file #2)
    annotations1: dict[str, AnnotatedSentence] = field(default_factory=dict)

    def mapping_words(self, name: str) -> list[list[str]]:
        if name not in self.mappings:
            raise ConfigError(
                f"task {self.schema.name!r} has no mapping {name!r} "
                f"(available: {', '.join(sorted(self.mappings))})"
            )
        words = self.mappings[name]
        if len(words) != len(self.labels):
            raise ConfigError(f"mapping {name!r} covers {len(words)} labels, task has {len(self.labels)}")
        return words


def _read_package_toml(name: str) -> dict:
    with resources.files("promptlab.data").joinpath(name).open("rb") as fh:
        return tomllib.load(fh)


def builtin_tasks() -> dict[str, dict]:
    return _read_package_toml("tasks.toml")


def builtin_filter_catalog() -> dict[str, tuple[str, ...]]:
    raw = _read_package_toml("filters.toml")["catalog"]
    return {kind: tuple(names) for kind, names in raw.items()}


def extended_filter_catalog() -> dict[str, tuple[str, ...]]:
    raw = _read_package_toml("filters.toml")
    catalog = {kind: list(names) for kind, names in raw["catalog"].items()}
    for kind, names in raw.get("extended", {}).items():
        catalog.setdefault(kind, [])
        catalog[kind].extend(n for n in names if n not in catalog[kind])
    return {kind: tuple(names) for kind, names in catalog.items()}


def load_filter_catalog(path: str | Path) -> dict[str, tuple[str, ...]]:
    """A user catalog file: same shape as the bundled filters.toml."""
    raw = load_config_file(path)
    if "catalog" not in raw:
        raise ConfigError(f"{path}: filter catalog file needs a [catalog] table")
    return {kind: tuple(names) for kind, names in raw["catalog"].items()}


def _task_entry(task: str) -> dict:
    tasks = builtin_tasks()
    if task not in tasks:
        raise ConfigError(f"unknown task {task!r} (built-in: {', '.join(sorted(tasks))})")
    return tasks[task]


def _aligned_annotations(examples, ann_path, into: dict) -> None:
    sentences = parse_conllu(ann_path)
    if len(sentences) != len(examples):
        raise ConfigError(
            f"{ann_path}: {len(sentences)} annotated sentences for {len(examples)} examples"
        )
    into.update({e.id: s for e, s in zip(examples, sentences)})


def load_task_files(
    task: str,
    train_file: str | Path,
    test_file: str | Path,
    train_annotations: str | Path = "",
    test_annotations: str | Path = "",
    train_annotations1: str | Path = "",
    test_annotations1: str | Path = "",
    entry: Optional[dict] = None,
) -> TaskData:
    """Assemble TaskData from dataset files.

    ``entry`` defaults to the built-in definition of ``task``; a custom
    task passes its own (same shape: labels, pair, template, mappings,
    meta, optional delimiter/label_column). Annotation files are CoNLL-U,
    sentence i aligned with dataset row i; pair tasks may supply a second
    aligned file per split for the second sentence.
    """
    entry = entry if entry is not None else _task_entry(task)
    if "labels" not in entry:
        raise ConfigError(f"task definition for {task!r} needs a labels list")
    schema = TaskSchema(
        name=task,
        labels=tuple(entry["labels"]),
        pair=bool(entry.get("pair", False)),
        delimiter=entry.get("delimiter", "\t"),
        label_column=int(entry.get("label_column", -1)),
    )
    labels, train_examples = parse_dataset(train_file, schema)
    _, test_examples = parse_dataset(test_file, schema)
    annotations: dict[str, AnnotatedSentence] = {}
    annotations1: dict[str, AnnotatedSentence] = {}
    for examples, ann_path in ((train_examples, train_annotations), (test_examples, test_annotations)):
        if ann_path:
            _aligned_annotations(examples, ann_path, annotations)
    for examples, ann_path in ((train_examples, train_annotations1), (test_examples, test_annotations1)):
        if ann_path:
            if not schema.pair:
                raise ConfigError(f"task {task!r} is single-sentence; second annotation file given")
            _aligned_annotations(examples, ann_path, annotations1)
    meta_entry = entry.get("meta")
    meta = MetaPrompt(**meta_entry) if meta_entry else None
    if "template" not in entry:
        raise ConfigError(f"task definition for {task!r} needs a template")
    return TaskData(
        schema=schema,
        labels=labels,
        train_examples=train_examples,
        test_examples=test_examples,
        template=entry["template"],
        meta_template=entry.get("meta_template", ""),
        mappings={name: list(rows) for name, rows in entry.get("mappings", {}).items()},
        meta=meta,
        annotations=annotations,
        annotations1=annotations1,
    )


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with path.open("rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values parse as TOML scalars."""
    import copy

    out = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw  # bare string
        node: dict[str, Any] = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-table")
        node[keys[-1]] = value
    return out
