"""Dataset ingestion, dependency-annotation reading, and K-shot splits.

Datasets are delimited text files (tab by default), one example per line.
Dependency annotations are ingested from CoNLL-U files produced by an
external tagger; sentence order must align with dataset row order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class DatasetError(ValueError):
    """Malformed dataset file or schema violation."""


class ConlluError(ValueError):
    """Malformed CoNLL-U annotation file."""


@dataclass(frozen=True)
class LabelSet:
    """Ordered label names; order fixes the label-index space."""

    names: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.names) < 2:
            raise DatasetError("a label set needs at least 2 labels")
        if len(set(self.names)) != len(self.names):
            raise DatasetError("label names must be unique")
        if any(not n for n in self.names):
            raise DatasetError("label names must be non-empty")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DatasetError(f"unknown label {name!r}") from None


@dataclass(frozen=True)
class Example:
    """One labeled input: a sentence, or a sentence pair for NLI-style tasks."""

    id: str
    sent0: str
    label: int
    sent1: Optional[str] = None

    def __post_init__(self) -> None:
        if self.label < 0:
            raise DatasetError(f"example {self.id}: negative label index")


@dataclass(frozen=True)
class Token:
    form: str
    pos: str
    head: int  # 1-based index of the head token, 0 for the root
    deprel: str


@dataclass(frozen=True)
class AnnotatedSentence:
    """Tokens with POS tags and dependency arcs, the substrate for filters."""

    tokens: tuple[Token, ...]

    def __post_init__(self) -> None:
        n = len(self.tokens)
        if n < 1:
            raise ConlluError("annotated sentence must have at least one token")
        roots = [t for t in self.tokens if t.head == 0]
        if len(roots) != 1:
            raise ConlluError(f"expected exactly one root token, found {len(roots)}")
        for t in self.tokens:
            if not 0 <= t.head <= n:
                raise ConlluError(f"head index {t.head} outside [0, {n}]")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class TaskSchema:
    """Declares how a dataset file maps onto examples.

    Columns are ``sent0 [sent1] label`` unless ``label_column`` says
    otherwise. Label order here (not file order) fixes mapping indices.
    """

    name: str
    labels: tuple[str, ...]
    pair: bool = False
    delimiter: str = "\t"
    label_column: int = -1

    def label_set(self) -> LabelSet:
        return LabelSet(tuple(self.labels))

    @property
    def columns(self) -> int:
        return 3 if self.pair else 2


@dataclass(frozen=True)
class KShotSplit:
    seed: int
    k: int
    train: tuple[Example, ...]
    dev: tuple[Example, ...]


def parse_dataset(path: str | Path, schema: TaskSchema) -> tuple[LabelSet, list[Example]]:
    """Read a delimited dataset file into examples.

    Every row must have exactly ``schema.columns`` fields; label strings are
    mapped to indices in the order declared by the schema.
    """
    labels = schema.label_set()
    examples: list[Example] = []
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(schema.delimiter)
            if len(fields) != schema.columns:
                raise DatasetError(
                    f"{path.name}:{lineno}: expected {schema.columns} columns, got {len(fields)}"
                )
            label_str = fields[schema.label_column]
            if label_str not in labels.names:
                raise DatasetError(f"{path.name}:{lineno}: unknown label {label_str!r}")
            text_fields = [f for i, f in enumerate(fields) if i != schema.label_column % len(fields)]
            sent0 = text_fields[0]
            sent1 = text_fields[1] if schema.pair else None
            examples.append(
                Example(id=f"{schema.name}-{lineno}", sent0=sent0, sent1=sent1, label=labels.index(label_str))
            )
    return labels, examples


def parse_conllu(path: str | Path) -> list[AnnotatedSentence]:
    """Read a 10-column CoNLL-U file: one sentence per blank-line block.

    Retains form (col 2), POS (col 4, or col 5 if col 4 is "_"), head
    (col 7) and deprel (col 8). Comment lines and multiword ranges are
    skipped.
    """
    path = Path(path)
    sentences: list[AnnotatedSentence] = []
    tokens: list[Token] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                if tokens:
                    sentences.append(AnnotatedSentence(tuple(tokens)))
                    tokens = []
                continue
            if line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 10:
                raise ConlluError(f"{path.name}:{lineno}: expected 10 columns, got {len(cols)}")
            if "-" in cols[0] or "." in cols[0]:
                continue
            pos = cols[3] if cols[3] != "_" else cols[4]
            try:
                head = int(cols[6])
            except ValueError:
                raise ConlluError(f"{path.name}:{lineno}: non-integer head {cols[6]!r}") from None
            tokens.append(Token(form=cols[1], pos=pos, head=head, deprel=cols[7]))
    if tokens:
        sentences.append(AnnotatedSentence(tuple(tokens)))
    return sentences


def write_conllu(sentences: Iterable[AnnotatedSentence], path: str | Path) -> None:
    """Serialize sentences in the same 10-column layout parse_conllu reads."""
    lines: list[str] = []
    for sent in sentences:
        for i, tok in enumerate(sent.tokens, start=1):
            lines.append(
                "\t".join([str(i), tok.form, "_", tok.pos, "_", "_", str(tok.head), tok.deprel, "_", "_"])
            )
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def sample_kshot(examples: Sequence[Example], labels: LabelSet, k: int, seed: int) -> KShotSplit:
    """Draw a balanced K-shot train/dev split, k examples per label in each.

    Sampling is uniform without replacement, per label, using numpy's
    PCG64 generator keyed by ``seed``: labels are visited in LabelSet
    order, each label's pool keeps input order, and one permutation of
    the pool yields train (first k) then dev (next k). Same inputs always
    produce the same split.
    """
    if k < 1:
        raise DatasetError("k must be >= 1")
    rng = np.random.default_rng(seed)
    train: list[Example] = []
    dev: list[Example] = []
    for t, name in enumerate(labels.names):
        pool = [e for e in examples if e.label == t]
        if len(pool) < 2 * k:
            raise DatasetError(
                f"label {name!r} has {len(pool)} examples, need {2 * k} for a {k}-shot split"
            )
        perm = rng.permutation(len(pool))
        train.extend(pool[i] for i in perm[:k])
        dev.extend(pool[i] for i in perm[k : 2 * k])
    return KShotSplit(seed=seed, k=k, train=tuple(train), dev=tuple(dev))


def split_overlap(a: KShotSplit, b: KShotSplit) -> int:
    """Number of train example ids shared by two splits (recorded, not forbidden)."""
    return len({e.id for e in a.train} & {e.id for e in b.train})


def write_split_manifest(split: KShotSplit, path: str | Path, task: str = "") -> None:
    """Audit record of a split: seed, k, and example ids per side."""
    payload = {
        "task": task,
        "seed": split.seed,
        "k": split.k,
        "train_ids": [e.id for e in split.train],
        "dev_ids": [e.id for e in split.dev],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
