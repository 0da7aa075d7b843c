"""Bundled synthetic tasks.

Each task is a deterministic 2-label corpus where a single marker token
decides the label, so a correctly wired pipeline must reach high test
accuracy. The truncated variant hides the marker beyond the length
budget; only a filter snippet can bring it back into the prompt.
"""

from __future__ import annotations

import numpy as np

from .corpus import AnnotatedSentence, Example, LabelSet, TaskSchema, Token
from .taskconfig import TaskData
from .template import MetaPrompt

MARKER_TASK = "synthetic-marker"
TRUNCATED_MARKER_TASK = "synthetic-truncated-marker"
SYNTHETIC_TASKS = (MARKER_TASK, TRUNCATED_MARKER_TASK)

_MARKERS = {0: ("dreadful", "awful"), 1: ("wonderful", "superb")}
_SUFFIXES = ("today", "indeed")
_TRUNC_PREFIX = ("the", "long", "and", "rather", "tedious", "movie", "review", "ends")

_MAPPINGS = {
    "manual": [["bad"], ["great"]],
    "multi2": [["bad", "dreadful"], ["great", "wonderful"]],
    "multi3": [["bad", "dreadful", "poor"], ["great", "wonderful", "fine"]],
}

_META = MetaPrompt(
    od="A tiny movie review",
    sd="Written for the bundled toy corpus.",
    td="The emotion of this review was [MASK]",
)


def _marker_examples(n: int, seed: int, prefix: str) -> list[Example]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % 2
        marker = _MARKERS[label][int(rng.integers(0, 2))]
        suffix = _SUFFIXES[int(rng.integers(0, 2))]
        out.append(Example(id=f"{prefix}{i}", sent0=f"the movie was {marker} {suffix}", label=label))
    return out


def _marker_annotation(example: Example) -> AnnotatedSentence:
    words = example.sent0.split()
    markers = {m for pair in _MARKERS.values() for m in pair}
    tokens = []
    for w in words:
        if w in markers:
            tokens.append(Token(w, "JJ", 2, "amod"))
        elif w == "movie":
            tokens.append(Token(w, "NN", 3, "nsubj"))
        elif w == "was":
            tokens.append(Token(w, "VB", 0, "ROOT"))
        else:
            tokens.append(Token(w, "DT", 2, "det"))
    return AnnotatedSentence(tuple(tokens))


def _truncated_examples(n: int, seed: int, prefix: str) -> tuple[list[Example], dict[str, AnnotatedSentence]]:
    rng = np.random.default_rng(seed)
    examples, annotations = [], {}
    for i in range(n):
        label = i % 2
        marker = _MARKERS[label][int(rng.integers(0, 2))]
        words = list(_TRUNC_PREFIX) + [marker]
        example = Example(id=f"{prefix}{i}", sent0=" ".join(words), label=label)
        examples.append(example)
        tokens = []
        for w in words:
            if w == marker:
                tokens.append(Token(w, "JJ", 7, "amod"))
            elif w == "review":
                tokens.append(Token(w, "NN", 8, "nsubj"))
            elif w == "ends":
                tokens.append(Token(w, "VB", 0, "ROOT"))
            else:
                tokens.append(Token(w, "DT", 8, "det"))
        annotations[example.id] = AnnotatedSentence(tuple(tokens))
    return examples, annotations


def build_synthetic_task(name: str, pool: int = 240, test: int = 200) -> TaskData:
    schema = TaskSchema(name=name, labels=("negative", "positive"))
    if name == MARKER_TASK:
        train_examples = _marker_examples(pool, seed=0, prefix="train")
        test_examples = _marker_examples(test, seed=100, prefix="test")
        annotations = {e.id: _marker_annotation(e) for e in (*train_examples, *test_examples)}
    elif name == TRUNCATED_MARKER_TASK:
        train_examples, ann_train = _truncated_examples(pool, seed=0, prefix="train")
        test_examples, ann_test = _truncated_examples(test, seed=100, prefix="test")
        annotations = {**ann_train, **ann_test}
    else:
        raise ValueError(f"unknown synthetic task {name!r}")
    return TaskData(
        schema=schema,
        labels=LabelSet(schema.labels),
        train_examples=train_examples,
        test_examples=test_examples,
        template="*cls**sent_0*_It_was*mask*.*sep+*",
        meta_template="*cls**sent_0*.*od**sd**td**sep+*",
        mappings={k: [list(r) for r in v] for k, v in _MAPPINGS.items()},
        meta=_META,
        annotations=annotations,
    )
