"""Token selection from annotated sentences via POS / dependency filters,
and the grid search that ranks candidate filters per task.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

from .corpus import AnnotatedSentence

if TYPE_CHECKING:
    from .harness import ExperimentConfig, TaskData

logger = logging.getLogger(__name__)

POS_KIND = "POS"
DEP_KIND = "DEP"

# default catalog (7 POS + 5 DEP names, kept verbatim)
DEFAULT_CATALOG: dict[str, tuple[str, ...]] = {
    POS_KIND: ("amod", "advmod", "obj", "NN", "VBD", "VBZ", "VB"),
    DEP_KIND: ("amod", "advmod", "ROOT", "obj", "nsubj"),
}

# extra POS tags usable through a custom catalog
EXTENDED_POS_TAGS = ("JJ", "WP", "WRB", "NNP", "WDT")


class FilterError(ValueError):
    """Filter name outside the declared catalog, or bad arguments."""


@dataclass(frozen=True)
class Filter:
    kind: str  # POS_KIND or DEP_KIND
    name: str

    def __post_init__(self) -> None:
        if self.kind not in (POS_KIND, DEP_KIND):
            raise FilterError(f"unknown filter kind {self.kind!r}")

    def __str__(self) -> str:
        return f"{self.kind}:{self.name}"


@dataclass(frozen=True)
class DepSnippet:
    """Tokens sieved from a sentence, ready to inject into a prompt."""

    tokens: tuple[str, ...]
    source_filter: Filter

    def __bool__(self) -> bool:
        return bool(self.tokens)


def default_catalog() -> list[Filter]:
    return [Filter(kind, name) for kind in (POS_KIND, DEP_KIND) for name in DEFAULT_CATALOG[kind]]


def validate_filter(flt: Filter, catalog: Optional[dict[str, tuple[str, ...]]] = None) -> None:
    catalog = DEFAULT_CATALOG if catalog is None else catalog
    names = catalog.get(flt.kind, ())
    if flt.name not in names:
        raise FilterError(f"filter {flt} not in catalog (known {flt.kind}: {', '.join(names)})")


def extract(
    sentence: AnnotatedSentence,
    flt: Filter,
    max_tokens: int = 8,
    catalog: Optional[dict[str, tuple[str, ...]]] = None,
) -> DepSnippet:
    """Select tokens matching a filter, in sentence order, capped.

    POS filters contribute each matching token. Dependency filters
    contribute a (dependent, head) pair per matching arc, visited in
    dependent order and deduplicated by position; the ROOT filter emits
    the head-0 token alone. The cap exists because snippets can outgrow
    the original input.
    """
    if max_tokens < 1:
        raise FilterError("max_tokens must be >= 1")
    validate_filter(flt, catalog)
    picked: list[str] = []
    if flt.kind == POS_KIND:
        for tok in sentence.tokens:
            if tok.pos == flt.name:
                picked.append(tok.form)
                if len(picked) >= max_tokens:
                    break
    else:
        seen: set[int] = set()
        for i, tok in enumerate(sentence.tokens):
            if flt.name == "ROOT":
                matched = tok.head == 0
                pair = (i,)
            else:
                matched = tok.deprel == flt.name
                # (dependent, head); a head of 0 has no surface token
                pair = (i,) if tok.head == 0 else (i, tok.head - 1)
            if not matched:
                continue
            for pos in pair:
                if pos in seen or len(picked) >= max_tokens:
                    continue
                seen.add(pos)
                picked.append(sentence.tokens[pos].form)
            if len(picked) >= max_tokens:
                break
    return DepSnippet(tokens=tuple(picked), source_filter=flt)


@dataclass(frozen=True)
class FilterResult:
    filter: Filter
    mean_accuracy: Optional[float]
    variance: Optional[float]
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def grid_search(
    candidates: Sequence[Filter],
    config: "ExperimentConfig",
    task_data: Optional["TaskData"] = None,
) -> list[FilterResult]:
    """Evaluate each candidate filter with the full harness protocol and
    rank by mean accuracy (ties: lower variance, then catalog order).

    A failing candidate is recorded, not fatal; failures sort last.
    """
    from . import harness  # deferred: harness renders with these filters

    if not candidates:
        raise FilterError("no candidate filters to search")
    results: list[FilterResult] = []
    for flt in candidates:
        cell_config = harness.with_filter(config, flt)
        try:
            report = harness.run_experiment(cell_config, task_data=task_data)
            results.append(FilterResult(flt, report.mean, report.variance))
        except Exception as exc:  # noqa: BLE001 - sweep is a batch job
            logger.warning("filter %s failed: %s", flt, exc)
            results.append(FilterResult(flt, None, None, error=str(exc)))
    order = {id(r): i for i, r in enumerate(results)}
    return sorted(
        results,
        key=lambda r: (
            r.failed,
            -(r.mean_accuracy if r.mean_accuracy is not None else 0.0),
            r.variance if r.variance is not None else 0.0,
            order[id(r)],
        ),
    )
