"""Label verbalizers: from single-token mappings to trainable weighted
multi-token heads and their ensembles.

A mapping assigns each label one or more vocabulary tokens. Prediction
gathers the mask-position logits of those tokens; a head turns each
label's gathered logits g_t into a score ``w_t . g_t + b_t``, and a
stabilized softmax over label scores gives the class distribution. An
ensemble averages the distributions of B (mapping, head) members.

Training minimizes mean negative log-likelihood; for ensembles the loss
averages over members as well as examples. Gradients here are exact and
closed-form: with p = softmax(scores) and gold label y,

    dL/dscore_t = p_t - [t == y]
    dL/dw_t     = (p_t - [t == y]) * g_t        dL/db_t = p_t - [t == y]
    dL/dh_v    += (p_t - [t == y]) * w_t[j]     for v = t's j-th token

(accumulated over duplicate tokens), scaled by 1/N over the batch and
1/B over members.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .lm.tokenizer import TokenizerHandle

PROB_FLOOR = 1e-12


class MappingError(ValueError):
    """Inconsistent mapping/head shapes or invalid inputs."""


@dataclass(frozen=True)
class MaskLogits:
    """Vocabulary-sized score vector read off the mask position."""

    values: np.ndarray
    source: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 1:
            raise MappingError("mask logits must be a 1-d vector over the vocabulary")


@dataclass(frozen=True)
class LabelMapping:
    """Per-label vocabulary token ids; n_t may differ across labels."""

    name: str
    token_ids: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if not self.token_ids:
            raise MappingError("mapping has no labels")
        if any(len(ids) < 1 for ids in self.token_ids):
            raise MappingError("every label needs at least one mapping token")

    @property
    def num_labels(self) -> int:
        return len(self.token_ids)

    def n(self, t: int) -> int:
        return len(self.token_ids[t])

    @property
    def single_token(self) -> bool:
        return all(len(ids) == 1 for ids in self.token_ids)

    @classmethod
    def from_words(
        cls, name: str, words_per_label: Sequence[Sequence[str]], tokenizer: TokenizerHandle
    ) -> "LabelMapping":
        """Resolve word lists through the tokenizer.

        A word that tokenizes to several pieces is represented by its
        first piece, with a warning.
        """
        ids: list[tuple[int, ...]] = []
        for words in words_per_label:
            row: list[int] = []
            for word in words:
                pieces = tokenizer.encode(word)
                if not pieces:
                    raise MappingError(f"mapping word {word!r} tokenizes to nothing")
                if len(pieces) > 1:
                    warnings.warn(
                        f"mapping word {word!r} is multi-piece; using its first piece",
                        stacklevel=2,
                    )
                row.append(pieces[0])
            ids.append(tuple(row))
        return cls(name=name, token_ids=tuple(ids))


@dataclass
class MappingHead:
    """Trainable weights over each label's mapping-token logits."""

    weights: list[np.ndarray]  # weights[t] has shape (n_t,)
    biases: np.ndarray  # shape (num_labels,)

    def copy(self) -> "MappingHead":
        return MappingHead([w.copy() for w in self.weights], self.biases.copy())

    def check_shapes(self, mapping: LabelMapping) -> None:
        if len(self.weights) != mapping.num_labels or self.biases.shape != (mapping.num_labels,):
            raise MappingError("head shape does not match the mapping")
        for t, w in enumerate(self.weights):
            if w.shape != (mapping.n(t),):
                raise MappingError(f"label {t}: weight shape {w.shape} != ({mapping.n(t)},)")
        if not all(np.all(np.isfinite(w)) for w in self.weights) or not np.all(np.isfinite(self.biases)):
            raise MappingError("head has non-finite entries")

    @classmethod
    def unit(cls, mapping: LabelMapping) -> "MappingHead":
        """All-ones weights, zero biases: reduces to the unweighted scores."""
        return cls([np.ones(mapping.n(t)) for t in range(mapping.num_labels)], np.zeros(mapping.num_labels))


@dataclass(frozen=True)
class MappingEnsemble:
    members: tuple[tuple[LabelMapping, MappingHead], ...]

    def __post_init__(self) -> None:
        if len(self.members) < 1:
            raise MappingError("ensemble needs at least one member")
        sizes = {m.num_labels for m, _ in self.members}
        if len(sizes) != 1:
            raise MappingError(f"ensemble members disagree on label count: {sorted(sizes)}")

    @property
    def size(self) -> int:
        return len(self.members)


def init_head(mapping: LabelMapping, seed: int) -> MappingHead:
    """Xavier-normal weights per label, zero biases, deterministic in seed.

    Each label's head maps n_t gathered logits to one score, so
    fan_in = n_t and fan_out = 1: entries drawn from N(0, 2 / (n_t + 1)).
    """
    rng = np.random.default_rng(seed)
    weights = [
        rng.normal(0.0, np.sqrt(2.0 / (mapping.n(t) + 1)), size=mapping.n(t))
        for t in range(mapping.num_labels)
    ]
    return MappingHead(weights=weights, biases=np.zeros(mapping.num_labels))


def stable_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores)
    exp = np.exp(shifted)
    return exp / np.sum(exp)


def _gather(logits: MaskLogits, mapping: LabelMapping, t: int) -> np.ndarray:
    ids = np.asarray(mapping.token_ids[t])
    if ids.max() >= logits.values.shape[0] or ids.min() < 0:
        raise MappingError(
            f"mapping {mapping.name!r} label {t}: token id out of vocabulary "
            f"(vocab size {logits.values.shape[0]})"
        )
    return logits.values[ids]


def predict_single(logits: MaskLogits, mapping: LabelMapping) -> np.ndarray:
    """Class distribution from one token per label: softmax of the
    gathered logits."""
    if not mapping.single_token:
        raise MappingError("predict_single requires a single-token mapping")
    if not np.all(np.isfinite(logits.values)):
        raise MappingError("non-finite mask logits")
    scores = np.array([_gather(logits, mapping, t)[0] for t in range(mapping.num_labels)])
    return stable_softmax(scores)


def scores_weighted(logits: MaskLogits, mapping: LabelMapping, head: MappingHead) -> np.ndarray:
    head.check_shapes(mapping)
    return np.array(
        [
            float(head.weights[t] @ _gather(logits, mapping, t)) + head.biases[t]
            for t in range(mapping.num_labels)
        ]
    )


def predict_weighted(logits: MaskLogits, mapping: LabelMapping, head: MappingHead) -> np.ndarray:
    """Class distribution from weighted multi-token scores."""
    if not np.all(np.isfinite(logits.values)):
        raise MappingError("non-finite mask logits")
    return stable_softmax(scores_weighted(logits, mapping, head))


def predict_ensemble(logits: MaskLogits, ensemble: MappingEnsemble) -> np.ndarray:
    """Mean of the member distributions.

    Running mean, so B identical members reproduce one member bitwise.
    """
    mean: np.ndarray | None = None
    for i, (mapping, head) in enumerate(ensemble.members, start=1):
        p = predict_weighted(logits, mapping, head)
        mean = p if mean is None else mean + (p - mean) / i
    return mean


def nll_loss(predictions: Sequence[np.ndarray], gold: Sequence[int]) -> float:
    """Mean negative log-likelihood of the gold labels.

    Probabilities below 1e-12 are clamped, with a numerical warning.
    """
    if len(predictions) == 0:
        raise MappingError("empty batch")
    if len(predictions) != len(gold):
        raise MappingError("predictions and gold labels differ in length")
    total = 0.0
    for p, y in zip(predictions, gold):
        py = float(p[y])
        if py < PROB_FLOOR:
            warnings.warn(
                f"gold probability {py:.3e} clamped to {PROB_FLOOR}", RuntimeWarning, stacklevel=2
            )
            py = PROB_FLOOR
        total -= np.log(py)
    return float(total / len(predictions))


def ensemble_nll_loss(member_predictions: Sequence[Sequence[np.ndarray]], gold: Sequence[int]) -> float:
    """Mean over batch and members of each member's negative log-likelihood."""
    if len(member_predictions) == 0:
        raise MappingError("ensemble loss needs at least one member")
    return float(np.mean([nll_loss(preds, gold) for preds in member_predictions]))


def head_gradients(
    logits_batch: Sequence[MaskLogits],
    mapping: LabelMapping,
    head: MappingHead,
    gold: Sequence[int],
) -> tuple[list[np.ndarray], np.ndarray]:
    """Exact gradients of the mean NLL w.r.t. head weights and biases."""
    if len(logits_batch) == 0:
        raise MappingError("empty batch")
    if len(logits_batch) != len(gold):
        raise MappingError("batch and gold labels differ in length")
    n = len(logits_batch)
    d_w = [np.zeros_like(w) for w in head.weights]
    d_b = np.zeros_like(head.biases)
    for logits, y in zip(logits_batch, gold):
        p = predict_weighted(logits, mapping, head)
        err = p.copy()
        err[y] -= 1.0
        for t in range(mapping.num_labels):
            d_w[t] += err[t] * _gather(logits, mapping, t)
        d_b += err
    for t in range(mapping.num_labels):
        d_w[t] /= n
    d_b /= n
    return d_w, d_b


def ensemble_head_gradients(
    logits_batch: Sequence[MaskLogits],
    ensemble: MappingEnsemble,
    gold: Sequence[int],
) -> list[tuple[list[np.ndarray], np.ndarray]]:
    """Per-member gradients of the ensemble loss (each scaled by 1/B)."""
    grads = []
    b = ensemble.size
    for mapping, head in ensemble.members:
        d_w, d_b = head_gradients(logits_batch, mapping, head, gold)
        grads.append(([w / b for w in d_w], d_b / b))
    return grads


def logit_gradients(
    logits: MaskLogits, mapping: LabelMapping, head: MappingHead, gold: int
) -> np.ndarray:
    """d(-log p(gold))/d(mask logits) for one example: the hook that
    backpropagates the head loss into a trainable LM. Duplicate mapping
    tokens accumulate."""
    p = predict_weighted(logits, mapping, head)
    err = p.copy()
    err[gold] -= 1.0
    grad = np.zeros_like(logits.values)
    for t in range(mapping.num_labels):
        np.add.at(grad, np.asarray(mapping.token_ids[t]), err[t] * head.weights[t])
    return grad


def ensemble_logit_gradients(
    logits: MaskLogits, ensemble: MappingEnsemble, gold: int
) -> np.ndarray:
    """Sum of member logit gradients, each scaled by 1/B."""
    grad = np.zeros_like(logits.values)
    for mapping, head in ensemble.members:
        grad += logit_gradients(logits, mapping, head, gold) / ensemble.size
    return grad
