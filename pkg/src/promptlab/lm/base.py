"""Masked-LM backend contract shared by the built-in model and the
remote scoring client."""

from __future__ import annotations

import abc
from typing import TYPE_CHECKING

from ..mapping import MaskLogits

if TYPE_CHECKING:
    from ..template import RenderedInput


class UnsupportedOperationError(RuntimeError):
    """The backend cannot perform the requested operation."""


class LmBackend(abc.ABC):
    """Produces mask-position logits over a fixed vocabulary.

    ``score`` must return finite logits of vocabulary length and be
    deterministic given fixed parameters (eval mode). Backends that can
    train override ``train_step`` and report ``trainable = True``.
    """

    vocab_size: int
    max_len: int
    mask_id: int

    @property
    def trainable(self) -> bool:
        return False

    @abc.abstractmethod
    def score(self, rendered: "RenderedInput") -> MaskLogits:
        raise NotImplementedError

    def train_step(self, batch, mask_logit_grads, lr, losses=None) -> float:
        raise UnsupportedOperationError(f"{type(self).__name__} does not support training")
