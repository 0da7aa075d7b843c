"""Masked-LM backends: the shared contract, a word-level tokenizer, the
built-in trainable model, and the remote scoring client."""

from .base import LmBackend, UnsupportedOperationError
from .tiny import TinyMlm, TinyMlmConfig
from .tokenizer import TokenizerHandle

__all__ = [
    "LmBackend",
    "UnsupportedOperationError",
    "TinyMlm",
    "TinyMlmConfig",
    "TokenizerHandle",
]
