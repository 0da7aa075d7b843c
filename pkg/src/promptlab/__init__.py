"""promptlab: cloze-prompt construction, trainable multi-token
verbalizers, and a K-shot evaluation harness with a built-in toy
masked LM."""

__version__ = "0.1.0"
