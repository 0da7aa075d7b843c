"""Word-level tokenizer with a fixed special-token set.

Deliberately not BPE: words stay whole, so dependency annotations align
1:1 with tokens and verbalizer words are single vocabulary pieces.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)

# peeled off word edges as standalone tokens; brackets stay attached so
# special-token literals survive
_PUNCT = ".,:;?!'\""


def split_text(text: str) -> list[str]:
    """Whitespace split, then peel leading/trailing punctuation."""
    out: list[str] = []
    for chunk in text.split():
        out.extend(_split_chunk(chunk))
    return out


def _split_chunk(chunk: str) -> list[str]:
    if not chunk:
        return []
    if chunk in SPECIALS:
        return [chunk]
    if chunk[0] in _PUNCT:
        return [chunk[0]] + _split_chunk(chunk[1:])
    if chunk[-1] in _PUNCT:
        return _split_chunk(chunk[:-1]) + [chunk[-1]]
    return [chunk]


class TokenizerHandle:
    """Maps between surface tokens and vocabulary ids.

    In-vocabulary tokens round-trip id -> string -> id; unknown tokens map
    to the [UNK] id and never raise.
    """

    def __init__(self, tokens: Sequence[str], lowercase: bool = True):
        for i, special in enumerate(SPECIALS):
            if i >= len(tokens) or tokens[i] != special:
                raise ValueError(f"vocabulary must start with the special tokens {SPECIALS}")
        self.lowercase = lowercase
        self._tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")

    pad_id = property(lambda self: 0)
    unk_id = property(lambda self: 1)
    cls_id = property(lambda self: 2)
    sep_id = property(lambda self: 3)
    mask_id = property(lambda self: 4)
    mask_surface = property(lambda self: MASK)

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def vocab(self) -> list[str]:
        return list(self._tokens)

    def normalize(self, token: str) -> str:
        if token in SPECIALS or not self.lowercase:
            return token
        return token.lower()

    def token_to_id(self, token: str) -> int:
        return self._ids.get(self.normalize(token), self.unk_id)

    def id_to_token(self, idx: int) -> str:
        return self._tokens[idx]

    def tokenize(self, text: str) -> list[str]:
        return [self.normalize(t) for t in split_text(text)]

    def encode(self, text: str) -> list[int]:
        """Token ids for a text; no [CLS]/[SEP] added here."""
        return [self._ids.get(tok, self.unk_id) for tok in self.tokenize(text)]

    @classmethod
    def build(cls, texts: Iterable[str], lowercase: bool = True, extra_tokens: Iterable[str] = ()) -> "TokenizerHandle":
        """Vocabulary from a corpus: specials first, then sorted unique words."""
        seen: set[str] = set()
        for text in texts:
            for tok in split_text(text):
                if tok not in SPECIALS:
                    seen.add(tok.lower() if lowercase else tok)
        for tok in extra_tokens:
            if tok not in SPECIALS:
                seen.add(tok.lower() if lowercase else tok)
        return cls(list(SPECIALS) + sorted(seen), lowercase=lowercase)

    @classmethod
    def from_vocab_file(cls, path: str | Path, lowercase: bool = True) -> "TokenizerHandle":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tokens, lowercase=lowercase)

    def to_vocab_file(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self._tokens) + "\n", encoding="utf-8")
