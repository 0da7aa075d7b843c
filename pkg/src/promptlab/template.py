"""Cloze template notation: parsing and rendering.

Template strings use a star-token notation, e.g.
``*cls**sent_0*_It_was*mask*.*sep+*``. The grammar below is the normative
reference for this artifact:

- ``*cls*``, ``*sep*``, ``*sep+*``: sequence-control markers, dropped at
  parse time (the backend adds its own [CLS]/[SEP]).
- ``*mask*``: the cloze position.
- ``*sent_0*`` / ``*sent_1*``: sentence slots. Prefix/infix hints:
  ``+`` capitalize the first letter, ``l`` lowercase it (wins over ``+``),
  ``-`` strip one trailing punctuation character. Examples:
  ``*+sent_0*``, ``*sent-_0*``, ``*sentl_1*``, ``*+sentl_1*``.
- ``*dep*``: slot for a dependency-filter snippet (at most one).
- ``*od*``, ``*sd*``, ``*td*`` (or ``*meta*`` for all three in order):
  metadata description blocks.
- Anything else between stars is an error. Text outside star tokens is a
  literal; ``_`` decodes to a space.

A template without metadata blocks must contain exactly one ``*mask*``.
With metadata blocks the mask may instead arrive through the task
description text (placeholder ``[MASK]``, case-insensitive); rendering
enforces exactly one mask either way.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

from .corpus import Example
from .lm.tokenizer import TokenizerHandle


class TemplateError(ValueError):
    """Bad template notation or render-time contract violation."""


@dataclass(frozen=True)
class Literal:
    text: str


@dataclass(frozen=True)
class SentenceSlot:
    index: int
    capitalize: bool = False
    lowercase: bool = False
    strip_punct: bool = False


@dataclass(frozen=True)
class MaskSlot:
    pass


@dataclass(frozen=True)
class DepSlot:
    pass


@dataclass(frozen=True)
class MetaBlock:
    kind: str  # "od" | "sd" | "td"


Segment = Union[Literal, SentenceSlot, MaskSlot, DepSlot, MetaBlock]

_SENT_RE = re.compile(r"^(\+?)sent(l?)(-?)_(\d+)$")
_MASK_PLACEHOLDER_RE = re.compile(r"\[mask\]", re.IGNORECASE)
_TRAILING_PUNCT = ".?!,;:"
# no space inserted before these when joining segment surfaces
_CLOSING = ".,:;?!)]}%"


@dataclass(frozen=True)
class Template:
    segments: tuple[Segment, ...]
    source: str

    @property
    def has_dep_slot(self) -> bool:
        return any(isinstance(s, DepSlot) for s in self.segments)

    @property
    def has_meta(self) -> bool:
        return any(isinstance(s, MetaBlock) for s in self.segments)

    @property
    def sentence_indices(self) -> set[int]:
        return {s.index for s in self.segments if isinstance(s, SentenceSlot)}


@dataclass(frozen=True)
class MetaPrompt:
    """Task metadata: object, summary, and task descriptions.

    Any field may be empty (ablations select subsets); the task
    description carries the ``[MASK]`` placeholder when the cloze lives
    inside it.
    """

    od: str = ""
    sd: str = ""
    td: str = ""

    @property
    def parts(self) -> tuple[str, str, str]:
        return (self.od, self.sd, self.td)

    def has_mask(self) -> bool:
        return bool(_MASK_PLACEHOLDER_RE.search(" ".join(self.parts)))


@dataclass(frozen=True)
class RenderedInput:
    token_ids: tuple[int, ...]
    mask_position: int
    truncated: bool


def parse_template(notation: str) -> Template:
    """Parse star-token notation into a Template."""
    if not notation:
        raise TemplateError("empty template notation")
    segments: list[Segment] = []
    pos = 0
    while pos < len(notation):
        if notation[pos] == "*":
            end = notation.find("*", pos + 1)
            if end < 0:
                raise TemplateError(f"unterminated star token at offset {pos}")
            segments.append(_star_token(notation[pos + 1 : end]))
            pos = end + 1
        else:
            nxt = notation.find("*", pos)
            if nxt < 0:
                nxt = len(notation)
            segments.append(Literal(notation[pos:nxt].replace("_", " ")))
            pos = nxt
    flat: list[Segment] = []
    for seg in segments:
        if seg is None:
            continue
        if isinstance(seg, tuple):
            flat.extend(seg)
        else:
            flat.append(seg)
    template = Template(segments=tuple(flat), source=notation)
    _validate(template)
    return template


def _star_token(name: str) -> Optional[Segment | tuple[Segment, ...]]:
    if name in ("cls", "sep", "sep+"):
        return None
    if name == "mask":
        return MaskSlot()
    if name == "dep":
        return DepSlot()
    if name in ("od", "sd", "td"):
        return MetaBlock(name)
    if name == "meta":
        return (MetaBlock("od"), MetaBlock("sd"), MetaBlock("td"))
    m = _SENT_RE.match(name)
    if m:
        plus, ell, dash, idx = m.groups()
        return SentenceSlot(
            index=int(idx),
            capitalize=bool(plus) and not ell,
            lowercase=bool(ell),
            strip_punct=bool(dash),
        )
    raise TemplateError(f"unknown template token *{name}*")


def _validate(template: Template) -> None:
    masks = sum(isinstance(s, MaskSlot) for s in template.segments)
    if masks > 1:
        raise TemplateError("template has multiple *mask* tokens")
    if masks == 0 and not template.has_meta:
        raise TemplateError("template has no *mask* token")
    if sum(isinstance(s, DepSlot) for s in template.segments) > 1:
        raise TemplateError("template has multiple *dep* slots")
    bad = {i for i in template.sentence_indices if i not in (0, 1)}
    if bad:
        raise TemplateError(f"sentence indices out of range: {sorted(bad)}")


def insert_dep_slot(template: Template) -> Template:
    """Place a dependency-snippet slot after the last sentence slot.

    Punctuation immediately following the slot stays in front of the
    snippet; if none follows, a "." literal is inserted so the result has
    the shape ``input. snippet. tail``.
    """
    if template.has_dep_slot:
        return template
    last = max(
        (i for i, s in enumerate(template.segments) if isinstance(s, SentenceSlot)),
        default=None,
    )
    if last is None:
        raise TemplateError("cannot place a dep slot: template has no sentence slot")
    segs = list(template.segments)
    insert_at = last + 1
    if insert_at < len(segs) and isinstance(segs[insert_at], Literal):
        text = segs[insert_at].text
        head = ""
        while text and text[0] in _TRAILING_PUNCT:
            head += text[0]
            text = text[1:]
        if head:
            segs[insert_at : insert_at + 1] = [Literal(head), DepSlot(), Literal(text)]
        else:
            segs[insert_at:insert_at] = [Literal("."), DepSlot()]
    else:
        segs[insert_at:insert_at] = [Literal("."), DepSlot()]
    return Template(segments=tuple(segs), source=template.source + "+*dep*")


def compose_meta(meta: MetaPrompt, parts: Sequence[str]) -> MetaPrompt:
    """Keep only the selected description blocks.

    ``parts`` is a subset of {"od", "sd", "td"}; the empty selection is the
    no-description ablation baseline. If the dropped blocks carried the
    mask placeholder, a bare ``[MASK]`` tail is installed as the task
    description so rendering still has its cloze position.
    """
    parts = [p.lower() for p in parts]
    bad = set(parts) - {"od", "sd", "td"}
    if bad:
        raise TemplateError(f"unknown meta parts: {sorted(bad)}")
    composed = MetaPrompt(
        od=meta.od if "od" in parts else "",
        sd=meta.sd if "sd" in parts else "",
        td=meta.td if "td" in parts else "",
    )
    if meta.has_mask() and not composed.has_mask():
        composed = replace(composed, td="[MASK]")
    return composed


def smart_join(pieces: Sequence[str]) -> str:
    """Concatenate surface pieces, inserting single spaces at word seams.

    A space goes between two pieces unless the left already ends with
    whitespace, the right starts with whitespace, or the right starts
    with closing punctuation.
    """
    out = ""
    for piece in pieces:
        if not piece:
            continue
        if out and not out[-1].isspace() and not piece[0].isspace() and piece[0] not in _CLOSING:
            out += " "
        out += piece
    return out


def _sentence_surface(slot: SentenceSlot, example: Example) -> str:
    if slot.index == 0:
        text = example.sent0
    else:
        if example.sent1 is None:
            raise TemplateError("template uses *sent_1* but the example has no second sentence")
        text = example.sent1
    if slot.strip_punct and text and text[-1] in _TRAILING_PUNCT:
        text = text[:-1]
    if slot.lowercase and text:
        text = text[0].lower() + text[1:]
    elif slot.capitalize and text:
        text = text[0].upper() + text[1:]
    return text


def _dep_tokens(dep) -> list[str]:
    if dep is None:
        return []
    tokens = getattr(dep, "tokens", dep)
    return list(tokens)


def _surface_pieces(
    template: Template,
    example: Example,
    dep=None,
    meta: Optional[MetaPrompt] = None,
    mask_surface: str = "[MASK]",
) -> list[tuple[str, bool]]:
    """(surface, is_sentence_slot) per segment, mask placeholders resolved."""
    if template.has_dep_slot and dep is None:
        raise TemplateError("template has a *dep* slot but no snippet was supplied")
    if dep is not None and not template.has_dep_slot:
        raise TemplateError("snippet supplied but template has no *dep* slot")
    if template.has_meta and meta is None:
        raise TemplateError("template has meta blocks but no MetaPrompt was supplied")
    if meta is not None and not template.has_meta:
        raise TemplateError("MetaPrompt supplied but template has no meta blocks")
    pieces: list[tuple[str, bool]] = []
    for seg in template.segments:
        if isinstance(seg, Literal):
            pieces.append((seg.text, False))
        elif isinstance(seg, SentenceSlot):
            pieces.append((_sentence_surface(seg, example), True))
        elif isinstance(seg, MaskSlot):
            pieces.append((mask_surface, False))
        elif isinstance(seg, DepSlot):
            tokens = _dep_tokens(dep)
            pieces.append((" ".join(tokens) + "." if tokens else "", False))
        elif isinstance(seg, MetaBlock):
            text = getattr(meta, seg.kind)
            pieces.append((_MASK_PLACEHOLDER_RE.sub(mask_surface, text), False))
    return pieces


def render_text(
    template: Template,
    example: Example,
    dep=None,
    meta: Optional[MetaPrompt] = None,
    mask_surface: str = "[MASK]",
) -> str:
    """The assembled surface string, before tokenization."""
    pieces = _surface_pieces(template, example, dep, meta, mask_surface)
    text = smart_join([p for p, _ in pieces])
    if text.count(mask_surface) != 1:
        raise TemplateError(
            f"rendered input must contain exactly one {mask_surface}, got {text.count(mask_surface)}"
        )
    if not text:
        raise TemplateError("rendered input is empty")
    return text


def render(
    template: Template,
    example: Example,
    tokenizer: TokenizerHandle,
    dep=None,
    meta: Optional[MetaPrompt] = None,
    max_len: Optional[int] = None,
) -> RenderedInput:
    """Tokenize a rendered input, locating the mask position.

    Output is ``[CLS] body [SEP]``. If the body exceeds the length budget,
    sentence slots are truncated from the right (longest slot first, one
    token at a time, at least one token kept each) — never the mask or
    the prompt tail.
    """
    pieces = _surface_pieces(template, example, dep, meta, tokenizer.mask_surface)
    rendered = smart_join([p for p, _ in pieces])
    if not rendered:
        raise TemplateError("rendered input is empty")
    if rendered.count(tokenizer.mask_surface) != 1:
        raise TemplateError(
            f"rendered input must contain exactly one {tokenizer.mask_surface}, "
            f"got {rendered.count(tokenizer.mask_surface)}"
        )
    piece_ids = [tokenizer.encode(text) for text, _ in pieces]
    sentence_flags = [is_sent for _, is_sent in pieces]

    truncated = False
    if max_len is not None:
        budget = max_len - 2  # [CLS] and [SEP]
        if budget < 1:
            raise TemplateError(f"max_len {max_len} leaves no room for the input")
        total = sum(len(ids) for ids in piece_ids)
        while total > budget:
            candidates = [
                (len(ids), i)
                for i, (ids, is_sent) in enumerate(zip(piece_ids, sentence_flags))
                if is_sent and len(ids) > 1
            ]
            if not candidates:
                raise TemplateError(
                    f"prompt needs {total} tokens but the budget is {budget}; "
                    "nothing left to truncate"
                )
            _, idx = max(candidates)
            piece_ids[idx] = piece_ids[idx][:-1]
            total -= 1
            truncated = True

    ids = [tokenizer.cls_id]
    for chunk in piece_ids:
        ids.extend(chunk)
    ids.append(tokenizer.sep_id)
    mask_positions = [i for i, t in enumerate(ids) if t == tokenizer.mask_id]
    # by construction: the mask lives in a non-sentence piece and is never cut
    assert len(mask_positions) == 1, "rendered ids must contain exactly one mask"
    return RenderedInput(token_ids=tuple(ids), mask_position=mask_positions[0], truncated=truncated)
