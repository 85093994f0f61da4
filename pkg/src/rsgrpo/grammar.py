"""Token vocabulary with reserved tag ids, and the tagged-trajectory grammar.

A trajectory is a flat sequence of token ids. Single reserved ids act as the
opening and closing tags of four scopes; everything else is content. The
canonical layout is::

    <observe> ... </observe> (<evidence> ... </evidence>) x k <think> ... </think> <answer> ... </answer>

The think-answer layout drops the observe and evidence scopes entirely and is
used by the ``think-then-answer`` training mode.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

N_RESERVED = 13


@dataclass(frozen=True)
class Vocabulary:
    """Integer vocabulary. Ids below ``N_RESERVED`` are reserved."""

    size: int = 45
    observe_open: int = 0
    observe_close: int = 1
    evidence_open: int = 2
    evidence_close: int = 3
    think_open: int = 4
    think_close: int = 5
    answer_open: int = 6
    answer_close: int = 7
    no_info: int = 8
    insufficient: int = 9
    doc_sep: int = 10
    hop1: int = 11
    hop2: int = 12

    def __post_init__(self) -> None:
        reserved = self.reserved_ids
        if len(set(reserved)) != len(reserved):
            raise ValueError("reserved token ids must be distinct")
        if max(reserved) >= self.size or min(reserved) < 0:
            raise ValueError(f"reserved ids must lie in [0, {self.size})")
        if self.size - len(reserved) < 1:
            raise ValueError("vocabulary has no content symbols")

    @property
    def tag_ids(self) -> tuple[int, ...]:
        return (
            self.observe_open, self.observe_close,
            self.evidence_open, self.evidence_close,
            self.think_open, self.think_close,
            self.answer_open, self.answer_close,
        )

    @property
    def reserved_ids(self) -> tuple[int, ...]:
        return self.tag_ids + (self.no_info, self.insufficient, self.doc_sep, self.hop1, self.hop2)

    @property
    def symbols(self) -> tuple[int, ...]:
        """Ids usable as keys, values and distractors in documents."""
        reserved = set(self.reserved_ids)
        return tuple(i for i in range(self.size) if i not in reserved)

    def is_tag(self, token: int) -> bool:
        return token in self.tag_ids

    def to_header(self) -> dict:
        return {
            "size": self.size,
            "tags": {
                "observe": [self.observe_open, self.observe_close],
                "evidence": [self.evidence_open, self.evidence_close],
                "think": [self.think_open, self.think_close],
                "answer": [self.answer_open, self.answer_close],
            },
            "no_info": self.no_info,
            "insufficient": self.insufficient,
            "doc_sep": self.doc_sep,
            "hop1": self.hop1,
            "hop2": self.hop2,
        }

    @classmethod
    def from_header(cls, header: dict) -> "Vocabulary":
        tags = header["tags"]
        return cls(
            size=header["size"],
            observe_open=tags["observe"][0], observe_close=tags["observe"][1],
            evidence_open=tags["evidence"][0], evidence_close=tags["evidence"][1],
            think_open=tags["think"][0], think_close=tags["think"][1],
            answer_open=tags["answer"][0], answer_close=tags["answer"][1],
            no_info=header["no_info"], insufficient=header["insufficient"],
            doc_sep=header["doc_sep"], hop1=header["hop1"], hop2=header["hop2"],
        )


class ScopeKind(enum.Enum):
    OBSERVE = "observe"
    EVIDENCE = "evidence"
    THINK = "think"
    ANSWER = "answer"


class Layout(enum.Enum):
    EVIDENCE = "evidence"
    THINK_ANSWER = "think-answer"


@dataclass(frozen=True)
class ScopeId:
    kind: ScopeKind
    doc: int | None = None

    def __post_init__(self) -> None:
        if (self.kind is ScopeKind.EVIDENCE) != (self.doc is not None):
            raise ValueError("document index is required for evidence scopes and only for them")
        if self.doc is not None and self.doc < 1:
            raise ValueError("document indices are 1-based")

    def __str__(self) -> str:
        return f"evidence({self.doc})" if self.doc is not None else self.kind.value


OBSERVE = ScopeId(ScopeKind.OBSERVE)
THINK = ScopeId(ScopeKind.THINK)
ANSWER = ScopeId(ScopeKind.ANSWER)


def evidence(doc: int) -> ScopeId:
    return ScopeId(ScopeKind.EVIDENCE, doc)


@dataclass(frozen=True)
class Span:
    scope: ScopeId
    start: int
    end: int

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class TaggedTrajectory:
    tokens: tuple[int, ...]
    spans: tuple[Span, ...]
    well_formed: bool
    k: int
    layout: Layout = Layout.EVIDENCE

    def __len__(self) -> int:
        return len(self.tokens)

    def content(self, scope: ScopeId) -> tuple[int, ...] | None:
        """Content tokens of ``scope``, or None if the span does not exist."""
        for span in self.spans:
            if span.scope == scope:
                return self.tokens[span.start:span.end]
        return None

    def evidence_contents(self) -> list[tuple[int, ...]]:
        return [self.tokens[s.start:s.end] for s in self.spans if s.scope.kind is ScopeKind.EVIDENCE]

    @property
    def answer(self) -> tuple[int, ...] | None:
        return self.content(ANSWER)


def expected_scopes(k: int, layout: Layout = Layout.EVIDENCE) -> list[ScopeId]:
    if layout is Layout.THINK_ANSWER:
        return [THINK, ANSWER]
    return [OBSERVE] + [evidence(i) for i in range(1, k + 1)] + [THINK, ANSWER]


def _tag_pair(vocab: Vocabulary, kind: ScopeKind) -> tuple[int, int]:
    return {
        ScopeKind.OBSERVE: (vocab.observe_open, vocab.observe_close),
        ScopeKind.EVIDENCE: (vocab.evidence_open, vocab.evidence_close),
        ScopeKind.THINK: (vocab.think_open, vocab.think_close),
        ScopeKind.ANSWER: (vocab.answer_open, vocab.answer_close),
    }[kind]


def _malformed(tokens: Sequence[int], k: int, layout: Layout) -> TaggedTrajectory:
    return TaggedTrajectory(tuple(tokens), (), False, k, layout)


def parse(
    tokens: Sequence[int],
    vocab: Vocabulary,
    k: int,
    layout: Layout = Layout.EVIDENCE,
) -> TaggedTrajectory:
    """Split ``tokens`` into scope spans.

    Never raises on bad input: a sequence that does not match the grammar
    (including empty input and out-of-vocabulary ids) comes back with
    ``well_formed=False`` and no spans.
    """
    tokens = tuple(int(t) for t in tokens)
    if layout is Layout.THINK_ANSWER:
        # no evidence scopes; k is meaningless
        k = 0
    if not tokens or any(t < 0 or t >= vocab.size for t in tokens):
        return _malformed(tokens, k, layout)

    scopes = expected_scopes(k, layout)
    spans: list[Span] = []
    pos = 0
    for scope in scopes:
        open_id, close_id = _tag_pair(vocab, scope.kind)
        if pos >= len(tokens) or tokens[pos] != open_id:
            return _malformed(tokens, k, layout)
        start = pos + 1
        end = start
        while end < len(tokens) and not vocab.is_tag(tokens[end]):
            end += 1
        if end >= len(tokens) or tokens[end] != close_id:
            return _malformed(tokens, k, layout)
        spans.append(Span(scope, start, end))
        pos = end + 1
    if pos != len(tokens):
        return _malformed(tokens, k, layout)
    return TaggedTrajectory(tokens, tuple(spans), True, k, layout)


def build(
    contents: Sequence[Iterable[int]],
    vocab: Vocabulary,
    layout: Layout = Layout.EVIDENCE,
) -> TaggedTrajectory:
    """Assemble a well-formed trajectory from per-scope content, in canonical scope order."""
    k = len(contents) - 3 if layout is Layout.EVIDENCE else 0
    scopes = expected_scopes(k, layout)
    if len(contents) != len(scopes) or k < 0:
        raise ValueError(f"expected {len(scopes)} scope contents for layout {layout.value}")
    tokens: list[int] = []
    spans: list[Span] = []
    for scope, body in zip(scopes, contents):
        body = [int(t) for t in body]
        if any(vocab.is_tag(t) for t in body):
            raise ValueError("tag ids cannot appear as scope content")
        open_id, close_id = _tag_pair(vocab, scope.kind)
        tokens.append(open_id)
        spans.append(Span(scope, len(tokens), len(tokens) + len(body)))
        tokens.extend(body)
        tokens.append(close_id)
    return TaggedTrajectory(tuple(tokens), tuple(spans), True, k, layout)


def serialize(trajectory: TaggedTrajectory, vocab: Vocabulary) -> list[int]:
    if not trajectory.well_formed:
        raise ValueError("cannot serialize a malformed trajectory")
    contents = [trajectory.tokens[s.start:s.end] for s in trajectory.spans]
    return list(build(contents, vocab, trajectory.layout).tokens)


def scope_of(trajectory: TaggedTrajectory, t: int) -> ScopeId | None:
    if not 0 <= t < len(trajectory.tokens):
        raise IndexError(f"position {t} outside trajectory of length {len(trajectory.tokens)}")
    spans = trajectory.spans
    if not spans:
        return None
    i = bisect.bisect_right([s.start for s in spans], t) - 1
    if i >= 0 and spans[i].start <= t < spans[i].end:
        return spans[i].scope
    return None


def scope_kinds(trajectory: TaggedTrajectory) -> list[ScopeKind | None]:
    """Per-token scope kind; None for tag tokens and for every token of a malformed trajectory."""
    out: list[ScopeKind | None] = [None] * len(trajectory.tokens)
    for span in trajectory.spans:
        for t in range(span.start, span.end):
            out[t] = span.scope.kind
    return out


def to_record(trajectory: TaggedTrajectory) -> dict:
    return {"tokens": list(trajectory.tokens), "k": trajectory.k, "layout": trajectory.layout.value}


def from_record(record: dict, vocab: Vocabulary) -> TaggedTrajectory:
    layout = Layout(record.get("layout", Layout.EVIDENCE.value))
    return parse(record["tokens"], vocab, record["k"], layout)
