"""Token grammar for serialized agent trajectories.

A trajectory is an ordered sequence of tagged sections, one per pipeline
stage: intent reconstruction, passage retrieval, fact location, and answer
generation. Each section is framed by a fixed head token and a matching end
token; section bodies carry stage-specific payloads with their own line
formats (search intents, numbered passages, relevance judgments, citations).

Serialization is strict and canonical: one byte layout, ``head\\nbody\\nend\\n``
per section. Parsing is lenient about whitespace between sections but never
repairs structural damage; every rejection carries the offset or line where
the problem sits.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Protocol, Sequence

__all__ = [
    "TokenKind",
    "StepKind",
    "TrajectoryStep",
    "Trajectory",
    "IntentSet",
    "Relevance",
    "LocatorJudgment",
    "CitationList",
    "GrammarError",
    "TrajectoryInvariantError",
    "UnclosedHeadError",
    "MismatchedEndError",
    "OrderViolationError",
    "TrailingGarbageError",
    "EmptyIntentSetError",
    "LocatorSyntaxError",
    "DuplicateJudgmentError",
    "CitationSyntaxError",
    "EmptyRetrievalError",
    "RetrievalSyntaxError",
    "serialize_steps",
    "serialize_trajectory",
    "parse_trajectory",
    "parse_intents",
    "parse_locator_body",
    "format_judgment",
    "parse_citations",
    "retrieval_body",
    "render_retrieval_block",
    "parse_retrieval_body",
    "render_instruction",
    "strip_instruction_end",
    "trajectory_to_dict",
    "trajectory_from_dict",
    "IRRELEVANT_PHRASE",
    "CITE_PREFIX",
]


class TokenKind(Enum):
    """The fixed special strings that skeleton a serialized trajectory."""

    INSTRUCTION_END = "</eoi>"
    RECONSTRUCTOR_HEAD = "<Reconstructor>"
    RECONSTRUCTOR_END = "</eor>"
    RETRIEVAL_HEAD = "<retrieval>"
    RETRIEVAL_END = "</retrieval>"
    LOCATOR_HEAD = "<Locator>"
    LOCATOR_END = "</eol>"
    GENERATOR_HEAD = "<Generator>"
    GENERATOR_END = "</eog>"


class StepKind(Enum):
    """Pipeline stages, in the only order they may appear."""

    RECONSTRUCTOR = "reconstructor"
    RETRIEVAL = "retrieval"
    LOCATOR = "locator"
    GENERATOR = "generator"

    @property
    def rank(self) -> int:
        return _STEP_RANK[self]

    @property
    def head(self) -> TokenKind:
        return _KIND_TO_HEAD[self]

    @property
    def end(self) -> TokenKind:
        return _KIND_TO_END[self]


_STEP_RANK = {
    StepKind.RECONSTRUCTOR: 0,
    StepKind.RETRIEVAL: 1,
    StepKind.LOCATOR: 2,
    StepKind.GENERATOR: 3,
}

_KIND_TO_HEAD = {
    StepKind.RECONSTRUCTOR: TokenKind.RECONSTRUCTOR_HEAD,
    StepKind.RETRIEVAL: TokenKind.RETRIEVAL_HEAD,
    StepKind.LOCATOR: TokenKind.LOCATOR_HEAD,
    StepKind.GENERATOR: TokenKind.GENERATOR_HEAD,
}

_KIND_TO_END = {
    StepKind.RECONSTRUCTOR: TokenKind.RECONSTRUCTOR_END,
    StepKind.RETRIEVAL: TokenKind.RETRIEVAL_END,
    StepKind.LOCATOR: TokenKind.LOCATOR_END,
    StepKind.GENERATOR: TokenKind.GENERATOR_END,
}

_HEAD_TO_KIND = {v: k for k, v in _KIND_TO_HEAD.items()}
_END_TO_KIND = {v: k for k, v in _KIND_TO_END.items()}

_TOKEN_BY_SURFACE = {t.value: t for t in TokenKind}

# Longest-first alternation so overlapping surfaces cannot shadow each other.
_TOKEN_RE = re.compile(
    "|".join(re.escape(t.value) for t in sorted(TokenKind, key=lambda t: -len(t.value)))
)

IRRELEVANT_PHRASE = "Lacking Supporting Facts."
CITE_PREFIX = "[Cite]:"


# ---------------------------------------------------------------------------
# errors


class GrammarError(Exception):
    """Base class for every trajectory-grammar rejection."""


class TrajectoryInvariantError(GrammarError):
    """A trajectory value violates the structural invariants (serialization refused)."""

    def __init__(self, reason: str, step_index: int | None = None) -> None:
        self.reason = reason
        self.step_index = step_index
        where = "" if step_index is None else f" (step {step_index})"
        super().__init__(f"{reason}{where}")


class UnclosedHeadError(GrammarError):
    def __init__(self, kind: StepKind, offset: int) -> None:
        self.kind = kind
        self.offset = offset
        super().__init__(f"{kind.head.value} at offset {offset} is never closed")


class MismatchedEndError(GrammarError):
    def __init__(self, expected: TokenKind, found: TokenKind, offset: int) -> None:
        self.expected = expected
        self.found = found
        self.offset = offset
        super().__init__(
            f"expected {expected.value} but found {found.value} at offset {offset}"
        )


class OrderViolationError(GrammarError):
    def __init__(self, kind: StepKind, offset: int) -> None:
        self.kind = kind
        self.offset = offset
        super().__init__(f"{kind.head.value} at offset {offset} breaks the section order")


class TrailingGarbageError(GrammarError):
    def __init__(self, offset: int) -> None:
        self.offset = offset
        super().__init__(f"unexpected text outside any section at offset {offset}")


class EmptyIntentSetError(GrammarError):
    def __init__(self, message: str = "no search intents remain after parsing") -> None:
        super().__init__(message)


class LocatorSyntaxError(GrammarError):
    def __init__(self, line: int, message: str = "malformed judgment line") -> None:
        self.line = line
        super().__init__(f"{message} (line {line})")


class DuplicateJudgmentError(GrammarError):
    def __init__(self, passage_index: int) -> None:
        self.passage_index = passage_index
        super().__init__(f"passage index {passage_index} judged more than once")


class CitationSyntaxError(GrammarError):
    pass


class EmptyRetrievalError(GrammarError):
    def __init__(self) -> None:
        super().__init__("a retrieval block must contain at least one passage")


class RetrievalSyntaxError(GrammarError):
    def __init__(self, line: int, message: str = "malformed retrieval entry") -> None:
        self.line = line
        super().__init__(f"{message} (line {line})")


# ---------------------------------------------------------------------------
# core values


@dataclass(frozen=True)
class TrajectoryStep:
    """One tagged section: its stage and the text between head and end token."""

    kind: StepKind
    body: str


@dataclass(frozen=True)
class Trajectory:
    """An ordered tuple of steps. Completeness is checked at serialization time."""

    steps: tuple[TrajectoryStep, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))


@dataclass(frozen=True)
class IntentSet:
    """Ordered, non-empty search intents produced by the reconstruction stage."""

    intents: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "intents", tuple(self.intents))
        if not self.intents:
            raise EmptyIntentSetError()
        for item in self.intents:
            if not item.strip():
                raise EmptyIntentSetError("an intent is blank after trimming")

    @property
    def m(self) -> int:
        return len(self.intents)


class Relevance(Enum):
    RELEVANT = "Relevant"
    IRRELEVANT = "Irrelevant"


@dataclass(frozen=True)
class LocatorJudgment:
    """Per-passage relevance call; a fact is present exactly when relevant."""

    passage_index: int
    relevance: Relevance
    fact: str | None = None

    def __post_init__(self) -> None:
        if self.passage_index < 1:
            raise ValueError("passage indices are 1-based")
        has_fact = self.fact is not None and self.fact.strip() != ""
        if (self.relevance is Relevance.RELEVANT) != has_fact:
            raise ValueError("a judgment carries a fact iff it is Relevant")


@dataclass(frozen=True)
class CitationList:
    """Strictly increasing, 1-based passage indices cited by the answer."""

    indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "indices", tuple(self.indices))
        prev = 0
        for i in self.indices:
            if i <= prev:
                raise ValueError("citation indices must be strictly increasing and positive")
            prev = i

    def render(self) -> str:
        if not self.indices:
            return ""
        return CITE_PREFIX + " " + " ".join(f"[{i}]" for i in self.indices)


class TitledText(Protocol):
    """Anything with a title and a text, e.g. a corpus passage."""

    title: str
    text: str


# ---------------------------------------------------------------------------
# serialization


def _step_violation(step: TrajectoryStep) -> str | None:
    for token in TokenKind:
        if token.value in step.body:
            return f"body of {step.kind.value} step contains the token {token.value}"
    return None


def serialize_steps(steps: Sequence[TrajectoryStep]) -> str:
    """Serialize a (possibly incomplete) step sequence to the canonical layout.

    Order and body cleanliness are enforced; a final generator step is not,
    so this can render the prefix of a trajectory still being built.
    """
    last_rank = -1
    for i, step in enumerate(steps):
        if step.kind.rank <= last_rank:
            raise TrajectoryInvariantError(
                f"step kinds must be strictly ordered, {step.kind.value} repeats or regresses",
                step_index=i,
            )
        last_rank = step.kind.rank
        problem = _step_violation(step)
        if problem:
            raise TrajectoryInvariantError(problem, step_index=i)
    return "".join(
        f"{s.kind.head.value}\n{s.body}\n{s.kind.end.value}\n" for s in steps
    )


def serialize_trajectory(trajectory: Trajectory) -> str:
    """Serialize a complete trajectory; the generator section is mandatory."""
    if not any(s.kind is StepKind.GENERATOR for s in trajectory.steps):
        raise TrajectoryInvariantError("generator step is mandatory")
    return serialize_steps(trajectory.steps)


def parse_trajectory(text: str) -> Trajectory:
    """Parse a serialized token stream back into steps.

    Bodies are the exact interior text with one leading and one trailing
    newline stripped, so parse is the inverse of serialize. Whitespace
    between sections is tolerated; any other stray text is rejected with
    its offset.
    """
    steps: list[TrajectoryStep] = []
    last_rank = -1
    pos = 0
    n = len(text)
    while True:
        match = _TOKEN_RE.search(text, pos)
        if match is None:
            rest = text[pos:]
            if rest.strip():
                raise TrailingGarbageError(pos + (len(rest) - len(rest.lstrip())))
            break
        gap = text[pos : match.start()]
        if gap.strip():
            raise TrailingGarbageError(pos + (len(gap) - len(gap.lstrip())))
        token = _TOKEN_BY_SURFACE[match.group(0)]
        if token not in _HEAD_TO_KIND:
            # An end token (or the instruction terminator) with no open section.
            raise TrailingGarbageError(match.start())
        kind = _HEAD_TO_KIND[token]
        if kind.rank <= last_rank:
            raise OrderViolationError(kind, match.start())
        closer = _TOKEN_RE.search(text, match.end())
        if closer is None:
            raise UnclosedHeadError(kind, match.start())
        closing_token = _TOKEN_BY_SURFACE[closer.group(0)]
        if closing_token is not kind.end:
            raise MismatchedEndError(kind.end, closing_token, closer.start())
        interior = text[match.end() : closer.start()]
        if interior.startswith("\n"):
            interior = interior[1:]
        if interior.endswith("\n"):
            interior = interior[:-1]
        steps.append(TrajectoryStep(kind, interior))
        last_rank = kind.rank
        pos = closer.end()
        if pos >= n:
            break
    return Trajectory(tuple(steps))


# ---------------------------------------------------------------------------
# section-body formats


_SEARCH_WRAPPER_RE = re.compile(r"^Search\((.*)\)$", re.DOTALL)


def _unwrap_search(text: str) -> str:
    text = text.strip()
    match = _SEARCH_WRAPPER_RE.match(text)
    if match:
        return match.group(1).strip()
    return text


def parse_intents(body: str) -> IntentSet:
    """Split a reconstruction body into individual search intents.

    Each semicolon-separated item may carry its own ``Search(...)`` wrapper;
    when none does, a single wrapper around the whole body is stripped
    instead, so both ``Search(a; b)`` and ``Search(a); Search(b)`` yield the
    same two intents. Blank items are dropped.
    """
    unwrapped_any = False
    intents: list[str] = []
    for raw in body.split(";"):
        item = raw.strip()
        match = _SEARCH_WRAPPER_RE.match(item)
        if match:
            unwrapped_any = True
            item = match.group(1).strip()
        if item:
            intents.append(item)
    if not unwrapped_any:
        whole = _SEARCH_WRAPPER_RE.match(body.strip())
        if whole:
            intents = []
            for raw in whole.group(1).split(";"):
                item = _unwrap_search(raw)
                if item:
                    intents.append(item)
    if not intents:
        raise EmptyIntentSetError()
    return IntentSet(tuple(intents))


_JUDGMENT_RE = re.compile(r"^\s*-?\s*\[(Relevant|Irrelevant)\]\s*:\s*\[(\d+)\]\s*(.*?)\s*$")

_IRRELEVANT_ACCEPTED = ("", "Lacking Supporting Facts", IRRELEVANT_PHRASE)


def parse_locator_body(body: str) -> list[LocatorJudgment]:
    """Parse judgment lines of the form ``[Relevant]: [n] fact``.

    Indices must be unique but need not be contiguous. An Irrelevant line
    carries the fixed no-facts phrase (period optional) or nothing at all.
    """
    judgments: list[LocatorJudgment] = []
    seen: set[int] = set()
    for lineno, line in enumerate(body.splitlines(), start=1):
        if not line.strip():
            continue
        match = _JUDGMENT_RE.match(line)
        if match is None:
            raise LocatorSyntaxError(lineno)
        tag, index_text, rest = match.groups()
        index = int(index_text)
        if index < 1:
            raise LocatorSyntaxError(lineno, "passage indices are 1-based")
        if index in seen:
            raise DuplicateJudgmentError(index)
        seen.add(index)
        if tag == "Relevant":
            if not rest:
                raise LocatorSyntaxError(lineno, "a Relevant judgment must carry a fact")
            judgments.append(LocatorJudgment(index, Relevance.RELEVANT, rest))
        else:
            if rest not in _IRRELEVANT_ACCEPTED:
                raise LocatorSyntaxError(
                    lineno, "an Irrelevant judgment must not carry a fact"
                )
            judgments.append(LocatorJudgment(index, Relevance.IRRELEVANT, None))
    return judgments


def format_judgment(judgment: LocatorJudgment) -> str:
    if judgment.relevance is Relevance.RELEVANT:
        return f"[Relevant]: [{judgment.passage_index}] {judgment.fact}"
    return f"[Irrelevant]: [{judgment.passage_index}] {IRRELEVANT_PHRASE}"


_CITE_TOKEN_RE = re.compile(r"\[(\d+)\]")


def parse_citations(body: str) -> tuple[str, CitationList]:
    """Split a generator body into the answer and its citation list.

    The citation marker may sit on its own final line or inline after the
    answer; everything after the last ``[Cite]:`` must be bracketed indices.
    A body without the marker has no citations.
    """
    pos = body.rfind(CITE_PREFIX)
    if pos == -1:
        return body, CitationList()
    tail = body[pos + len(CITE_PREFIX) :]
    tokens = tail.split()
    if not tokens:
        raise CitationSyntaxError("no indices follow the citation marker")
    indices: list[int] = []
    for token in tokens:
        match = _CITE_TOKEN_RE.fullmatch(token)
        if match is None:
            raise CitationSyntaxError(f"bad citation token {token!r}")
        indices.append(int(match.group(1)))
    try:
        citations = CitationList(tuple(indices))
    except ValueError as exc:
        raise CitationSyntaxError(str(exc)) from exc
    return body[:pos].rstrip(), citations


def retrieval_body(passages: Sequence[TitledText]) -> str:
    """Render the interior of a retrieval section: one numbered entry per passage."""
    return "\n".join(
        f"[{i}] {p.title} -{p.text}" for i, p in enumerate(passages, start=1)
    )


def render_retrieval_block(passages: Sequence[TitledText]) -> str:
    """Render a full retrieval section, head and end tokens included."""
    if not passages:
        raise EmptyRetrievalError()
    head = TokenKind.RETRIEVAL_HEAD.value
    end = TokenKind.RETRIEVAL_END.value
    return f"{head}\n{retrieval_body(passages)}\n{end}\n"


_RETRIEVAL_ENTRY_RE = re.compile(r"^\[(\d+)\] (.*?) -(.*)$")


def parse_retrieval_body(body: str) -> list[tuple[str, str]]:
    """Recover (title, text) pairs from a retrieval section interior.

    Entries must be numbered 1..n in order. Titles containing the literal
    separator `` -`` will not survive the split; corpus titles are
    whitespace-normalized single lines and do not use it.
    """
    entries: list[tuple[str, str]] = []
    for lineno, line in enumerate(body.splitlines(), start=1):
        match = _RETRIEVAL_ENTRY_RE.match(line)
        if match is None:
            raise RetrievalSyntaxError(lineno)
        number = int(match.group(1))
        if number != len(entries) + 1:
            raise RetrievalSyntaxError(lineno, f"entry numbered {number}, expected {len(entries) + 1}")
        entries.append((match.group(2), match.group(3)))
    if not entries:
        raise EmptyRetrievalError()
    return entries


# ---------------------------------------------------------------------------
# instruction framing and JSON mirror


def render_instruction(instruction: str) -> str:
    """Frame an instruction for the start of a prompt or training input."""
    return f"{instruction}{TokenKind.INSTRUCTION_END.value}\n"


def strip_instruction_end(text: str) -> str:
    """Drop one trailing instruction terminator, if present."""
    stripped = text.rstrip()
    if stripped.endswith(TokenKind.INSTRUCTION_END.value):
        return stripped[: -len(TokenKind.INSTRUCTION_END.value)].rstrip()
    return text


def trajectory_to_dict(trajectory: Trajectory) -> dict:
    return {"steps": [{"kind": s.kind.value, "body": s.body} for s in trajectory.steps]}


def trajectory_from_dict(data: dict) -> Trajectory:
    steps = tuple(
        TrajectoryStep(StepKind(entry["kind"]), entry["body"])
        for entry in data["steps"]
    )
    return Trajectory(steps)
