"""Training-example construction with character-level loss masks.

Two families of examples share one wire format. A long example is a full
four-section trajectory whose loss spans cover the reconstruction, location,
and generation sections (head through end token) while the retrieval block
stays unsupervised. A short example isolates one stage: its input replays
the stage's inference prompt and its whole output is supervised.

Relevance judgments and search intents come from a critic. The rule-based
critic is a deterministic oracle (the instruction is the intent; a passage
is relevant iff it contains the gold answer, the containing sentence being
the fact); the HTTP critic delegates both calls to a chat-completion
service. Either way, every extracted fact must literally appear in its
passage or the build fails.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

from .backends import BackendConfig, chat_completion
from .corpus import CorpusIndex, Passage, retrieve_multi
from .grammar import (
    CitationList,
    EmptyIntentSetError,
    EmptyRetrievalError,
    GrammarError,
    IntentSet,
    LocatorJudgment,
    Relevance,
    StepKind,
    TokenKind,
    Trajectory,
    TrajectoryStep,
    format_judgment,
    parse_citations,
    parse_intents,
    parse_locator_body,
    parse_trajectory,
    render_instruction,
    render_retrieval_block,
    retrieval_body,
    serialize_trajectory,
)

__all__ = [
    "DatasetError",
    "InvalidDialogueError",
    "FactContainmentError",
    "NoRelevantFactsError",
    "CriticResponseError",
    "TaskTag",
    "RawExample",
    "ExampleKind",
    "TrainingExample",
    "Critic",
    "RuleBasedCritic",
    "HttpCritic",
    "DatasetManifest",
    "normalize_dialogue",
    "build_long_example",
    "build_short_intent",
    "build_short_locator",
    "build_short_generator",
    "check_training_example",
    "check_example_dict",
    "emit_dataset",
    "read_raw_examples",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1


class DatasetError(Exception):
    pass


class InvalidDialogueError(DatasetError):
    pass


class FactContainmentError(DatasetError):
    def __init__(self, passage_index: int) -> None:
        self.passage_index = passage_index
        super().__init__(
            f"extracted fact for passage {passage_index} does not appear in the passage"
        )


class NoRelevantFactsError(DatasetError):
    def __init__(self) -> None:
        super().__init__("a fact-conditioned example needs at least one Relevant judgment")


class CriticResponseError(DatasetError):
    pass


class TaskTag(Enum):
    FACT_VERIFICATION = "fact-verification"
    DIALOGUE = "dialogue"
    OPEN_QA = "open-qa"
    COMMONSENSE = "commonsense"
    GENERAL = "general"


@dataclass(frozen=True)
class RawExample:
    """One source record: instruction x, gold answer y, optional dialogue turns."""

    task: TaskTag
    x: str
    y: str
    history: tuple[tuple[str, str], ...] | None = None
    source: str = ""

    def __post_init__(self) -> None:
        if self.history is not None:
            object.__setattr__(self, "history", tuple(tuple(turn) for turn in self.history))
        if not self.y.strip():
            raise ValueError("gold answer must be non-empty")
        if self.task is not TaskTag.DIALOGUE:
            if not self.x.strip():
                raise ValueError("instruction must be non-empty")
            if self.history is not None:
                raise ValueError("history is only meaningful for dialogue records")


def normalize_dialogue(raw: RawExample) -> RawExample:
    """Flatten dialogue history into the instruction.

    Prior turns become alternating question and ``-answer`` lines, followed
    by the current question; the gold answer stays the final-turn answer.
    """
    if raw.task is not TaskTag.DIALOGUE:
        raise ValueError("only dialogue records need flattening")
    if not raw.history and not raw.x.strip():
        raise InvalidDialogueError("a dialogue record needs history or a current question")
    turns = "".join(f"{q}\n-{a}\n" for q, a in raw.history or ())
    return replace(raw, x=turns + raw.x, history=None)


def _ensure_flat(raw: RawExample) -> RawExample:
    if raw.task is TaskTag.DIALOGUE and raw.history is not None:
        return normalize_dialogue(raw)
    if not raw.x.strip():
        raise InvalidDialogueError("instruction is empty")
    return raw


# ---------------------------------------------------------------------------
# critics


class Critic(Protocol):
    def propose_intents(self, x: str, task: TaskTag) -> IntentSet: ...

    def judge_passage(
        self, x: str, y: str, passage: Passage, index: int = 0
    ) -> LocatorJudgment: ...


def _collapse(text: str) -> str:
    return " ".join(text.split())


_SENTENCE_BREAK_RE = re.compile(r"(?<=[.?!])\s+")


def _containing_sentence(text: str, position: int) -> str:
    start = 0
    for match in _SENTENCE_BREAK_RE.finditer(text):
        if position < match.start():
            return text[start : match.start()]
        start = match.end()
    return text[start:]


class RuleBasedCritic:
    """Deterministic critic for tests and offline builds.

    The whitespace-collapsed instruction is the single search intent
    (semicolons replaced so the intent list round-trips). A passage is
    Relevant iff the gold answer occurs in it case-insensitively, and the
    extracted fact is the sentence containing the first occurrence.
    """

    def propose_intents(self, x: str, task: TaskTag) -> IntentSet:
        intent = _collapse(x).replace(";", ",")
        if not intent:
            raise EmptyIntentSetError("instruction collapses to nothing")
        return IntentSet((intent,))

    def judge_passage(
        self, x: str, y: str, passage: Passage, index: int = 0
    ) -> LocatorJudgment:
        text = _collapse(passage.text)
        needle = _collapse(y).casefold()
        position = text.casefold().find(needle) if needle else -1
        if position == -1:
            return LocatorJudgment(max(index, 1), Relevance.IRRELEVANT, None)
        fact = _containing_sentence(text, position).strip()
        return LocatorJudgment(max(index, 1), Relevance.RELEVANT, fact)


_RATING_RE = re.compile(r"\[(Relevant|Irrelevant)\]")


class HttpCritic:
    """Critic that asks a chat-completion service for intents and judgments."""

    INTENT_PROMPT = (
        "Decompose the instruction below into the web search queries needed to "
        "answer it. Reply with a single line of the form "
        "Search Intent: query one; query two\n\nInstruction: {x}\n"
    )
    JUDGE_PROMPT = (
        "Decide whether the passage supports the expected answer to the "
        "instruction. Reply with a line Rating: [Relevant] or Rating: "
        "[Irrelevant]. If relevant, add a line Extracted span: followed by the "
        "exact sentence from the passage that supports the answer.\n\n"
        "Instruction: {x}\nExpected answer: {y}\nPassage: {p}\n"
    )

    def __init__(self, config: BackendConfig) -> None:
        self._config = config

    def propose_intents(self, x: str, task: TaskTag) -> IntentSet:
        content, _reason = chat_completion(self._config, self.INTENT_PROMPT.format(x=x))
        for line in content.splitlines():
            if line.strip().startswith("Search Intent:"):
                return parse_intents(line.split(":", 1)[1])
        raise CriticResponseError("no Search Intent line in critic reply")

    def judge_passage(
        self, x: str, y: str, passage: Passage, index: int = 0
    ) -> LocatorJudgment:
        prompt = self.JUDGE_PROMPT.format(x=x, y=y, p=f"{passage.title} -{passage.text}")
        content, _reason = chat_completion(self._config, prompt)
        rating = _RATING_RE.search(content)
        if rating is None:
            raise CriticResponseError("no Rating in critic reply")
        if rating.group(1) == "Irrelevant":
            return LocatorJudgment(max(index, 1), Relevance.IRRELEVANT, None)
        for line in content.splitlines():
            if line.strip().startswith("Extracted span:"):
                span = line.split(":", 1)[1].strip()
                if span:
                    return LocatorJudgment(max(index, 1), Relevance.RELEVANT, span)
        raise CriticResponseError("Relevant rating without an extracted span")


# ---------------------------------------------------------------------------
# training examples


class ExampleKind(Enum):
    LONG = "long"
    SHORT_INTENT = "short-intent"
    SHORT_LOCATOR = "short-locator"
    SHORT_GENERATOR_PLAIN = "short-generator-plain"
    SHORT_GENERATOR_FACTS = "short-generator-facts"


@dataclass(frozen=True)
class TrainingExample:
    """Input/output pair with half-open [start, end) loss spans over the output."""

    kind: ExampleKind
    input: str
    output: str
    loss_spans: tuple[tuple[int, int], ...]
    source: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "loss_spans", tuple((int(a), int(b)) for a, b in self.loss_spans)
        )
        previous_end = 0
        for start, end in self.loss_spans:
            if start < previous_end or end <= start or end > len(self.output):
                raise ValueError("loss spans must be sorted, disjoint, and in bounds")
            previous_end = end


def _judge_all(
    x: str, y: str, passages: Sequence[Passage], critic: Critic
) -> list[LocatorJudgment]:
    judgments = []
    for position, passage in enumerate(passages, start=1):
        judgment = critic.judge_passage(x, y, passage, position)
        if judgment.passage_index != position:
            judgment = replace(judgment, passage_index=position)
        if judgment.relevance is Relevance.RELEVANT:
            assert judgment.fact is not None
            if _collapse(judgment.fact) not in _collapse(passage.text):
                raise FactContainmentError(position)
        judgments.append(judgment)
    return judgments


def _intent_body(intents: IntentSet) -> str:
    return f"Search({'; '.join(intents.intents)})"


def _generator_body(y: str, relevant_indices: Sequence[int]) -> str:
    if not relevant_indices:
        return y
    return f"{y}\n{CitationList(tuple(relevant_indices)).render()}"


def build_long_example(
    raw: RawExample, critic: Critic, index: CorpusIndex, k: int = 3
) -> TrainingExample:
    """Build a full-trajectory example; supervision skips the retrieval block."""
    raw = _ensure_flat(raw)
    intents = critic.propose_intents(raw.x, raw.task)
    passages = retrieve_multi(index, intents, k)
    if not passages:
        raise EmptyRetrievalError()
    judgments = _judge_all(raw.x, raw.y, passages, critic)
    relevant = [j.passage_index for j in judgments if j.relevance is Relevance.RELEVANT]
    steps = (
        TrajectoryStep(StepKind.RECONSTRUCTOR, _intent_body(intents)),
        TrajectoryStep(StepKind.RETRIEVAL, retrieval_body(passages)),
        TrajectoryStep(StepKind.LOCATOR, "\n".join(format_judgment(j) for j in judgments)),
        TrajectoryStep(StepKind.GENERATOR, _generator_body(raw.y, relevant)),
    )
    output = serialize_trajectory(Trajectory(steps))
    sections = [f"{s.kind.head.value}\n{s.body}\n{s.kind.end.value}\n" for s in steps]
    spans = []
    offset = 0
    for step, section in zip(steps, sections):
        if step.kind is not StepKind.RETRIEVAL:
            # Head through end token; the newline after the end token stays free.
            spans.append((offset, offset + len(section) - 1))
        offset += len(section)
    return TrainingExample(
        kind=ExampleKind.LONG,
        input=render_instruction(raw.x),
        output=output,
        loss_spans=tuple(spans),
        source=raw.source or raw.task.value,
    )


def build_short_intent(raw: RawExample, critic: Critic) -> TrainingExample:
    raw = _ensure_flat(raw)
    intents = critic.propose_intents(raw.x, raw.task)
    output = _intent_body(intents) + TokenKind.RECONSTRUCTOR_END.value
    return TrainingExample(
        kind=ExampleKind.SHORT_INTENT,
        input=render_instruction(raw.x) + TokenKind.RECONSTRUCTOR_HEAD.value + "\n",
        output=output,
        loss_spans=((0, len(output)),),
        source=raw.source or raw.task.value,
    )


def build_short_locator(
    raw: RawExample, passages: Sequence[Passage], critic: Critic
) -> TrainingExample:
    raw = _ensure_flat(raw)
    if not passages:
        raise EmptyRetrievalError()
    judgments = _judge_all(raw.x, raw.y, passages, critic)
    output = "\n".join(format_judgment(j) for j in judgments) + TokenKind.LOCATOR_END.value
    input_text = (
        render_instruction(raw.x)
        + render_retrieval_block(passages)
        + TokenKind.LOCATOR_HEAD.value
        + "\n"
    )
    return TrainingExample(
        kind=ExampleKind.SHORT_LOCATOR,
        input=input_text,
        output=output,
        loss_spans=((0, len(output)),),
        source=raw.source or raw.task.value,
    )


def build_short_generator(
    raw: RawExample, judgments: Sequence[LocatorJudgment] | None = None
) -> TrainingExample:
    """Plain answer imitation, or fact-conditioned answering when judgments given."""
    raw = _ensure_flat(raw)
    if judgments is None:
        output = raw.y + TokenKind.GENERATOR_END.value
        return TrainingExample(
            kind=ExampleKind.SHORT_GENERATOR_PLAIN,
            input=render_instruction(raw.x) + TokenKind.GENERATOR_HEAD.value + "\n",
            output=output,
            loss_spans=((0, len(output)),),
            source=raw.source or raw.task.value,
        )
    relevant = [j.passage_index for j in judgments if j.relevance is Relevance.RELEVANT]
    if not relevant:
        raise NoRelevantFactsError()
    locator_section = (
        TokenKind.LOCATOR_HEAD.value
        + "\n"
        + "\n".join(format_judgment(j) for j in judgments)
        + "\n"
        + TokenKind.LOCATOR_END.value
        + "\n"
    )
    output = _generator_body(raw.y, relevant) + TokenKind.GENERATOR_END.value
    return TrainingExample(
        kind=ExampleKind.SHORT_GENERATOR_FACTS,
        input=render_instruction(raw.x) + locator_section + TokenKind.GENERATOR_HEAD.value + "\n",
        output=output,
        loss_spans=((0, len(output)),),
        source=raw.source or raw.task.value,
    )


# ---------------------------------------------------------------------------
# validation


def _expected_long_spans(output: str) -> list[tuple[int, int]] | None:
    """Recompute the supervised spans of a long output from its parse."""
    try:
        trajectory = parse_trajectory(output)
    except GrammarError:
        return None
    if [s.kind for s in trajectory.steps] != [
        StepKind.RECONSTRUCTOR,
        StepKind.RETRIEVAL,
        StepKind.LOCATOR,
        StepKind.GENERATOR,
    ]:
        return None
    spans = []
    offset = 0
    for step in trajectory.steps:
        section = f"{step.kind.head.value}\n{step.body}\n{step.kind.end.value}\n"
        if step.kind is not StepKind.RETRIEVAL:
            spans.append((offset, offset + len(section) - 1))
        offset += len(section)
    if offset != len(output):
        return None
    return spans


def check_training_example(example: TrainingExample) -> list[str]:
    """Return every contract violation in a built example (empty means clean)."""
    problems: list[str] = []
    if example.kind is ExampleKind.LONG:
        expected = _expected_long_spans(example.output)
        if expected is None:
            problems.append("long output is not a four-section trajectory")
        elif list(example.loss_spans) != expected:
            problems.append("loss spans do not match the supervised sections")
        if not example.input.rstrip("\n").endswith(TokenKind.INSTRUCTION_END.value):
            problems.append("long input lacks the instruction terminator")
        return problems

    if example.loss_spans != ((0, len(example.output)),):
        problems.append("short example must supervise its whole output")
    ends = {
        ExampleKind.SHORT_INTENT: TokenKind.RECONSTRUCTOR_END,
        ExampleKind.SHORT_LOCATOR: TokenKind.LOCATOR_END,
        ExampleKind.SHORT_GENERATOR_PLAIN: TokenKind.GENERATOR_END,
        ExampleKind.SHORT_GENERATOR_FACTS: TokenKind.GENERATOR_END,
    }
    end = ends[example.kind]
    if not example.output.endswith(end.value):
        problems.append(f"short output must end with {end.value}")
        return problems
    body = example.output[: -len(end.value)]
    try:
        if example.kind is ExampleKind.SHORT_INTENT:
            parse_intents(body)
        elif example.kind is ExampleKind.SHORT_LOCATOR:
            parse_locator_body(body)
        else:
            parse_citations(body)
    except GrammarError as exc:
        problems.append(f"short output body does not parse: {exc}")
    return problems


def check_example_dict(record: dict) -> list[str]:
    """Validate one JSONL record; schema problems come back as messages too."""
    try:
        example = TrainingExample(
            kind=ExampleKind(record["kind"]),
            input=record["input"],
            output=record["output"],
            loss_spans=tuple((a, b) for a, b in record["loss_spans"]),
            source=record.get("source", ""),
        )
    except (KeyError, TypeError, ValueError) as exc:
        return [f"bad record: {exc}"]
    return check_training_example(example)


# ---------------------------------------------------------------------------
# emission


@dataclass(frozen=True)
class DatasetManifest:
    schema_version: int
    total: int
    counts_by_kind: dict[str, int] = field(default_factory=dict)
    counts_by_source: dict[str, int] = field(default_factory=dict)
    config_fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "total": self.total,
            "counts_by_kind": dict(sorted(self.counts_by_kind.items())),
            "counts_by_source": dict(sorted(self.counts_by_source.items())),
            "config_fingerprint": self.config_fingerprint,
        }


def emit_dataset(
    examples: Sequence[TrainingExample],
    path: str | Path,
    *,
    config_fingerprint: str = "",
) -> DatasetManifest:
    """Write examples as JSONL (deterministic bytes) and return the manifest."""
    by_kind: dict[str, int] = {}
    by_source: dict[str, int] = {}
    with open(path, "w", encoding="utf-8") as handle:
        for example in examples:
            record = {
                "kind": example.kind.value,
                "input": example.input,
                "output": example.output,
                "loss_spans": [[a, b] for a, b in example.loss_spans],
                "source": example.source,
            }
            handle.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
            by_kind[example.kind.value] = by_kind.get(example.kind.value, 0) + 1
            by_source[example.source] = by_source.get(example.source, 0) + 1
    return DatasetManifest(
        schema_version=SCHEMA_VERSION,
        total=len(examples),
        counts_by_kind=by_kind,
        counts_by_source=by_source,
        config_fingerprint=config_fingerprint,
    )


def read_raw_examples(path: str | Path, default_task: TaskTag | None = None) -> list[RawExample]:
    """Read raw records from JSONL; rows may omit "task" when a default is given."""
    raws: list[RawExample] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                task = TaskTag(record["task"]) if "task" in record else default_task
                if task is None:
                    raise KeyError("task")
                history = record.get("history")
                raws.append(
                    RawExample(
                        task=task,
                        x=record["x"],
                        y=record["y"],
                        history=tuple((q, a) for q, a in history) if history else None,
                        source=record.get("source", ""),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"bad raw record on line {lineno}: {exc}") from exc
    return raws
