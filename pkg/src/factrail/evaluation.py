"""Answer-quality metrics and report assembly.

All string metrics share one normalization: lowercase, strip punctuation,
drop the articles a/an/the, collapse whitespace. Accuracy is substring
containment of a normalized gold in the normalized prediction; str_em
generalizes that to answer sets; rouge_l is a word-level LCS F1 taken as
the max over references. Citation precision checks that cited facts
actually contain a gold answer.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .grammar import Relevance
from .orchestrator import BatchResult, InferenceTrace

__all__ = [
    "EvaluationError",
    "UnknownTaskError",
    "SchemaMismatchError",
    "EvalExample",
    "EvalReport",
    "normalize_answer",
    "match_accuracy",
    "str_em",
    "rouge_l",
    "citation_precision",
    "apply_task_instruction",
    "evaluate",
    "read_eval_examples",
    "TASK_INSTRUCTIONS",
    "KNOWN_TASKS",
]


class EvaluationError(Exception):
    pass


class UnknownTaskError(EvaluationError):
    def __init__(self, task: str) -> None:
        super().__init__(f"unknown task tag {task!r}")


class SchemaMismatchError(EvaluationError):
    pass


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_ARTICLES = {"a", "an", "the"}

TASK_INSTRUCTIONS = {
    "arc-c": "Given four answer candidates, choose the best answer choice.",
    "pubhealth": (
        "Is the following statement correct or not? Say true if it's correct; "
        "otherwise, say false."
    ),
    "asqa": (
        "Answer the following question. The question may be ambiguous and have "
        "multiple correct answers, and in that case, you have to provide a "
        "long-form answer including all correct answers."
    ),
}

KNOWN_TASKS = ("arc-c", "pubhealth", "asqa", "popqa", "squad")


def normalize_answer(text: str) -> str:
    words = text.lower().translate(_PUNCT_TABLE).split()
    return " ".join(w for w in words if w not in _ARTICLES)


def match_accuracy(prediction: str, golds: Sequence[str]) -> int:
    """1 iff any normalized gold occurs in the normalized prediction."""
    if not golds:
        raise ValueError("at least one gold answer is required")
    normalized = normalize_answer(prediction)
    return int(any(normalize_answer(g) in normalized for g in golds))


def str_em(prediction: str, gold_answer_sets: Sequence[Sequence[str]]) -> float:
    """Fraction of answer sets with at least one member present in the prediction."""
    if not gold_answer_sets:
        raise ValueError("at least one answer set is required")
    normalized = normalize_answer(prediction)
    hit = sum(
        1
        for answers in gold_answer_sets
        if any(normalize_answer(a) in normalized for a in answers)
    )
    return hit / len(gold_answer_sets)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, start=1):
            if token == other:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(prediction: str, references: Sequence[str]) -> float:
    """Word-level LCS F1 against the best reference; 0 when either side is empty."""
    pred_tokens = normalize_answer(prediction).split()
    best = 0.0
    for reference in references:
        ref_tokens = normalize_answer(reference).split()
        if not pred_tokens or not ref_tokens:
            continue
        lcs = _lcs_length(pred_tokens, ref_tokens)
        if lcs == 0:
            continue
        precision = lcs / len(pred_tokens)
        recall = lcs / len(ref_tokens)
        best = max(best, 2 * precision * recall / (precision + recall))
    return best


def citation_precision(trace: InferenceTrace, golds: Sequence[str]) -> float:
    """Fraction of cited passages whose extracted fact contains a gold answer.

    With nothing cited the score is vacuously 1.0, unless something was
    judged Relevant and should have been cited, which scores 0.0.
    """
    relevant = {
        j.passage_index: j for j in trace.judgments if j.relevance is Relevance.RELEVANT
    }
    if not trace.citations.indices:
        return 1.0 if not relevant else 0.0
    normalized_golds = [normalize_answer(g) for g in golds]
    normalized_golds = [g for g in normalized_golds if g]
    hits = 0
    for cited in trace.citations.indices:
        judgment = relevant.get(cited)
        if judgment is None or judgment.fact is None:
            continue
        fact = normalize_answer(judgment.fact)
        if any(g in fact for g in normalized_golds):
            hits += 1
    return hits / len(trace.citations.indices)


def apply_task_instruction(task: str, question: str) -> str:
    """Prefix the fixed per-task instruction; pass-through tasks stay unchanged."""
    if task not in KNOWN_TASKS:
        raise UnknownTaskError(task)
    instruction = TASK_INSTRUCTIONS.get(task)
    if instruction is None:
        return question
    return f"{instruction}\n{question}"


# ---------------------------------------------------------------------------
# reference sets and reports


@dataclass(frozen=True)
class EvalExample:
    question: str
    gold_answers: tuple[str, ...]
    task: str
    long_form_refs: tuple[str, ...] | None = None
    answer_sets: tuple[tuple[str, ...], ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "gold_answers", tuple(self.gold_answers))
        if self.long_form_refs is not None:
            object.__setattr__(self, "long_form_refs", tuple(self.long_form_refs))
        if self.answer_sets is not None:
            object.__setattr__(
                self, "answer_sets", tuple(tuple(s) for s in self.answer_sets)
            )
        if self.task not in KNOWN_TASKS:
            raise UnknownTaskError(self.task)
        if not self.gold_answers:
            raise ValueError("gold answers must be non-empty")
        if (self.task == "asqa") != (self.long_form_refs is not None):
            raise ValueError("long-form references are for asqa examples exactly")


def read_eval_examples(path: str | Path) -> list[EvalExample]:
    """Read reference records. asqa rows keep their per-disambiguation answer
    grouping via "gold_answer_sets"; rows without it treat each gold answer
    as its own set."""
    examples: list[EvalExample] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                task = record["task"]
                answer_sets = None
                long_form = None
                if task == "asqa":
                    raw_sets = record.get("gold_answer_sets")
                    if raw_sets:
                        answer_sets = tuple(tuple(s) for s in raw_sets)
                    else:
                        answer_sets = tuple((g,) for g in record["gold_answers"])
                    long_form = tuple(record["long_form_refs"])
                examples.append(
                    EvalExample(
                        question=record["question"],
                        gold_answers=tuple(record["gold_answers"]),
                        task=task,
                        long_form_refs=long_form,
                        answer_sets=answer_sets,
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SchemaMismatchError(f"bad reference on line {lineno}: {exc}") from exc
    return examples


@dataclass(frozen=True)
class EvalReport:
    task: str
    n: int
    metrics: dict[str, float]
    citations: dict[str, float]
    rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n": self.n,
            "metrics": {k: self.metrics[k] for k in sorted(self.metrics)},
            "citations": {k: self.citations[k] for k in sorted(self.citations)},
            "rows": self.rows,
        }

    def format_table(self) -> str:
        display = {"acc": "Acc", "str_em": "Str_EM", "rouge_l": "R-L"}
        header = f"task={self.task} n={self.n}"
        parts = [f"{display.get(k, k)}={self.metrics[k]:.4f}" for k in sorted(self.metrics)]
        parts.append(f"CitePrec={self.citations['precision_mean']:.4f}")
        return header + "\n" + "  ".join(parts)


def evaluate(
    results: Sequence[BatchResult], examples: Sequence[EvalExample], task: str
) -> EvalReport:
    """Score traces against references, paired by position."""
    if task not in KNOWN_TASKS:
        raise UnknownTaskError(task)
    if len(results) != len(examples):
        raise SchemaMismatchError(
            f"{len(results)} traces but {len(examples)} references"
        )
    for example in examples:
        if example.task != task:
            raise SchemaMismatchError(
                f"reference task {example.task!r} does not match {task!r}"
            )

    rows: list[dict] = []
    acc_values: list[int] = []
    str_em_values: list[float] = []
    rouge_values: list[float] = []
    precision_values: list[float] = []
    errors = 0
    for position, (result, example) in enumerate(zip(results, examples)):
        row: dict = {"i": position}
        if result.trace is None:
            errors += 1
            prediction = ""
            row["error"] = str(result.error) if result.error else "missing trace"
        else:
            prediction = result.trace.answer
        row["prediction"] = prediction
        if task == "asqa":
            assert example.answer_sets is not None and example.long_form_refs is not None
            row["str_em"] = str_em(prediction, example.answer_sets)
            row["rouge_l"] = rouge_l(prediction, example.long_form_refs)
            str_em_values.append(row["str_em"])
            rouge_values.append(row["rouge_l"])
        else:
            row["acc"] = match_accuracy(prediction, example.gold_answers)
            acc_values.append(row["acc"])
        if result.trace is not None:
            row["citation_precision"] = citation_precision(
                result.trace, example.gold_answers
            )
            precision_values.append(row["citation_precision"])
        rows.append(row)

    metrics: dict[str, float] = {}
    if task == "asqa":
        metrics["str_em"] = sum(str_em_values) / len(str_em_values) if str_em_values else 0.0
        metrics["rouge_l"] = sum(rouge_values) / len(rouge_values) if rouge_values else 0.0
    else:
        metrics["acc"] = sum(acc_values) / len(acc_values) if acc_values else 0.0
    citations = {
        "precision_mean": (
            sum(precision_values) / len(precision_values) if precision_values else 0.0
        ),
        "traces_scored": float(len(precision_values)),
        "errors": float(errors),
    }
    return EvalReport(task=task, n=len(examples), metrics=metrics, citations=citations, rows=rows)
