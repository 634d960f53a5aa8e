"""Shared test machinery: scenario scripting, oracles, and a stub HTTP server."""

from __future__ import annotations

import json
import math
import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Sequence

from factrail.backends import ScriptedBackend
from factrail.corpus import (
    BM25_B,
    BM25_K1,
    CorpusIndex,
    Passage,
    tokenize,
)
from factrail.grammar import (
    Relevance,
    StepKind,
    TrajectoryStep,
    format_judgment,
    parse_intents,
    parse_locator_body,
    retrieval_body,
)
from factrail.orchestrator import InferenceConfig, build_step_prompt


def brute_force_bm25(
    passages: Sequence[Passage], query: str, k: int
) -> list[tuple[int, float]]:
    """Exhaustive BM25 scorer: no inverted index, recounts everything per query."""
    terms = []
    for term in tokenize(query):
        if term not in terms:
            terms.append(term)
    total = len(passages)
    lengths = {p.id: p.word_count for p in passages}
    avg = sum(lengths.values()) / total if total else 0.0
    scored = []
    for passage in passages:
        bag = tokenize(passage.text) + tokenize(passage.title)
        score = 0.0
        for term in terms:
            tf = bag.count(term)
            if tf == 0:
                continue
            df = sum(
                1
                for other in passages
                if term in tokenize(other.text) + tokenize(other.title)
            )
            idf = math.log(1.0 + (total - df + 0.5) / (df + 0.5))
            norm = 1.0 - BM25_B + BM25_B * lengths[passage.id] / avg
            score += idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
        if score > 0.0:
            scored.append((passage.id, score))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:k]


def mirror_retrieval(
    index: CorpusIndex, reconstructor_body: str, cfg: InferenceConfig
) -> list[Passage]:
    """Recompute what the pipeline will retrieve for a scripted reconstruction body."""
    from factrail.corpus import retrieve_multi
    from factrail.grammar import IntentSet

    proposed = parse_intents(reconstructor_body)
    intents = proposed
    if proposed.m > cfg.max_intents:
        intents = IntentSet(proposed.intents[: cfg.max_intents])
    passages = retrieve_multi(index, intents, cfg.k)
    return passages[: cfg.max_passages]


def script_scenario(
    backend: ScriptedBackend,
    index: CorpusIndex,
    cfg: InferenceConfig,
    instruction: str,
    reconstructor_body: str,
    locator_body_for: Callable[[Sequence[Passage]], str],
    generator_body: str,
    fallback_generator_body: str | None = None,
) -> list[Passage]:
    """Register scripted replies for one instruction by mirroring prompt assembly.

    Returns the passages the pipeline will see. The generator reply is keyed
    under whichever branch the judgments select; pass fallback_generator_body
    to also cover the no-facts branch explicitly.
    """
    backend.add_reply(
        build_step_prompt(instruction, [], StepKind.RECONSTRUCTOR), reconstructor_body
    )
    passages = mirror_retrieval(index, reconstructor_body, cfg)
    steps = [TrajectoryStep(StepKind.RECONSTRUCTOR, reconstructor_body)]
    any_relevant = False
    if passages:
        steps.append(TrajectoryStep(StepKind.RETRIEVAL, retrieval_body(passages)))
        locator_body = locator_body_for(passages)
        backend.add_reply(
            build_step_prompt(instruction, steps, StepKind.LOCATOR), locator_body
        )
        judgments = parse_locator_body(locator_body)
        any_relevant = any(j.relevance is Relevance.RELEVANT for j in judgments)
        steps.append(TrajectoryStep(StepKind.LOCATOR, locator_body))
    if any_relevant:
        backend.add_reply(
            build_step_prompt(instruction, steps, StepKind.GENERATOR), generator_body
        )
    else:
        backend.add_reply(
            build_step_prompt(instruction, [], StepKind.GENERATOR),
            fallback_generator_body or generator_body,
        )
    return passages


def judge_by_answer(answer: str) -> Callable[[Sequence[Passage]], str]:
    """Locator reply builder: Relevant (first sentence as fact) iff the answer occurs."""

    def build(passages: Sequence[Passage]) -> str:
        lines = []
        for i, passage in enumerate(passages, start=1):
            if answer.casefold() in passage.text.casefold():
                sentence = passage.text.split(". ")[0].rstrip(".") + "."
                lines.append(format_judgment_line(i, sentence))
            else:
                lines.append(f"[Irrelevant]: [{i}] Lacking Supporting Facts.")
        return "\n".join(lines)

    return build


def format_judgment_line(index: int, fact: str) -> str:
    from factrail.grammar import LocatorJudgment

    return format_judgment(LocatorJudgment(index, Relevance.RELEVANT, fact))


# ---------------------------------------------------------------------------
# random trajectory generation and mutation (grammar fuzzing)

_TOKEN_SURFACES = [
    "</eoi>",
    "<Reconstructor>",
    "</eor>",
    "<retrieval>",
    "</retrieval>",
    "<Locator>",
    "</eol>",
    "<Generator>",
    "</eog>",
]

_BODY_ALPHABET = (
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
    " .,;:!?()[]-'\"\n"
)


def random_body(rng: random.Random, max_len: int = 60) -> str:
    while True:
        body = "".join(
            rng.choice(_BODY_ALPHABET) for _ in range(rng.randint(0, max_len))
        )
        if not any(tok in body for tok in _TOKEN_SURFACES):
            return body


def random_trajectory(rng: random.Random):
    from factrail.grammar import Trajectory

    kinds = [
        kind
        for kind in (StepKind.RECONSTRUCTOR, StepKind.RETRIEVAL, StepKind.LOCATOR)
        if rng.random() < 0.6
    ]
    kinds.append(StepKind.GENERATOR)
    return Trajectory(tuple(TrajectoryStep(k, random_body(rng)) for k in kinds))


def mutate_serialized(rng: random.Random, text: str) -> str:
    """Apply one structural corruption guaranteed to break well-formedness."""
    heads = [s for s in _TOKEN_SURFACES if s.startswith("<") and not s.startswith("</")]
    ends = ["</eor>", "</retrieval>", "</eol>", "</eog>"]
    choices = ["drop_end", "drop_head", "wrong_end", "inject_head", "dup_section", "stray_text"]
    while True:
        kind = rng.choice(choices)
        if kind == "drop_end":
            present = [e for e in ends if e in text]
            if not present:
                continue
            victim = rng.choice(present)
            return text.replace(victim + "\n", "", 1)
        if kind == "drop_head":
            present = [h for h in heads if h in text]
            if not present:
                continue
            victim = rng.choice(present)
            return text.replace(victim + "\n", "", 1)
        if kind == "wrong_end":
            present = [e for e in ends if e in text]
            if not present:
                continue
            victim = rng.choice(present)
            replacement = rng.choice([e for e in ends if e != victim])
            return text.replace(victim, replacement, 1)
        if kind == "inject_head":
            at = text.find("\n")
            if at == -1:
                continue
            head = rng.choice(heads)
            return text[: at + 1] + head + "\n" + text[at + 1 :]
        if kind == "dup_section":
            # Duplicate the generator section; repeated kinds break the order rule.
            at = text.find("<Generator>")
            if at == -1:
                continue
            return text + text[at:]
        if kind == "stray_text":
            # Outside any section: before the first head or after the last end.
            if rng.random() < 0.5:
                return "stray words here\n" + text
            return text + "stray words here\n"


# ---------------------------------------------------------------------------
# stub chat-completion server


class StubServer:
    """Tiny local chat-completion endpoint driven by a per-test handler.

    The handler receives the parsed request payload and returns
    (status_code, response_object); a string response object is sent as-is,
    anything else is JSON-encoded. Requests are counted and recorded.
    """

    def __init__(self, handler: Callable[[dict], tuple[int, object]]) -> None:
        self._handler = handler
        self.requests: list[dict] = []
        self.header_log: list[dict] = []
        self.request_count = 0
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:
                length = int(self.headers.get("Content-Length", "0"))
                payload = json.loads(self.rfile.read(length) or b"{}")
                stub.requests.append(payload)
                stub.header_log.append({k.lower(): v for k, v in self.headers.items()})
                stub.request_count += 1
                status, body = stub._handler(payload)
                raw = body if isinstance(body, str) else json.dumps(body)
                data = raw.encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args) -> None:
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    def __enter__(self) -> "StubServer":
        self._thread.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self._server.shutdown()
        self._server.server_close()


def chat_reply(content: str, finish_reason: str = "stop") -> dict:
    return {"choices": [{"message": {"content": content}, "finish_reason": finish_reason}]}
