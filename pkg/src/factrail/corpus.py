"""Corpus ingestion, fixed-width chunking, and BM25 retrieval.

Documents are split into non-overlapping 100-word passages that carry their
source title. Retrieval runs over an in-memory inverted index with BM25
scoring (k1=1.2, b=0.75) and a stable score-then-id tie-break, so results
are fully deterministic. Indexes persist as versioned JSON; derived
structures are rebuilt on load.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .grammar import IntentSet

__all__ = [
    "CHUNK_WORDS",
    "BM25_K1",
    "BM25_B",
    "CorpusError",
    "EmptyDocumentError",
    "DuplicatePassageError",
    "EmptyQueryError",
    "IndexFormatError",
    "Passage",
    "CorpusIndex",
    "RetrievalResult",
    "tokenize",
    "chunk_document",
    "build_index",
    "retrieve",
    "retrieve_multi",
    "save_index",
    "load_index",
    "read_documents",
    "index_documents",
]

CHUNK_WORDS = 100
BM25_K1 = 1.2
BM25_B = 0.75

INDEX_FORMAT = "factrail-index"
INDEX_VERSION = 1


class CorpusError(Exception):
    pass


class EmptyDocumentError(CorpusError):
    def __init__(self, title: str) -> None:
        super().__init__(f"document {title!r} has no words")


class DuplicatePassageError(CorpusError):
    def __init__(self, passage_id: int) -> None:
        self.passage_id = passage_id
        super().__init__(f"duplicate passage id {passage_id}")


class EmptyQueryError(CorpusError):
    def __init__(self, query: str) -> None:
        super().__init__(f"query {query!r} contains no indexable terms")


class IndexFormatError(CorpusError):
    pass


@dataclass(frozen=True)
class Passage:
    """A chunk of at most CHUNK_WORDS whitespace-delimited words."""

    id: int
    title: str
    text: str
    word_count: int


# Alphanumeric runs, unicode-aware, underscores excluded.
_TERM_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    return _TERM_RE.findall(text.lower())


def chunk_document(title: str, body: str, *, start_id: int = 0) -> list[Passage]:
    """Split a document into consecutive passages of at most CHUNK_WORDS words.

    The body is whitespace-normalized first, so joining the passage texts
    with single spaces reconstructs it exactly. Ids are assigned
    sequentially from start_id.
    """
    title = " ".join(title.split())
    words = body.split()
    if not words:
        raise EmptyDocumentError(title)
    passages = []
    for offset, begin in enumerate(range(0, len(words), CHUNK_WORDS)):
        piece = words[begin : begin + CHUNK_WORDS]
        passages.append(
            Passage(
                id=start_id + offset,
                title=title,
                text=" ".join(piece),
                word_count=len(piece),
            )
        )
    return passages


@dataclass
class CorpusIndex:
    """Inverted index over passages. Treat as immutable once built."""

    passages: dict[int, Passage]
    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: dict[int, int]
    avg_doc_length: float
    total_docs: int


def build_index(passages: Sequence[Passage]) -> CorpusIndex:
    by_id: dict[int, Passage] = {}
    for passage in passages:
        if passage.id in by_id:
            raise DuplicatePassageError(passage.id)
        by_id[passage.id] = passage
    postings: dict[str, list[tuple[int, int]]] = {}
    for pid in sorted(by_id):
        passage = by_id[pid]
        # Title terms are appended once so titles are searchable.
        counts = Counter(tokenize(passage.text) + tokenize(passage.title))
        for term, tf in counts.items():
            postings.setdefault(term, []).append((pid, tf))
    doc_lengths = {pid: by_id[pid].word_count for pid in by_id}
    total = len(by_id)
    avg = sum(doc_lengths.values()) / total if total else 0.0
    return CorpusIndex(
        passages=by_id,
        postings=postings,
        doc_lengths=doc_lengths,
        avg_doc_length=avg,
        total_docs=total,
    )


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    ranked: tuple[tuple[int, float], ...]


def bm25_idf(total_docs: int, doc_freq: int) -> float:
    """Lucene-shaped idf, strictly positive for any in-corpus term."""
    return math.log(1.0 + (total_docs - doc_freq + 0.5) / (doc_freq + 0.5))


def _unique_in_order(terms: Iterable[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for term in terms:
        if term not in seen:
            seen.add(term)
            out.append(term)
    return out


def retrieve(index: CorpusIndex, query: str, k: int) -> RetrievalResult:
    """Rank passages by BM25 against the query's unique terms.

    Only passages sharing at least one term score, so zero-score passages
    never appear. Ties break by ascending passage id.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    terms = _unique_in_order(tokenize(query))
    if not terms:
        raise EmptyQueryError(query)
    scores: dict[int, float] = {}
    for term in terms:
        postings = index.postings.get(term)
        if not postings:
            continue
        idf = bm25_idf(index.total_docs, len(postings))
        for pid, tf in postings:
            length_norm = 1.0 - BM25_B + BM25_B * index.doc_lengths[pid] / index.avg_doc_length
            contribution = idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * length_norm)
            scores[pid] = scores.get(pid, 0.0) + contribution
    ranked = sorted(
        ((pid, score) for pid, score in scores.items() if score > 0.0),
        key=lambda item: (-item[1], item[0]),
    )[:k]
    return RetrievalResult(query=query, ranked=tuple(ranked))


def retrieve_multi(index: CorpusIndex, intents: IntentSet, k: int) -> list[Passage]:
    """Run per-intent retrieval and concatenate the top-k lists in intent order.

    Duplicates keep their first occurrence, so the output order defines the
    global passage numbering. Intents without indexable terms are skipped;
    if every intent is unindexable the error propagates.
    """
    ordered: list[int] = []
    seen: set[int] = set()
    indexable = 0
    for intent in intents.intents:
        try:
            result = retrieve(index, intent, k)
        except EmptyQueryError:
            continue
        indexable += 1
        for pid, _score in result.ranked:
            if pid not in seen:
                seen.add(pid)
                ordered.append(pid)
    if indexable == 0:
        raise EmptyQueryError("; ".join(intents.intents))
    return [index.passages[pid] for pid in ordered]


# ---------------------------------------------------------------------------
# persistence and ingestion


def save_index(index: CorpusIndex, path: str | Path) -> None:
    payload = {
        "format": INDEX_FORMAT,
        "version": INDEX_VERSION,
        "chunk_words": CHUNK_WORDS,
        "bm25": {"k1": BM25_K1, "b": BM25_B},
        "passages": [
            {
                "id": p.id,
                "title": p.title,
                "text": p.text,
                "word_count": p.word_count,
            }
            for p in (index.passages[pid] for pid in sorted(index.passages))
        ],
    }
    Path(path).write_text(
        json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )


def load_index(path: str | Path) -> CorpusIndex:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IndexFormatError(f"not an index file: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != INDEX_FORMAT:
        raise IndexFormatError("missing or wrong format header")
    if payload.get("version") != INDEX_VERSION:
        raise IndexFormatError(f"unsupported index version {payload.get('version')!r}")
    passages = [
        Passage(
            id=entry["id"],
            title=entry["title"],
            text=entry["text"],
            word_count=entry["word_count"],
        )
        for entry in payload["passages"]
    ]
    return build_index(passages)


def read_documents(path: str | Path) -> list[tuple[str, str]]:
    """Read a JSONL corpus of {"title", "text"} records."""
    docs: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                docs.append((record["title"], record["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"bad corpus record on line {lineno}: {exc}") from exc
    return docs


def index_documents(docs: Iterable[tuple[str, str]]) -> CorpusIndex:
    """Chunk and index documents, assigning globally unique passage ids."""
    passages: list[Passage] = []
    next_id = 0
    for title, body in docs:
        chunks = chunk_document(title, body, start_id=next_id)
        next_id += len(chunks)
        passages.extend(chunks)
    return build_index(passages)
