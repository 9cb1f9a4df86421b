"""BM25 retrieval of the most similar training pair (the initial draft)."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import CodeCommentPair, subtokenize_code

INDEX_FORMAT = "draftrefine-bm25-index"
INDEX_VERSION = 1


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if not self.k1 > 0:
            raise ValueError(f"k1 must be > 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must lie in [0, 1], got {self.b}")


@dataclass
class RetrievalIndex:
    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: list[int]
    avg_doc_len: float
    n_docs: int
    doc_store: list[CodeCommentPair]

    def __post_init__(self) -> None:
        self._doc_tf: list[dict[str, int]] = [{} for _ in range(self.n_docs)]
        for term, plist in self.postings.items():
            for doc_id, freq in plist:
                if not 0 <= doc_id < self.n_docs:
                    raise ValueError(f"posting for {term!r} names unknown doc {doc_id}")
                self._doc_tf[doc_id][term] = freq

    def document_frequency(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def tf(self, term: str, doc_id: int) -> int:
        return self._doc_tf[doc_id].get(term, 0)

    def save(self, path: str | Path) -> None:
        payload = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "n_docs": self.n_docs,
            "avg_doc_len": self.avg_doc_len,
            "doc_lengths": self.doc_lengths,
            "postings": {t: [list(p) for p in plist] for t, plist in sorted(self.postings.items())},
            "docs": [p.to_json() for p in self.doc_store],
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalIndex":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format") != INDEX_FORMAT:
            raise ValueError(f"{path}: not a retrieval index file")
        if payload.get("version") != INDEX_VERSION:
            raise ValueError(f"{path}: unsupported index version {payload.get('version')}")
        return cls(
            postings={t: [(int(d), int(f)) for d, f in plist] for t, plist in payload["postings"].items()},
            doc_lengths=[int(n) for n in payload["doc_lengths"]],
            avg_doc_len=float(payload["avg_doc_len"]),
            n_docs=int(payload["n_docs"]),
            doc_store=[CodeCommentPair.from_json(d) for d in payload["docs"]],
        )


def document_terms(pair: CodeCommentPair) -> list[str]:
    return subtokenize_code(pair.code_tokens)


def build_index(pairs: Sequence[CodeCommentPair]) -> RetrievalIndex:
    """Index pairs by their code subtokens; doc ids follow input order."""
    if not pairs:
        raise ValueError("empty retrieval corpus")
    postings: dict[str, list[tuple[int, int]]] = {}
    lengths = []
    for doc_id, pair in enumerate(pairs):
        terms = document_terms(pair)
        lengths.append(len(terms))
        for term, freq in Counter(terms).items():
            postings.setdefault(term, []).append((doc_id, freq))
    return RetrievalIndex(
        postings=postings,
        doc_lengths=lengths,
        avg_doc_len=sum(lengths) / len(lengths),
        n_docs=len(pairs),
        doc_store=list(pairs),
    )


def idf(df: int, n_docs: int) -> float:
    return math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)


def _term_weight(term_idf: float, tf: int, doc_len: int, avg_len: float, params: Bm25Params) -> float:
    norm = 1.0 - params.b + params.b * (doc_len / avg_len if avg_len > 0 else 0.0)
    return term_idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)


def _query_terms(query_tokens: Sequence[str]) -> list[str]:
    # distinct terms, first-occurrence order
    return list(dict.fromkeys(query_tokens))


def bm25_score(
    query_tokens: Sequence[str], doc_id: int, index: RetrievalIndex, params: Bm25Params = Bm25Params()
) -> float:
    """Okapi BM25 of one document against a bag of query terms."""
    if not 0 <= doc_id < index.n_docs:
        raise KeyError(f"doc_id {doc_id} not in index of {index.n_docs} documents")
    score = 0.0
    for term in _query_terms(query_tokens):
        tf = index.tf(term, doc_id)
        if tf:
            term_idf = idf(index.document_frequency(term), index.n_docs)
            score += _term_weight(term_idf, tf, index.doc_lengths[doc_id], index.avg_doc_len, params)
    return score


def score_all(query_tokens: Sequence[str], index: RetrievalIndex, params: Bm25Params = Bm25Params()) -> list[float]:
    """BM25 of every document, accumulated through the postings lists."""
    scores = [0.0] * index.n_docs
    for term in _query_terms(query_tokens):
        plist = index.postings.get(term)
        if not plist:
            continue
        term_idf = idf(len(plist), index.n_docs)
        for doc_id, tf in plist:
            scores[doc_id] += _term_weight(term_idf, tf, index.doc_lengths[doc_id], index.avg_doc_len, params)
    return scores


def retrieve_top1(
    code_tokens: Sequence[str],
    index: RetrievalIndex,
    params: Bm25Params = Bm25Params(),
    exclude: int | None = None,
) -> tuple[CodeCommentPair, float, int]:
    """Best-scoring pair for ``code_tokens``; ties go to the smallest doc id.

    ``code_tokens`` are raw code tokens; they are subtokenized the same way
    the indexed documents were. ``exclude`` skips one doc id (a training
    example must not retrieve itself).

    Returns ``(pair, score, doc_id)``.
    """
    if index.n_docs == 0:
        raise ValueError("empty retrieval corpus")
    if exclude is not None and index.n_docs == 1 and exclude == 0:
        raise ValueError("cannot exclude the only document in the index")
    scores = score_all(subtokenize_code(code_tokens), index, params)
    best_id, best = -1, -math.inf
    for doc_id, s in enumerate(scores):
        if doc_id != exclude and s > best:
            best_id, best = doc_id, s
    return index.doc_store[best_id], best, best_id
