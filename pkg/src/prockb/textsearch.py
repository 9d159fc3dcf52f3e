"""Okapi BM25 over an in-memory inverted index.

Tokenization is lowercase plus splitting on non-alphanumeric runs. IDF uses
the non-negative form ln(1 + (N - df + 0.5) / (df + 0.5)). Defaults k1=1.2,
b=0.75. Indexes are immutable once built; queries may run concurrently.
"""

import json
import math
import re
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

# Small list for the optional stopword switch; off by default.
DEFAULT_STOPWORDS = frozenset(
    "a an and are as at be but by for from has have in is it its of on or that the this to was were will with".split()
)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def s_stem(token: str) -> str:
    """Light plural stemmer: ies->y, drop trailing es/s with the usual guards."""
    if len(token) > 4 and token.endswith("ies") and token[-4] not in "ae":
        return token[:-3] + "y"
    if len(token) > 3 and token.endswith("es") and token[-3] not in "aeo":
        return token[:-1]
    if len(token) > 3 and token.endswith("s") and token[-2] not in "su":
        return token[:-1]
    return token


class TextIndex:
    """Inverted index with per-term postings and BM25 statistics."""

    def __init__(
        self,
        docs: Sequence[tuple[str, str]],
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
        stopwords: Iterable[str] | bool | None = None,
        stem: bool = False,
    ):
        if k1 <= 0:
            raise ValueError(f"k1 must be > 0, got {k1}")
        if not 0.0 <= b <= 1.0:
            raise ValueError(f"b must be in [0, 1], got {b}")
        self.k1 = k1
        self.b = b
        self.stem = stem
        if stopwords is True:
            self.stopwords: frozenset[str] | None = DEFAULT_STOPWORDS
        elif stopwords:
            self.stopwords = frozenset(stopwords)
        else:
            self.stopwords = None

        self.doc_ids: list[str] = []
        self._idx_of: dict[str, int] = {}
        lengths: list[int] = []
        raw_postings: dict[str, dict[int, int]] = {}
        for doc_id, text in docs:
            if doc_id in self._idx_of:
                raise DataError(f"duplicate doc id {doc_id!r}")
            idx = len(self.doc_ids)
            self._idx_of[doc_id] = idx
            self.doc_ids.append(doc_id)
            tokens = self._analyze(text)
            lengths.append(len(tokens))
            for tok in tokens:
                bucket = raw_postings.setdefault(tok, {})
                bucket[idx] = bucket.get(idx, 0) + 1

        self.doc_lens = np.array(lengths, dtype=np.float64)
        self.n_docs = len(self.doc_ids)
        self.avgdl = float(self.doc_lens.mean()) if self.n_docs else 0.0
        self._avgdl_safe = self.avgdl if self.avgdl > 0.0 else 1.0
        # Ranks of doc ids in ascending order, for deterministic tie-breaks.
        self.id_rank = np.empty(self.n_docs, dtype=np.int64)
        for rank, idx in enumerate(sorted(range(self.n_docs), key=lambda i: self.doc_ids[i])):
            self.id_rank[idx] = rank

        self._postings: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for term, bucket in raw_postings.items():
            idxs = np.array(sorted(bucket), dtype=np.int64)
            tfs = np.array([bucket[i] for i in idxs], dtype=np.float64)
            self._postings[term] = (idxs, tfs)

    def _analyze(self, text: str) -> list[str]:
        tokens = tokenize(text)
        if self.stem:
            tokens = [s_stem(t) for t in tokens]
        if self.stopwords is not None:
            tokens = [t for t in tokens if t not in self.stopwords]
        return tokens

    def idf(self, term: str) -> float:
        posting = self._postings.get(term)
        if posting is None:
            return 0.0
        df = len(posting[0])
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def postings_for(self, term: str) -> list[tuple[str, int]]:
        posting = self._postings.get(term)
        if posting is None:
            return []
        pairs = [(self.doc_ids[i], int(tf)) for i, tf in zip(posting[0], posting[1])]
        return sorted(pairs)

    def doc_length(self, doc_id: str) -> int:
        return int(self.doc_lens[self.doc_idx(doc_id)])

    def doc_idx(self, doc_id: str) -> int:
        try:
            return self._idx_of[doc_id]
        except KeyError:
            raise KeyError(f"unknown doc id {doc_id!r}") from None

    def score(self, query: str, doc_id: str) -> float:
        """Okapi BM25 of one document against a query; additive over terms."""
        idx = self.doc_idx(doc_id)
        dl = float(self.doc_lens[idx])
        denom_norm = self.k1 * (1.0 - self.b + self.b * dl / self._avgdl_safe)
        total = 0.0
        for term in self._analyze(query):
            posting = self._postings.get(term)
            if posting is None:
                continue
            pos = int(np.searchsorted(posting[0], idx))
            if pos >= len(posting[0]) or posting[0][pos] != idx:
                continue
            tf = float(posting[1][pos])
            total += self.idf(term) * tf * (self.k1 + 1.0) / (tf + denom_norm)
        return total

    def score_all(self, query: str) -> np.ndarray:
        """BM25 of every indexed document against a query."""
        scores = np.zeros(self.n_docs, dtype=np.float64)
        for term in self._analyze(query):
            posting = self._postings.get(term)
            if posting is None:
                continue
            idxs, tfs = posting
            dl = self.doc_lens[idxs]
            denom = tfs + self.k1 * (1.0 - self.b + self.b * dl / self._avgdl_safe)
            scores[idxs] += self.idf(term) * tfs * (self.k1 + 1.0) / denom
        return scores

    def ranked(self, query: str, n: int) -> list[tuple[str, float]]:
        """Top-n documents by score, ties by ascending doc id."""
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        scores = self.score_all(query)
        order = np.lexsort((self.id_rank, -scores))
        return [(self.doc_ids[i], float(scores[i])) for i in order[: min(n, self.n_docs)]]

    def to_json(self) -> str:
        payload = {
            "k1": self.k1,
            "b": self.b,
            "stem": self.stem,
            "stopwords": sorted(self.stopwords) if self.stopwords is not None else None,
            "docs": [[doc_id, int(self.doc_lens[i])] for i, doc_id in enumerate(self.doc_ids)],
            "postings": {
                term: [[self.doc_ids[i], int(tf)] for i, tf in zip(idxs, tfs)]
                for term, (idxs, tfs) in sorted(self._postings.items())
            },
        }
        return json.dumps(payload, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, blob: str) -> "TextIndex":
        payload = json.loads(blob)
        index = cls([], k1=payload["k1"], b=payload["b"],
                    stopwords=payload["stopwords"], stem=payload["stem"])
        index.doc_ids = [doc_id for doc_id, _ in payload["docs"]]
        index._idx_of = {doc_id: i for i, doc_id in enumerate(index.doc_ids)}
        index.doc_lens = np.array([length for _, length in payload["docs"]], dtype=np.float64)
        index.n_docs = len(index.doc_ids)
        index.avgdl = float(index.doc_lens.mean()) if index.n_docs else 0.0
        index._avgdl_safe = index.avgdl if index.avgdl > 0.0 else 1.0
        index.id_rank = np.empty(index.n_docs, dtype=np.int64)
        for rank, idx in enumerate(sorted(range(index.n_docs), key=lambda i: index.doc_ids[i])):
            index.id_rank[idx] = rank
        index._postings = {}
        for term, pairs in payload["postings"].items():
            idxs = np.array(sorted(index._idx_of[doc_id] for doc_id, _ in pairs), dtype=np.int64)
            by_idx = {index._idx_of[doc_id]: tf for doc_id, tf in pairs}
            tfs = np.array([by_idx[i] for i in idxs], dtype=np.float64)
            index._postings[term] = (idxs, tfs)
        return index


def index_docs(docs: Sequence[tuple[str, str]], **params) -> TextIndex:
    return TextIndex(docs, **params)


def bm25_score(index: TextIndex, query: str, doc_id: str) -> float:
    return index.score(query, doc_id)


def search(index: TextIndex, query: str, n: int) -> list[tuple[str, float]]:
    return index.ranked(query, n)
