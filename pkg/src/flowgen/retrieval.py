"""Activity catalog loading, activity retrieval and demonstration retrieval.

Two ranking kinds are supported:

* ``edit_distance``: ascending Levenshtein distance between the lowercased
  utterance and each description, normalised by the longer string.
* ``similarity_backend``: descending score of a pluggable
  :class:`SimilarityBackend`.  :class:`TfidfBackend` (character 3-gram TF-IDF
  cosine) is built in; :class:`EmbeddingBackend` and
  :class:`CrossEncoderBackend` adapt externally supplied models.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from sklearn.feature_extraction.text import TfidfVectorizer

from .errors import CatalogError
from .ir import Program, collect_activities, is_identifier

EDIT_DISTANCE = "edit_distance"
SIMILARITY_BACKEND = "similarity_backend"


@dataclass(frozen=True)
class ActivityEntry:
    id: str
    description: str


@dataclass(frozen=True)
class Demonstration:
    utterance: str
    expected: Program
    prior_sequence: Program | None = None
    tags: frozenset[str] = frozenset()
    uid: int | None = None

    def __post_init__(self) -> None:
        if not self.expected.statements:
            raise ValueError("a demonstration needs a non-empty expected program")


def load_catalog(json_text: str | bytes) -> list[ActivityEntry]:
    """Parse a catalog: a JSON array of ``{"id": ..., "description": ...}``."""
    try:
        data = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise CatalogError(f"catalog is not valid JSON: {exc}") from exc
    if isinstance(data, dict):
        lists = [v for v in data.values() if isinstance(v, list)]
        if len(lists) != 1:
            raise CatalogError("catalog must be a JSON array of activities")
        data = lists[0]
    if not isinstance(data, list):
        raise CatalogError("catalog must be a JSON array of activities")
    entries: list[ActivityEntry] = []
    seen: set[str] = set()
    for i, obj in enumerate(data):
        if not isinstance(obj, dict):
            raise CatalogError(f"catalog entry {i} is not an object")
        missing = [k for k in ("id", "description") if not isinstance(obj.get(k), str)]
        if missing:
            raise CatalogError(f"catalog entry {i} lacks string field(s) {missing}")
        if not is_identifier(obj["id"]):
            raise CatalogError(f"catalog entry {i}: id {obj['id']!r} is not an identifier")
        if obj["id"] in seen:
            raise CatalogError(f"duplicate catalog id {obj['id']!r}")
        seen.add(obj["id"])
        entries.append(ActivityEntry(obj["id"], obj["description"]))
    return entries


def read_catalog(path: str) -> list[ActivityEntry]:
    """Read and parse a catalog file."""
    try:
        with open(path, "rb") as fh:
            return load_catalog(fh.read())
    except OSError as exc:
        raise CatalogError(f"cannot read catalog {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Edit distance
# ---------------------------------------------------------------------------


def levenshtein(a: str, b: str) -> int:
    """Unit-cost insert/delete/substitute distance (two-row dynamic program)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_levenshtein(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    return levenshtein(a, b) / longest if longest else 0.0


class _EncodedTexts:
    """Candidate strings packed into a padded code-point matrix."""

    def __init__(self, texts: Sequence[str]):
        self.lengths = np.array([len(t) for t in texts], dtype=np.int64)
        width = int(self.lengths.max()) if len(texts) else 0
        self.codes = np.full((len(texts), width), -1, dtype=np.int64)
        for row, text in enumerate(texts):
            self.codes[row, : len(text)] = [ord(c) for c in text]

    def distances(self, query: str) -> np.ndarray:
        """Levenshtein distance from *query* to every candidate at once.

        Row-by-row DP over the query; the in-row insertion chain
        ``cur[j] = min(t[j], cur[j-1] + 1)`` is resolved with a running
        minimum of ``t[k] - k``.
        """
        k, width = self.codes.shape
        if k == 0:
            return np.zeros(0)
        cols = np.arange(width + 1)
        prev = np.broadcast_to(cols, (k, width + 1)).copy()
        t = np.empty_like(prev)
        for i, ch in enumerate(query, 1):
            mismatch = self.codes != ord(ch)
            t[:, 0] = i
            np.minimum(prev[:, 1:] + 1, prev[:, :-1] + mismatch, out=t[:, 1:])
            prev = np.minimum.accumulate(t - cols, axis=1) + cols
        return prev[np.arange(k), self.lengths].astype(float)

    def normalized(self, query: str) -> np.ndarray:
        d = self.distances(query)
        longest = np.maximum(self.lengths, len(query)).astype(float)
        return np.divide(d, longest, out=np.zeros_like(d), where=longest > 0)


# ---------------------------------------------------------------------------
# Similarity backends
# ---------------------------------------------------------------------------


class SimilarityBackend(ABC):
    """Scores how well a candidate text matches a query, in [0, 1]."""

    def fit(self, corpus: Sequence[str]) -> SimilarityBackend:
        """Optional index build over the candidate texts."""
        return self

    @abstractmethod
    def score(self, query: str, candidate: str) -> float: ...

    def score_many(self, query: str, candidates: Sequence[str]) -> np.ndarray:
        return np.array([self.score(query, c) for c in candidates], dtype=float)


class TfidfBackend(SimilarityBackend):
    """Cosine similarity of lowercased character 3-gram TF-IDF vectors."""

    def __init__(self, ngram: int = 3):
        self.ngram = ngram
        self.vectorizer: TfidfVectorizer | None = None
        self._cache: dict[str, object] = {}

    def _new_vectorizer(self) -> TfidfVectorizer:
        return TfidfVectorizer(analyzer="char", ngram_range=(self.ngram, self.ngram), lowercase=True)

    def fit(self, corpus: Sequence[str]) -> TfidfBackend:
        texts = [t for t in corpus if len(t) >= self.ngram] or ["\0" * self.ngram]
        self.vectorizer = self._new_vectorizer().fit(texts)
        self._cache = {}
        return self

    def _vectors(self, texts: Sequence[str]):
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            for text, row in zip(missing, self.vectorizer.transform(missing)):
                self._cache[text] = row
        return [self._cache[t] for t in texts]

    def score_many(self, query: str, candidates: Sequence[str]) -> np.ndarray:
        if self.vectorizer is None:
            self.fit(list(candidates) + [query])
        q = self.vectorizer.transform([query])
        rows = self._vectors(list(candidates))
        scores = np.array([float(q.multiply(r).sum()) for r in rows]) if rows else np.zeros(0)
        exact = np.array([c.lower() == query.lower() for c in candidates], dtype=bool)
        scores[exact] = 1.0
        return np.clip(scores, 0.0, 1.0)

    def score(self, query: str, candidate: str) -> float:
        return float(self.score_many(query, [candidate])[0])


class EmbeddingBackend(SimilarityBackend):
    """Bi-encoder adapter: ``encode(texts) -> 2-D array``; cosine mapped to [0, 1]."""

    def __init__(self, encode: Callable[[list[str]], np.ndarray]):
        self.encode = encode
        self._cache: dict[str, np.ndarray] = {}

    def _embed(self, texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            for text, vec in zip(missing, np.asarray(self.encode(missing), dtype=float)):
                norm = np.linalg.norm(vec)
                self._cache[text] = vec / norm if norm else vec
        return np.array([self._cache[t] for t in texts])

    def fit(self, corpus: Sequence[str]) -> EmbeddingBackend:
        if corpus:
            self._embed(list(corpus))
        return self

    def score_many(self, query: str, candidates: Sequence[str]) -> np.ndarray:
        if not candidates:
            return np.zeros(0)
        q = self._embed([query])[0]
        cos = self._embed(list(candidates)) @ q
        return np.clip((cos + 1.0) / 2.0, 0.0, 1.0)

    def score(self, query: str, candidate: str) -> float:
        return float(self.score_many(query, [candidate])[0])


class CrossEncoderBackend(SimilarityBackend):
    """Cross-encoder adapter: ``predict(pairs) -> scores`` already in [0, 1]."""

    def __init__(self, predict: Callable[[list[tuple[str, str]]], Iterable[float]]):
        self.predict = predict

    def score_many(self, query: str, candidates: Sequence[str]) -> np.ndarray:
        if not candidates:
            return np.zeros(0)
        scores = np.asarray(list(self.predict([(query, c) for c in candidates])), dtype=float)
        return np.clip(scores, 0.0, 1.0)

    def score(self, query: str, candidate: str) -> float:
        return float(self.score_many(query, [candidate])[0])


# ---------------------------------------------------------------------------
# Retrievers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RetrieverConfig:
    kind: str = EDIT_DISTANCE
    top_k: int = 50
    backend: SimilarityBackend | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in (EDIT_DISTANCE, SIMILARITY_BACKEND):
            raise ValueError(f"unknown retriever kind {self.kind!r}")
        if not isinstance(self.top_k, int) or self.top_k < 1:
            raise ValueError(f"top_k must be a positive integer, got {self.top_k!r}")


def _order(scores: np.ndarray, ascending: bool) -> list[int]:
    """Indices sorted by score, ties kept in input order."""
    keys = scores if ascending else -scores
    return [int(i) for i in np.argsort(keys, kind="stable")]


class _Ranker:
    def __init__(self, texts: Sequence[str], config: RetrieverConfig):
        self.config = config
        self.texts = [t.lower() for t in texts]
        if config.kind == EDIT_DISTANCE:
            self.encoded = _EncodedTexts(self.texts)
            self.backend = None
        else:
            self.backend = config.backend or TfidfBackend()
            self.backend.fit(self.texts)

    def rank(self, query: str, subset: Sequence[int] | None = None) -> list[int]:
        query = query.lower()
        idx = list(range(len(self.texts))) if subset is None else list(subset)
        if not idx:
            return []
        if self.backend is None:
            scores = self.encoded.normalized(query)[idx]
            return [idx[i] for i in _order(scores, ascending=True)]
        scores = self.backend.score_many(query, [self.texts[i] for i in idx])
        return [idx[i] for i in _order(np.asarray(scores, dtype=float), ascending=False)]


class ActivityRetriever:
    """Top-k catalog activities for an utterance; prior activities always first."""

    def __init__(self, catalog: Sequence[ActivityEntry], config: RetrieverConfig):
        self.catalog = list(catalog)
        self.config = config
        self.by_id = {e.id: e for e in self.catalog}
        self._ranker = _Ranker([e.description for e in self.catalog], config)

    def retrieve(self, utterance: str, prior: Program | None = None, top_k: int | None = None) -> list[ActivityEntry]:
        if not utterance.strip():
            raise ValueError("utterance must be non-empty")
        k = top_k or self.config.top_k
        head = []
        if prior is not None:
            head = [self.by_id[a] for a in dict.fromkeys(collect_activities(prior)) if a in self.by_id]
        chosen = {e.id for e in head}
        ranked = [self.catalog[i] for i in self._ranker.rank(utterance) if self.catalog[i].id not in chosen]
        return (head + ranked)[:k]


class DemoRetriever:
    """Top-k demonstrations, shortlisted by whether they carry a prior program."""

    def __init__(self, demos: Sequence[Demonstration], config: RetrieverConfig):
        self.demos = list(demos)
        self.config = config
        self._ranker = _Ranker([d.utterance for d in self.demos], config)

    def eligible(self, prior: Program | None) -> list[int]:
        want_prior = prior is not None
        return [i for i, d in enumerate(self.demos) if (d.prior_sequence is not None) == want_prior]

    def retrieve(
        self,
        utterance: str,
        prior: Program | None = None,
        top_k: int | None = None,
        exclude: Callable[[Demonstration], bool] | None = None,
    ) -> list[Demonstration]:
        if not utterance.strip():
            raise ValueError("utterance must be non-empty")
        pool = [i for i in self.eligible(prior) if exclude is None or not exclude(self.demos[i])]
        ranked = self._ranker.rank(utterance, pool)
        return [self.demos[i] for i in ranked[: top_k or self.config.top_k]]


def retrieve_activities(
    utterance: str, prior: Program | None, catalog: Sequence[ActivityEntry], config: RetrieverConfig
) -> list[ActivityEntry]:
    return ActivityRetriever(catalog, config).retrieve(utterance, prior)


def retrieve_demos(
    utterance: str, prior: Program | None, demos: Sequence[Demonstration], config: RetrieverConfig
) -> list[Demonstration]:
    return DemoRetriever(demos, config).retrieve(utterance, prior)


def activities_recall(retrieved: Iterable[ActivityEntry | str], gold: Iterable[str]) -> float:
    """Share of gold activity ids present among the retrieved ones."""
    gold_set = set(gold)
    if not gold_set:
        return 1.0
    ids = {r.id if isinstance(r, ActivityEntry) else r for r in retrieved}
    return len(ids & gold_set) / len(gold_set)
