"""Stage 1: exact top-k goal retrieval by cosine over an embedding matrix.

The index is a row-normalized matrix of goal vectors, so cosine top-k reduces
to inner-product top-k. Search is an exact full scan; ties break by ascending
goal_id so candidate lists are stable across runs.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .corpus import Corpus
from .embedding import EmbeddingStore
from .errors import DataError

DEFAULT_K = 30


class Candidate(NamedTuple):
    goal_id: str
    sim1: float


@dataclass(frozen=True)
class CandidateList:
    step_id: str
    entries: tuple[Candidate, ...]
    k: int


class GoalIndex:
    """Searchable goal embeddings: ids in ascending order, unit-norm rows."""

    def __init__(self, goal_ids: list[str], matrix: np.ndarray, zero_ids: frozenset[str]):
        self.goal_ids = goal_ids
        self.goal_id_set = frozenset(goal_ids)
        self.matrix = matrix
        self.zero_ids = zero_ids

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.goal_ids)


def build_index(store: EmbeddingStore, goal_ids: Iterable[str]) -> GoalIndex:
    """Stack goal vectors into a normalized matrix. Zero vectors are kept but
    flagged; they score 0 against every query."""
    ordered = sorted(set(goal_ids))
    matrix = np.zeros((len(ordered), store.dim), dtype=np.float64)
    zero_ids = set()
    for row, goal_id in enumerate(ordered):
        vec = store[goal_id]
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            zero_ids.add(goal_id)
        else:
            matrix[row] = vec / norm
    return GoalIndex(goal_ids=ordered, matrix=matrix, zero_ids=frozenset(zero_ids))


def topk(
    index: GoalIndex,
    step_vec: np.ndarray,
    k: int,
    exclude: set[str] | None = None,
    step_id: str = "",
) -> CandidateList:
    """Exact top-k goals by cosine, ties by ascending goal_id.

    Goals in `exclude` are never returned (used to forbid self-links). Raises
    ValueError when k exceeds the goals available after exclusion.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(step_vec, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query dim {q.shape} does not match index dim {index.dim}")
    excluded = exclude or set()
    available = len(index) - sum(1 for g in excluded if g in index.goal_id_set)
    if k > available:
        raise ValueError(f"k={k} exceeds {available} goals available after exclusion")

    norm = float(np.linalg.norm(q))
    unit = q / norm if norm > 0.0 else q
    scores = index.matrix @ unit
    # Rows are in ascending goal_id order, so a stable sort on -score breaks
    # ties by goal_id for free.
    order = np.argsort(-scores, kind="stable")
    entries: list[Candidate] = []
    for row in order:
        goal_id = index.goal_ids[row]
        if goal_id in excluded:
            continue
        entries.append(Candidate(goal_id, float(scores[row])))
        if len(entries) == k:
            break
    return CandidateList(step_id=step_id, entries=tuple(entries), k=k)


def retrieve_all(
    index: GoalIndex,
    store: EmbeddingStore,
    corpus: Corpus,
    k: int = DEFAULT_K,
    exclude_parent: bool = True,
    workers: int = 1,
) -> list[CandidateList]:
    """Run topk for every corpus step, in corpus order."""

    def one(step):
        exclude = {step.parent_goal_id} if exclude_parent else None
        return topk(index, store[step.step_id], k, exclude=exclude, step_id=step.step_id)

    steps = list(corpus.steps())
    if workers <= 1:
        return [one(s) for s in steps]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, steps))


def write_candidates(path: str | Path, lists: Iterable[CandidateList]) -> None:
    """Dump candidate lists as TSV: step_id, rank, goal_id, sim1."""
    with open(path, "w", encoding="utf-8") as handle:
        for cand in lists:
            for rank, (goal_id, sim1) in enumerate(cand.entries, 1):
                handle.write(f"{cand.step_id}\t{rank}\t{goal_id}\t{sim1!r}\n")


def read_candidates(path: str | Path) -> list[CandidateList]:
    per_step: dict[str, list[tuple[int, Candidate]]] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 4:
                raise DataError(f"{path}: line {lineno}: expected 4 columns")
            step_id, rank, goal_id, sim1 = parts[0], int(parts[1]), parts[2], float(parts[3])
            per_step.setdefault(step_id, []).append((rank, Candidate(goal_id, sim1)))
    lists = []
    for step_id, ranked in per_step.items():
        ranked.sort(key=lambda item: item[0])
        entries = tuple(cand for _, cand in ranked)
        lists.append(CandidateList(step_id=step_id, entries=entries, k=len(entries)))
    return lists
