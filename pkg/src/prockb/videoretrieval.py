"""Extrinsic evaluation: retrieve how-to videos with hierarchy-expanded queries.

Videos are caption documents labeled with the goal they demonstrate. A query
is a weighted bag of clauses: the goal text plus optional step clauses, scored
rel(q, v) = w_g * bm25(goal, v) + w_s * sum_s bm25(s, v). Query levels:

  L0      goal only
  L1      goal + the article's immediate steps (w_g=1.0, w_s=0.1)
  FIL_L1  goal + greedily filtered steps (w_g=1.0, w_s=0.5)
  FIL_L2  like FIL_L1 but the candidate pool adds the steps of each linked
          child article (grandchildren from the knowledge base)

Filtering is greedy hill climbing over per-goal training videos: starting
from the bare goal, repeatedly add the unused candidate step with the lowest
cost, keep it only if it strictly improves on the best cost so far, and stop
otherwise. The round counter starts at min(n_candidates, cap) and runs to 0
inclusive, so at most min(n, cap) + 1 clauses can be accepted.
"""

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, normalize_text
from .errors import DataError
from .rerank import UNLINKABLE
from .textsearch import TextIndex

L0 = "L0"
L1 = "L1"
FIL_L1 = "FIL_L1"
FIL_L2 = "FIL_L2"
LEVELS = (L0, L1, FIL_L1, FIL_L2)

L1_WEIGHTS = (1.0, 0.1)
FIL_WEIGHTS = (1.0, 0.5)
DEFAULT_CAP = 15
DEFAULT_VIDEO_RATIOS = (7.5, 1.25, 1.25)


@dataclass(frozen=True)
class VideoDoc:
    video_id: str
    goal_id: str
    caption: str


def load_videos(path: str | Path) -> list[VideoDoc]:
    """Read video JSONL: ``{"video_id", "goal_id", "caption"}`` per line."""
    videos = []
    seen = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON: {exc.msg}") from None
            try:
                vid = str(rec["video_id"])
                gid = str(rec["goal_id"])
                caption = normalize_text(str(rec["caption"]))
            except KeyError as exc:
                raise DataError(f"{path}: line {lineno}: missing field {exc.args[0]!r}") from None
            if vid in seen:
                raise DataError(f"{path}: line {lineno}: duplicate video_id {vid!r}")
            seen.add(vid)
            videos.append(VideoDoc(video_id=vid, goal_id=gid, caption=caption))
    return videos


@dataclass
class VideoSplits:
    """Per-goal train/dev/test video ids, disjoint, union = all of the goal's videos."""

    train: dict[str, list[str]]
    dev: dict[str, list[str]]
    test: dict[str, list[str]]
    seed: int
    ratios: tuple[float, float, float]

    def part(self, name: str) -> dict[str, list[str]]:
        try:
            return {"train": self.train, "dev": self.dev, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split part {name!r}") from None

    def goals(self) -> list[str]:
        return sorted(self.train)


def split_videos(
    videos: Sequence[VideoDoc],
    seed: int = 0,
    ratios: tuple[float, float, float] = DEFAULT_VIDEO_RATIOS,
) -> VideoSplits:
    """Shuffle each goal's videos and cut train/dev/test contiguously.

    Floor rounding on dev and test; the leftover stays in train. Goals are
    processed in sorted order so the split is deterministic for a seed.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be 3 positive numbers, got {ratios}")
    per_goal: dict[str, list[str]] = {}
    for video in videos:
        per_goal.setdefault(video.goal_id, []).append(video.video_id)
    rng = random.Random(seed)
    total = sum(ratios)
    train: dict[str, list[str]] = {}
    dev: dict[str, list[str]] = {}
    test: dict[str, list[str]] = {}
    for goal_id in sorted(per_goal):
        ids = per_goal[goal_id]
        rng.shuffle(ids)
        n = len(ids)
        n_dev = int(n * ratios[1] / total)
        n_test = int(n * ratios[2] / total)
        n_train = n - n_dev - n_test
        train[goal_id] = ids[:n_train]
        dev[goal_id] = ids[n_train : n_train + n_dev]
        test[goal_id] = ids[n_train + n_dev :]
    return VideoSplits(train=train, dev=dev, test=test, seed=seed, ratios=tuple(ratios))


def build_video_index(videos: Sequence[VideoDoc], **params) -> TextIndex:
    return TextIndex([(v.video_id, v.caption) for v in videos], **params)


# ---------------------------------------------------------------------------
# Queries

@dataclass(frozen=True)
class Query:
    goal_id: str
    goal_text: str
    steps: tuple[str, ...]
    w_g: float
    w_s: float
    level: str


def make_query(corpus: Corpus, goal_id: str, level: str) -> Query:
    """Unfiltered query: L0 is the bare goal, L1 adds the article's steps."""
    article = corpus.article(goal_id)
    if level == L0:
        return Query(goal_id, article.title, (), w_g=1.0, w_s=0.0, level=L0)
    if level == L1:
        steps = tuple(s.text for s in article.steps)
        return Query(goal_id, article.title, steps, w_g=L1_WEIGHTS[0], w_s=L1_WEIGHTS[1], level=L1)
    raise ValueError(f"make_query builds L0/L1 queries, got {level!r}")


def candidate_pool(
    corpus: Corpus,
    goal_id: str,
    level: str,
    links: Mapping[str, str] | None = None,
) -> list[str]:
    """Candidate step clauses for filtering.

    FIL_L1: the article's own steps. FIL_L2: own steps plus, for each step
    linked to another article in `links`, that article's steps (grandchildren
    discovered by the knowledge base). Duplicate texts are kept once, first
    occurrence wins, article order preserved.
    """
    article = corpus.article(goal_id)
    texts = [s.text for s in article.steps]
    if level == FIL_L2:
        if links is None:
            raise ValueError("FIL_L2 pools need a step -> goal link map")
        for step in article.steps:
            target = links.get(step.step_id)
            if target and target != UNLINKABLE and target in corpus:
                texts.extend(s.text for s in corpus.article(target).steps)
    elif level != FIL_L1:
        raise ValueError(f"candidate pools exist for FIL_L1/FIL_L2, got {level!r}")
    seen = set()
    pool = []
    for text in texts:
        if text not in seen:
            seen.add(text)
            pool.append(text)
    return pool


def rel(index: TextIndex, query: Query, video_id: str) -> float:
    """Weighted BM25 relevance of one video against a multi-clause query."""
    total = query.w_g * index.score(query.goal_text, video_id)
    for clause in query.steps:
        total += query.w_s * index.score(clause, video_id)
    return total


@dataclass
class Ranking:
    goal_id: str
    entries: list[tuple[str, float]]  # (video_id, score), best first
    _ranks: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        if not self._ranks:
            self._ranks = {vid: i for i, (vid, _) in enumerate(self.entries, 1)}

    def rank(self, video_id: str) -> int:
        try:
            return self._ranks[video_id]
        except KeyError:
            raise KeyError(f"video {video_id!r} not in ranking") from None


class ClauseScorer:
    """Caches per-clause BM25 score vectors so query scoring is a few adds."""

    def __init__(self, index: TextIndex):
        self.index = index
        self._cache: dict[str, np.ndarray] = {}

    def clause_scores(self, text: str) -> np.ndarray:
        vec = self._cache.get(text)
        if vec is None:
            vec = self.index.score_all(text)
            self._cache[text] = vec
        return vec

    def query_scores(self, query: Query) -> np.ndarray:
        scores = query.w_g * self.clause_scores(query.goal_text)
        for clause in query.steps:
            scores = scores + query.w_s * self.clause_scores(clause)
        return scores

    def rank_order(self, query: Query) -> np.ndarray:
        scores = self.query_scores(query)
        return np.lexsort((self.index.id_rank, -scores))


def rank_videos(index: TextIndex, query: Query, scorer: ClauseScorer | None = None) -> Ranking:
    """Rank the whole video pool by rel, ties by ascending video_id."""
    if index.n_docs == 0:
        raise ValueError("cannot rank an empty video pool")
    scorer = scorer or ClauseScorer(index)
    scores = scorer.query_scores(query)
    order = np.lexsort((index.id_rank, -scores))
    entries = [(index.doc_ids[i], float(scores[i])) for i in order]
    return Ranking(goal_id=query.goal_id, entries=entries)


# ---------------------------------------------------------------------------
# Hill-climbing filter

@dataclass
class FilterTrace:
    clauses: list[str]  # accepted step clauses, in acceptance order
    accepted_costs: list[float]  # baseline cost first, then each accepted cost
    rounds: int

    @property
    def baseline_cost(self) -> float:
        return self.accepted_costs[0]

    @property
    def final_cost(self) -> float:
        return self.accepted_costs[-1]


def hill_climb(
    goal_text: str,
    candidates: Sequence[str],
    cost_fn: Callable[[list[str]], float],
    cap: int = DEFAULT_CAP,
) -> FilterTrace:
    """Greedy clause selection.

    Start from [goal]. Each round, evaluate the cost of adding every unused
    candidate, take the cheapest (first one wins ties), and accept it only if
    it strictly beats the best cost so far; otherwise stop. The round counter
    runs from min(n, cap) down to 0 inclusive.
    """
    best_query = [goal_text]
    min_cost = cost_fn(best_query)
    accepted = [min_cost]
    r = min(len(candidates), cap)
    rounds = 0
    while r >= 0:
        rounds += 1
        in_cost = math.inf
        in_query: list[str] | None = None
        for cand in candidates:
            if cand in best_query:
                continue
            trial = best_query + [cand]
            cost = cost_fn(trial)
            if cost < in_cost:
                in_cost = cost
                in_query = trial
        if in_cost < min_cost and in_query is not None:
            min_cost = in_cost
            best_query = in_query
            accepted.append(min_cost)
        else:
            break
        r -= 1
    return FilterTrace(clauses=best_query[1:], accepted_costs=accepted, rounds=rounds)


def make_cost_fn(
    index: TextIndex,
    relevant_ids: Sequence[str],
    w_g: float,
    w_s: float,
    kind: str = "mean_rank",
    scorer: ClauseScorer | None = None,
) -> Callable[[list[str]], float]:
    """Cost of a clause list over a set of relevant videos.

    mean_rank: average rank of the relevant videos in the full-pool ranking
    (lower is better). neg_recall50: negative fraction of relevant videos
    ranked in the top 50.
    """
    if kind not in ("mean_rank", "neg_recall50"):
        raise ValueError(f"unknown cost kind {kind!r}")
    if not relevant_ids:
        raise ValueError("cost function needs at least one relevant video")
    scorer = scorer or ClauseScorer(index)
    rel_idx = np.array([index.doc_idx(v) for v in relevant_ids], dtype=np.int64)

    def cost(clauses: list[str]) -> float:
        query = Query("", clauses[0], tuple(clauses[1:]), w_g=w_g, w_s=w_s, level="")
        order = scorer.rank_order(query)
        ranks = np.empty(index.n_docs, dtype=np.int64)
        ranks[order] = np.arange(1, index.n_docs + 1)
        rel_ranks = ranks[rel_idx]
        if kind == "mean_rank":
            return float(rel_ranks.mean())
        return -float((rel_ranks <= 50).sum() / len(rel_ranks))

    return cost


def filter_steps(
    goal_id: str,
    goal_text: str,
    candidates: Sequence[str],
    train_video_ids: Sequence[str],
    index: TextIndex,
    weights: tuple[float, float] = FIL_WEIGHTS,
    cap: int = DEFAULT_CAP,
    cost_kind: str = "mean_rank",
    level: str = FIL_L1,
) -> Query:
    """Build a filtered query by hill climbing on the goal's training videos."""
    if not train_video_ids:
        raise ValueError(f"goal {goal_id!r} has no training videos to filter against")
    w_g, w_s = weights
    scorer = ClauseScorer(index)
    cost_fn = make_cost_fn(index, train_video_ids, w_g, w_s, kind=cost_kind, scorer=scorer)
    trace = hill_climb(goal_text, candidates, cost_fn, cap=cap)
    return Query(goal_id, goal_text, tuple(trace.clauses), w_g=w_g, w_s=w_s, level=level)


# ---------------------------------------------------------------------------
# Metrics

@dataclass
class VRMetrics:
    recall: dict[int, float]
    precision: dict[int, float]
    mean_rank: float


def vr_metrics(
    rankings: Mapping[str, Ranking],
    gold: Mapping[str, Iterable[str]],
    ns: Sequence[int],
) -> VRMetrics:
    """Mean recall@N, precision@N, and mean rank over goals.

    Per goal g with relevant set V_g and rank function r over the full pool:
    recall@N averages |{v in V_g : r(v) <= N}| / |V_g|, precision@N averages
    the same count over N, MR averages the mean rank of V_g.
    """
    goals = sorted(gold)
    if not goals:
        raise ValueError("no goals to evaluate")
    recall = {n: 0.0 for n in ns}
    precision = {n: 0.0 for n in ns}
    mr = 0.0
    for goal_id in goals:
        relevant = list(gold[goal_id])
        if not relevant:
            raise ValueError(f"goal {goal_id!r} has an empty relevant set")
        try:
            ranking = rankings[goal_id]
        except KeyError:
            raise KeyError(f"no ranking for goal {goal_id!r}") from None
        ranks = [ranking.rank(v) for v in relevant]
        for n in ns:
            within = sum(1 for r in ranks if r <= n)
            recall[n] += within / len(relevant)
            precision[n] += within / n
        mr += sum(ranks) / len(ranks)
    m = len(goals)
    return VRMetrics(
        recall={n: recall[n] / m for n in ns},
        precision={n: precision[n] / m for n in ns},
        mean_rank=mr / m,
    )


def write_queries(path: str | Path, queries: Sequence[Query]) -> None:
    payload = [
        {
            "goal_id": q.goal_id,
            "goal": q.goal_text,
            "steps": list(q.steps),
            "w_g": q.w_g,
            "w_s": q.w_s,
            "level": q.level,
        }
        for q in queries
    ]
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True, ensure_ascii=False, indent=2)
        handle.write("\n")


def read_queries(path: str | Path) -> list[Query]:
    with open(path, encoding="utf-8") as handle:
        payload = json.load(handle)
    return [
        Query(
            goal_id=item["goal_id"],
            goal_text=item["goal"],
            steps=tuple(item["steps"]),
            w_g=item["w_g"],
            w_s=item["w_s"],
            level=item["level"],
        )
        for item in payload
    ]
