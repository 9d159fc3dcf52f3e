"""Procedure corpus: goal articles with ordered steps, read from JSONL.

One article per line: ``{"id": ..., "title": ..., "steps": [{"id": ..., "text": ...}, ...]}``.
Titles are the goals; steps are the goal's children, in article order. All text
is NFC-normalized with internal whitespace collapsed; case is preserved unless
lowercasing is requested. A corpus is immutable once loaded and safe to share
across workers.
"""

import json
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DataError

CONTEXT_MODES = ("none", "goal", "surround", "both")

# Reserved for the synthetic placeholder goal used by the reranker; a corpus id
# equal to it would make link dumps ambiguous.
RESERVED_IDS = frozenset({"UNLINKABLE"})


def normalize_text(text: str, lowercase: bool = False) -> str:
    """NFC-normalize and collapse whitespace runs; optionally lowercase."""
    out = " ".join(unicodedata.normalize("NFC", text).split())
    return out.lower() if lowercase else out


@dataclass(frozen=True)
class Step:
    step_id: str
    text: str
    parent_goal_id: str
    position: int


@dataclass(frozen=True)
class Article:
    goal_id: str
    title: str
    steps: tuple[Step, ...]


@dataclass
class Corpus:
    articles: tuple[Article, ...]
    _by_goal: dict[str, Article] = field(repr=False, compare=False)
    _by_step: dict[str, Step] = field(repr=False, compare=False)

    @property
    def n_goals(self) -> int:
        return len(self.articles)

    @property
    def n_steps(self) -> int:
        return len(self._by_step)

    def goal_ids(self) -> list[str]:
        return [a.goal_id for a in self.articles]

    def article(self, goal_id: str) -> Article:
        try:
            return self._by_goal[goal_id]
        except KeyError:
            raise KeyError(f"unknown goal_id {goal_id!r}") from None

    def step(self, step_id: str) -> Step:
        try:
            return self._by_step[step_id]
        except KeyError:
            raise KeyError(f"unknown step_id {step_id!r}") from None

    def steps(self) -> Iterator[Step]:
        for article in self.articles:
            yield from article.steps

    def __contains__(self, goal_id: str) -> bool:
        return goal_id in self._by_goal


def corpus_from_records(records: Iterable[dict], lowercase: bool = False) -> Corpus:
    """Assemble and validate a Corpus from article dicts.

    Each record needs ``id``, ``title`` and a non-empty ``steps`` list of
    ``{"id", "text"}`` dicts. Raises DataError on duplicate ids, empty titles
    or step texts (after normalization), or malformed records.
    """
    articles: list[Article] = []
    by_goal: dict[str, Article] = {}
    by_step: dict[str, Step] = {}

    for lineno, rec in enumerate(records, 1):
        where = f"record {lineno}"
        if not isinstance(rec, dict):
            raise DataError(f"{where}: expected an object, got {type(rec).__name__}")
        try:
            goal_id = _as_id(rec["id"], where)
            title = normalize_text(str(rec["title"]), lowercase)
            raw_steps = rec["steps"]
        except KeyError as exc:
            raise DataError(f"{where}: missing field {exc.args[0]!r}") from None
        if not title:
            raise DataError(f"{where}: empty title for goal_id {goal_id!r}")
        if goal_id in by_goal:
            raise DataError(f"{where}: duplicate goal_id {goal_id!r}")
        if not isinstance(raw_steps, list) or not raw_steps:
            raise DataError(f"{where}: article {goal_id!r} has an empty step list")

        steps = []
        for pos, raw in enumerate(raw_steps):
            if not isinstance(raw, dict):
                raise DataError(f"{where}: step {pos} of {goal_id!r} is not an object")
            try:
                step_id = _as_id(raw["id"], where)
                text = normalize_text(str(raw["text"]), lowercase)
            except KeyError as exc:
                raise DataError(
                    f"{where}: step {pos} of {goal_id!r} missing field {exc.args[0]!r}"
                ) from None
            if not text:
                raise DataError(f"{where}: step {step_id!r} is empty after normalization")
            if step_id in by_step:
                raise DataError(f"{where}: duplicate step_id {step_id!r}")
            step = Step(step_id=step_id, text=text, parent_goal_id=goal_id, position=pos)
            by_step[step_id] = step
            steps.append(step)

        article = Article(goal_id=goal_id, title=title, steps=tuple(steps))
        by_goal[goal_id] = article
        articles.append(article)

    # Goal and step vectors share one id namespace downstream.
    overlap = by_goal.keys() & by_step.keys()
    if overlap:
        raise DataError(f"ids used as both goal_id and step_id: {sorted(overlap)[:5]}")

    return Corpus(articles=tuple(articles), _by_goal=by_goal, _by_step=by_step)


def _as_id(value, where: str) -> str:
    if isinstance(value, bool) or not isinstance(value, (str, int)):
        raise DataError(f"{where}: id must be a string or integer, got {value!r}")
    out = str(value)
    if not out:
        raise DataError(f"{where}: empty id")
    if out in RESERVED_IDS:
        raise DataError(f"{where}: id {out!r} is reserved")
    return out


def load_corpus(path: str | Path, lowercase: bool = False) -> Corpus:
    """Load a JSONL corpus file. Errors carry the offending line number."""

    def records():
        with open(path, encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, 1):
                if not line.strip():
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"line {lineno}: malformed JSON: {exc.msg}") from None

    try:
        return corpus_from_records(records(), lowercase=lowercase)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write the corpus back out as JSONL (normalized text, stable order)."""
    with open(path, "w", encoding="utf-8") as handle:
        for article in corpus.articles:
            rec = {
                "id": article.goal_id,
                "title": article.title,
                "steps": [{"id": s.step_id, "text": s.text} for s in article.steps],
            }
            handle.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


@dataclass(frozen=True)
class StepContext:
    """Context text around one step: its goal and/or neighboring steps."""

    mode: str
    goal_text: str | None = None
    prev_steps: tuple[str, ...] = ()
    next_steps: tuple[str, ...] = ()

    def is_empty(self) -> bool:
        return self.goal_text is None and not self.prev_steps and not self.next_steps


def context_of(corpus: Corpus, step_id: str, mode: str, window: int = 1) -> StepContext:
    """Extract a step's context. Neighbors missing at article edges are dropped."""
    if mode not in CONTEXT_MODES:
        raise ValueError(f"unknown context mode {mode!r}; expected one of {CONTEXT_MODES}")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    step = corpus.step(step_id)
    if mode == "none":
        return StepContext(mode=mode)

    article = corpus.article(step.parent_goal_id)
    goal_text = article.title if mode in ("goal", "both") else None
    prev: tuple[str, ...] = ()
    nxt: tuple[str, ...] = ()
    if mode in ("surround", "both"):
        pos = step.position
        lo = max(0, pos - window)
        prev = tuple(s.text for s in article.steps[lo:pos])
        nxt = tuple(s.text for s in article.steps[pos + 1 : pos + 1 + window])
    return StepContext(mode=mode, goal_text=goal_text, prev_steps=prev, next_steps=nxt)


def validation_report(corpus: Corpus) -> str:
    """Line-oriented summary of corpus shape, for eyeballing a load."""
    sizes = [len(a.steps) for a in corpus.articles]
    titles = [a.title for a in corpus.articles]
    lines = [
        f"articles\t{corpus.n_goals}",
        f"steps\t{corpus.n_steps}",
        f"min_steps_per_article\t{min(sizes)}",
        f"max_steps_per_article\t{max(sizes)}",
        f"duplicate_titles\t{len(titles) - len(set(titles))}",
    ]
    return "\n".join(lines) + "\n"
