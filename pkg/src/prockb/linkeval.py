"""Intrinsic evaluation: gold hyperlink splits and recall@N.

Gold data is a TSV of annotated step -> goal links. Precision is not
measured: every step has exactly one gold goal, so recall@N over ranked
candidate lists is the whole story.
"""

import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Corpus
from .errors import DataError

logger = logging.getLogger(__name__)

DEFAULT_RATIOS = (7, 2, 1)


@dataclass(frozen=True)
class GoldLink:
    step_id: str
    gold_goal_id: str


@dataclass
class Split:
    train: list[GoldLink]
    dev: list[GoldLink]
    test: list[GoldLink]
    seed: int
    ratios: tuple[float, ...]

    def part(self, name: str) -> list[GoldLink]:
        try:
            return {"train": self.train, "dev": self.dev, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split part {name!r}") from None


def load_gold_links(path: str | Path, corpus: Corpus | None = None) -> list[GoldLink]:
    """Read TSV rows ``step_id<TAB>gold_goal_id``.

    With a corpus, links whose step or goal does not resolve are dropped with
    a warning; they can never be retrieved.
    """
    links = []
    dropped = 0
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}: line {lineno}: expected 2 columns")
            link = GoldLink(step_id=parts[0], gold_goal_id=parts[1])
            if corpus is not None:
                try:
                    corpus.step(link.step_id)
                    corpus.article(link.gold_goal_id)
                except KeyError:
                    dropped += 1
                    continue
            links.append(link)
    if dropped:
        logger.warning("dropped %d gold links that do not resolve in the corpus", dropped)
    return links


def write_gold_links(path: str | Path, links: Iterable[GoldLink]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for link in links:
            handle.write(f"{link.step_id}\t{link.gold_goal_id}\n")


def split_links(
    links: Sequence[GoldLink],
    ratios: tuple[float, ...] = DEFAULT_RATIOS,
    seed: int = 0,
) -> Split:
    """Deterministic shuffle then contiguous train/dev/test partition.

    Sizes follow the ratios with floor rounding; the leftover goes to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be 3 positive numbers, got {ratios}")
    if len(links) < len(ratios):
        raise DataError(f"cannot split {len(links)} links into {len(ratios)} parts")
    shuffled = list(links)
    random.Random(seed).shuffle(shuffled)
    total = sum(ratios)
    n = len(shuffled)
    n_dev = int(n * ratios[1] / total)
    n_test = int(n * ratios[2] / total)
    n_train = n - n_dev - n_test
    return Split(
        train=shuffled[:n_train],
        dev=shuffled[n_train : n_train + n_dev],
        test=shuffled[n_train + n_dev :],
        seed=seed,
        ratios=tuple(ratios),
    )


def recall_at(
    rankings: Mapping[str, Sequence[str]],
    gold: Iterable[GoldLink],
    n: int,
) -> float:
    """Fraction of gold steps whose goal appears in the top n of its ranking.

    Placeholder (UNLINKABLE) entries simply occupy rank positions and never
    match. The denominator is every evaluated step.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    hits = 0
    total = 0
    for link in gold:
        try:
            ranking = rankings[link.step_id]
        except KeyError:
            raise KeyError(f"no ranking for gold step {link.step_id!r}") from None
        total += 1
        if link.gold_goal_id in ranking[:n]:
            hits += 1
    if total == 0:
        raise ValueError("no gold links to evaluate")
    return hits / total


def recall_report(
    rankings: Mapping[str, Sequence[str]],
    gold: Iterable[GoldLink],
    ns: Sequence[int],
) -> dict[int, float]:
    gold = list(gold)
    return {n: recall_at(rankings, gold, n) for n in ns}
