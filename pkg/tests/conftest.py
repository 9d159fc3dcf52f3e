"""Shared corpus builders for the test suite."""

import json

import pytest

from prockb.corpus import Corpus, corpus_from_records


def make_corpus(records: list[dict]) -> Corpus:
    return corpus_from_records(records)


def two_article_records() -> list[dict]:
    return [
        {
            "id": "g1",
            "title": "Choose a Camera",
            "steps": [
                {"id": "s1", "text": "set a budget"},
                {"id": "s2", "text": "buy a camera"},
                {"id": "s3", "text": "test the camera"},
            ],
        },
        {
            "id": "g2",
            "title": "Make Videos",
            "steps": [
                {"id": "s4", "text": "purchase a camera"},
                {"id": "s5", "text": "set up lighting"},
            ],
        },
    ]


def identity_records(n: int = 50, fillers: int = 2) -> tuple[list[dict], dict[str, str]]:
    """n articles where each probe step copies the next article's title verbatim.

    Returns (records, gold step->goal map for the probe steps).
    """
    records = []
    gold = {}
    for i in range(n):
        target = (i + 1) % n
        probe_id = f"a{i:02d}_probe"
        steps = [{"id": probe_id, "text": _title(target)}]
        for j in range(fillers):
            steps.append({"id": f"a{i:02d}_f{j}", "text": f"misc filler item {i:02d} {j}"})
        records.append({"id": f"a{i:02d}", "title": _title(i), "steps": steps})
        gold[probe_id] = f"a{target:02d}"
    return records, gold


def _title(i: int) -> str:
    return f"Perform Task{i:02d} Using Widget{i:02d}"


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for rec in records:
            handle.write(json.dumps(rec) + "\n")


@pytest.fixture
def two_article_corpus() -> Corpus:
    return make_corpus(two_article_records())
