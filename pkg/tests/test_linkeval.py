import logging

import pytest

from conftest import make_corpus, two_article_records
from prockb.errors import DataError
from prockb.linkeval import (
    GoldLink,
    load_gold_links,
    recall_at,
    recall_report,
    split_links,
    write_gold_links,
)


def links(n):
    return [GoldLink(f"s{i:05d}", f"g{i:05d}") for i in range(n)]


def test_split_sizes_ten():
    split = split_links(links(10), seed=1)
    assert (len(split.train), len(split.dev), len(split.test)) == (7, 2, 1)


def test_split_sizes_paper_scale():
    split = split_links(links(21_000), seed=1)
    assert (len(split.train), len(split.dev), len(split.test)) == (14_700, 4_200, 2_100)


def test_split_deterministic():
    a = split_links(links(100), seed=9)
    b = split_links(links(100), seed=9)
    assert a.train == b.train and a.dev == b.dev and a.test == b.test
    c = split_links(links(100), seed=10)
    assert a.train != c.train


def test_split_partition_property():
    data = links(53)
    split = split_links(data, seed=4)
    parts = [split.train, split.dev, split.test]
    rejoined = [link for part in parts for link in part]
    assert sorted(rejoined, key=lambda l: l.step_id) == data
    as_sets = [set(p) for p in parts]
    assert not (as_sets[0] & as_sets[1] or as_sets[0] & as_sets[2] or as_sets[1] & as_sets[2])


def test_split_too_small():
    with pytest.raises(DataError, match="cannot split"):
        split_links(links(2))


def test_split_bad_ratios():
    with pytest.raises(ValueError, match="ratios"):
        split_links(links(10), ratios=(7, -2, 1))


def test_recall_at_basic():
    rankings = {
        "s1": ["gold1", "x", "y"],
        "s2": ["x", "y", "gold2"],
        "s3": ["x", "gold3", "y"],
        "s4": ["x", "y", "z"],  # gold at rank 50: never present
    }
    gold = [GoldLink(f"s{i}", f"gold{i}") for i in range(1, 5)]
    assert recall_at(rankings, gold, 1) == 0.25
    assert recall_at(rankings, gold, 2) == 0.5
    assert recall_at(rankings, gold, 3) == 0.75
    assert recall_at(rankings, gold, 100) == 0.75


def test_recall_all_present():
    rankings = {"s1": ["a", "gold1"], "s2": ["gold2", "b"]}
    gold = [GoldLink("s1", "gold1"), GoldLink("s2", "gold2")]
    assert recall_at(rankings, gold, 2) == 1.0


def test_recall_non_decreasing_in_n():
    rankings = {f"s{i}": [f"g{j}" for j in range(30)] for i in range(20)}
    gold = [GoldLink(f"s{i}", f"g{(i * 7) % 35}") for i in range(20)]
    report = recall_report(rankings, gold, ns=[1, 2, 5, 10, 20, 30])
    values = [report[n] for n in sorted(report)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_unlinkable_occupies_rank():
    rankings = {"s1": ["UNLINKABLE", "gold1"]}
    gold = [GoldLink("s1", "gold1")]
    assert recall_at(rankings, gold, 1) == 0.0
    assert recall_at(rankings, gold, 2) == 1.0


def test_recall_missing_ranking():
    with pytest.raises(KeyError, match="s9"):
        recall_at({"s1": ["g"]}, [GoldLink("s9", "g")], 1)


def test_gold_links_io(tmp_path):
    path = tmp_path / "gold.tsv"
    data = [GoldLink("s1", "g1"), GoldLink("s4", "g2")]
    write_gold_links(path, data)
    assert load_gold_links(path) == data


def test_gold_links_drop_unresolvable(tmp_path, caplog):
    corpus = make_corpus(two_article_records())
    path = tmp_path / "gold.tsv"
    path.write_text("s1\tg2\nghost\tg1\ns2\tmissing\n")
    with caplog.at_level(logging.WARNING):
        loaded = load_gold_links(path, corpus=corpus)
    assert loaded == [GoldLink("s1", "g2")]
    assert "dropped 2" in caplog.text


def test_gold_links_malformed(tmp_path):
    path = tmp_path / "gold.tsv"
    path.write_text("s1\tg1\textra\n")
    with pytest.raises(DataError, match="line 1"):
        load_gold_links(path)


def test_reranked_recall_bounded_by_stage1_recall_at_k():
    # reranking only reorders the stage-1 candidates, so its recall@N can
    # never exceed stage-1 recall@k
    import numpy as np

    from conftest import identity_records
    from prockb.embedding import embed_corpus
    from prockb.rerank import LexicalFeatureSource, RerankModel, score_candidates
    from prockb.retrieval import build_index, retrieve_all

    records, gold = identity_records(25)
    corpus = make_corpus(records)
    store = embed_corpus(corpus, dim=16, seed=2)
    index = build_index(store, corpus.goal_ids())
    k = 8
    lists = [c for c in retrieve_all(index, store, corpus, k=k) if c.step_id in gold]
    gold_links = [GoldLink(s, g) for s, g in gold.items()]

    stage1 = {c.step_id: [e.goal_id for e in c.entries] for c in lists}
    rng = np.random.default_rng(0)
    model = RerankModel(w=rng.normal(size=8), lam=0.2)  # arbitrary reranker
    source = LexicalFeatureSource(corpus, dim=8)
    reranked = {c.step_id: score_candidates(model, c, source).ranked_ids() for c in lists}

    cap = recall_at(stage1, gold_links, k)
    for n in (1, 2, 4, k):
        assert recall_at(reranked, gold_links, n) <= cap
