import json

import pytest

from conftest import identity_records, write_jsonl
from prockb.cli import main


def run(argv):
    return main(argv)


@pytest.fixture
def identity_setup(tmp_path):
    """Corpus + gold links for the verbatim-copy linking scenario."""
    records, gold = identity_records(20)
    corpus_path = tmp_path / "corpus.jsonl"
    write_jsonl(corpus_path, records)
    gold_path = tmp_path / "gold.tsv"
    with open(gold_path, "w") as handle:
        for step_id, goal_id in gold.items():
            handle.write(f"{step_id}\t{goal_id}\n")
    return corpus_path, gold_path, gold


def test_end_to_end_linking(identity_setup, tmp_path):
    corpus_path, gold_path, gold = identity_setup
    base = ["--corpus", str(corpus_path), "--out-dir"]

    assert run(["build-index", "--corpus", str(corpus_path), "--dim", "64", "--seed", "7",
                "--out-dir", str(tmp_path / "ix")]) == 0
    embeddings = tmp_path / "ix" / "embeddings.txt"
    assert embeddings.exists()
    assert (tmp_path / "ix" / "corpus_report.txt").exists()

    assert run(["retrieve", "--corpus", str(corpus_path), "--embeddings", str(embeddings),
                "--k", "10", "--out-dir", str(tmp_path / "ret")]) == 0
    candidates = tmp_path / "ret" / "candidates.tsv"

    assert run(["train-reranker", "--corpus", str(corpus_path),
                "--candidates", str(candidates), "--gold", str(gold_path),
                "--d", "16", "--lr", "1.0", "--epochs", "10", "--batch", "8",
                "--seed", "0", "--out-dir", str(tmp_path / "tr")]) == 0
    model = tmp_path / "tr" / "model.txt"
    curve = (tmp_path / "tr" / "loss_curve.tsv").read_text().splitlines()
    assert curve[0] == "epoch\ttrain_loss\tdev_loss"
    assert len(curve) == 11

    assert run(["link", "--corpus", str(corpus_path), "--embeddings", str(embeddings),
                "--model", str(model), "--k", "10", "--rankings",
                "--out-dir", str(tmp_path / "ln")]) == 0
    rankings = tmp_path / "ln" / "rankings.tsv"
    links = (tmp_path / "ln" / "links.tsv").read_text().splitlines()
    outcome = {line.split("\t")[0]: line.split("\t")[1] for line in links}
    assert all(outcome[step] == goal for step, goal in gold.items())

    assert run(["eval-links", "--rankings", str(rankings), "--gold", str(gold_path),
                "--ns", "1,5,10", "--out-dir", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "recall.json").read_text())
    assert report["1"] == 1.0


def test_expand_cli(identity_setup, tmp_path):
    corpus_path, gold_path, _ = identity_setup
    run(["build-index", "--corpus", str(corpus_path), "--out-dir", str(tmp_path / "ix")])
    embeddings = tmp_path / "ix" / "embeddings.txt"
    run(["retrieve", "--corpus", str(corpus_path), "--embeddings", str(embeddings),
         "--k", "5", "--out-dir", str(tmp_path / "ret")])
    run(["train-reranker", "--corpus", str(corpus_path),
         "--candidates", str(tmp_path / "ret" / "candidates.tsv"), "--gold", str(gold_path),
         "--epochs", "5", "--lr", "1.0", "--out-dir", str(tmp_path / "tr")])
    code = run(["expand", "--corpus", str(corpus_path), "--embeddings", str(embeddings),
                "--model", str(tmp_path / "tr" / "model.txt"), "--k", "5",
                "--root", "a00", "--max-depth", "2", "--out-dir", str(tmp_path / "tree")])
    assert code == 0
    payload = json.loads((tmp_path / "tree" / "tree.json").read_text())
    assert payload["tree"]["goal_id"] == "a00"
    probe = payload["tree"]["steps"][0]
    assert probe["link"] == "a01"
    assert probe["children"]


def test_missing_input_exits_2(tmp_path, capsys):
    code = run(["build-index", "--corpus", str(tmp_path / "nope.jsonl"),
                "--out-dir", str(tmp_path / "out")])
    assert code == 2
    assert "nope.jsonl" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    assert run(["no-such-command", "--out-dir", "x"]) == 1
    assert run(["retrieve", "--bogus-flag"]) == 1
    assert run([]) == 1


def test_rerun_is_byte_identical(identity_setup, tmp_path):
    corpus_path, _, _ = identity_setup
    out = tmp_path / "ix"
    argv = ["build-index", "--corpus", str(corpus_path), "--dim", "32", "--seed", "3",
            "--out-dir", str(out)]
    assert run(argv) == 0
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert run(argv) == 0
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert first == second


def test_manifest_contents(identity_setup, tmp_path):
    corpus_path, _, _ = identity_setup
    out = tmp_path / "ix"
    run(["build-index", "--corpus", str(corpus_path), "--out-dir", str(out)])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "build-index"
    assert str(corpus_path) in manifest["inputs"]
    assert len(manifest["config_hash"]) == 64
    assert manifest["outputs"] == ["corpus_report.txt", "embeddings.txt"]
    assert "out_dir" not in manifest["config"]


def test_config_file_defaults_flags_win(identity_setup, tmp_path):
    corpus_path, _, _ = identity_setup
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"dim": 16, "seed": 9}))

    run(["--config", str(config), "build-index", "--corpus", str(corpus_path),
         "--out-dir", str(tmp_path / "a")])
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["dim"] == 16 and manifest["config"]["seed"] == 9

    run(["--config", str(config), "build-index", "--corpus", str(corpus_path),
         "--dim", "24", "--out-dir", str(tmp_path / "b")])
    manifest = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert manifest["config"]["dim"] == 24 and manifest["config"]["seed"] == 9


def test_search_cli(tmp_path):
    records = [
        {"id": "g1", "title": "Stain the Cabinet",
         "steps": [{"id": "s1", "text": "sand the wood"}]},
        {"id": "g2", "title": "Make Fries",
         "steps": [{"id": "s2", "text": "cut the potatoes"}]},
    ]
    corpus_path = tmp_path / "corpus.jsonl"
    write_jsonl(corpus_path, records)

    out = tmp_path / "goal"
    assert run(["search", "--corpus", str(corpus_path), "--query", "stain cabinet",
                "--mode", "goal", "-n", "2", "--out-dir", str(out)]) == 0
    rows = [line.split("\t") for line in (out / "search.tsv").read_text().splitlines()]
    assert rows[0][1] == "g1"

    out = tmp_path / "article"
    assert run(["search", "--corpus", str(corpus_path), "--query", "potatoes",
                "--mode", "article", "-n", "2", "--out-dir", str(out)]) == 0
    rows = [line.split("\t") for line in (out / "search.tsv").read_text().splitlines()]
    assert rows[0][1] == "g2"


def vr_fixture(tmp_path):
    records = [
        {
            "id": f"g{i}",
            "title": f"achieve goaltok{i}",
            "steps": [
                {"id": f"g{i}_s0", "text": f"do steptok{i}a now"},
                {"id": f"g{i}_s1", "text": f"do steptok{i}b now"},
                {"id": f"g{i}_s2", "text": "enjoy yourself"},
            ],
        }
        for i in range(3)
    ]
    corpus_path = tmp_path / "corpus.jsonl"
    write_jsonl(corpus_path, records)
    videos = []
    for i in range(3):
        for v in range(16):
            toks = [f"goaltok{i}"] if v % 2 == 0 else []
            toks += [f"steptok{i}a"] if v % 3 == 0 else [f"steptok{i}b"]
            toks += ["filler", "words"]
            videos.append(
                {"video_id": f"g{i}v{v:02d}", "goal_id": f"g{i}", "caption": " ".join(toks)}
            )
    videos_path = tmp_path / "videos.jsonl"
    with open(videos_path, "w") as handle:
        for rec in videos:
            handle.write(json.dumps(rec) + "\n")
    return corpus_path, videos_path


def test_vr_pipeline(tmp_path):
    corpus_path, videos_path = vr_fixture(tmp_path)

    assert run(["vr-index", "--videos", str(videos_path),
                "--out-dir", str(tmp_path / "vix")]) == 0
    index_path = tmp_path / "vix" / "vr_index.json"
    assert index_path.exists()

    assert run(["vr-filter", "--videos", str(videos_path), "--corpus", str(corpus_path),
                "--level", "fil_l1", "--seed", "1", "--index", str(index_path),
                "--out-dir", str(tmp_path / "vf")]) == 0
    queries = json.loads((tmp_path / "vf" / "queries.json").read_text())
    assert len(queries) == 3
    assert all(q["level"] == "FIL_L1" for q in queries)
    assert all(q["w_s"] == 0.5 for q in queries)

    assert run(["vr-eval", "--videos", str(videos_path), "--corpus", str(corpus_path),
                "--level", "l0", "--split", "test", "--seed", "1",
                "--out-dir", str(tmp_path / "ve0")]) == 0
    header, row = (tmp_path / "ve0" / "vr_metrics.tsv").read_text().splitlines()
    assert header.split("\t")[0] == "level"
    assert row.split("\t")[0] == "L0"

    assert run(["vr-eval", "--videos", str(videos_path),
                "--queries", str(tmp_path / "vf" / "queries.json"),
                "--split", "test", "--seed", "1", "--out-dir", str(tmp_path / "vef")]) == 0
    _, row = (tmp_path / "vef" / "vr_metrics.tsv").read_text().splitlines()
    assert row.split("\t")[0] == "FIL_L1"


def test_vr_filter_l2_requires_links(tmp_path):
    corpus_path, videos_path = vr_fixture(tmp_path)
    code = run(["vr-filter", "--videos", str(videos_path), "--corpus", str(corpus_path),
                "--level", "fil_l2", "--out-dir", str(tmp_path / "vf2")])
    assert code == 1


def test_subcommands_do_not_mutate_inputs(identity_setup, tmp_path):
    corpus_path, gold_path, _ = identity_setup
    before = corpus_path.read_bytes(), gold_path.read_bytes()
    run(["build-index", "--corpus", str(corpus_path), "--out-dir", str(tmp_path / "ix")])
    run(["retrieve", "--corpus", str(corpus_path),
         "--embeddings", str(tmp_path / "ix" / "embeddings.txt"),
         "--k", "5", "--out-dir", str(tmp_path / "ret")])
    run(["train-reranker", "--corpus", str(corpus_path),
         "--candidates", str(tmp_path / "ret" / "candidates.tsv"),
         "--gold", str(gold_path), "--epochs", "2", "--out-dir", str(tmp_path / "tr")])
    assert (corpus_path.read_bytes(), gold_path.read_bytes()) == before
