"""Batch front door: reproducible pipeline runs over files.

Every subcommand reads declared inputs, writes its artifacts plus a
manifest.json (config hash, input digests, package version) into --out-dir,
and never mutates inputs. Exit codes: 0 ok, 1 usage, 2 data error, 3 internal.
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__
from .corpus import load_corpus, validation_report
from .embedding import embed_corpus, load_embeddings, save_embeddings
from .errors import DataError
from .hierarchy import (
    LinkPipeline,
    expand,
    link_all,
    read_links,
    write_links,
    write_rankings,
    write_tree,
)
from .linkeval import load_gold_links, recall_report, split_links
from .rerank import (
    LexicalFeatureSource,
    load_feature_file,
    load_model,
    make_training_examples,
    new_model,
    save_model,
    train,
)
from .retrieval import build_index, read_candidates, retrieve_all, write_candidates
from .textsearch import TextIndex, index_docs, search
from .videoretrieval import (
    FIL_L1,
    FIL_L2,
    L0,
    L1,
    ClauseScorer,
    build_video_index,
    candidate_pool,
    filter_steps,
    load_videos,
    make_query,
    rank_videos,
    read_queries,
    split_videos,
    vr_metrics,
    write_queries,
)


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(args, inputs: list[str], outputs: list[str]) -> None:
    out_dir = Path(args.out_dir)
    config = {
        k: v
        for k, v in sorted(vars(args).items())
        if k not in ("func", "out_dir", "config") and not k.startswith("_")
    }
    payload = {
        "command": args.command,
        "config": config,
        "config_hash": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode("utf-8")
        ).hexdigest(),
        "inputs": {name: _sha256(Path(name)) for name in sorted(set(inputs))},
        "outputs": sorted(outputs),
        "version": __version__,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True, indent=2)
        handle.write("\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_ns(raw: str) -> list[int]:
    try:
        ns = [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad N list {raw!r}; expected comma-separated integers") from None
    if not ns or any(n < 1 for n in ns):
        raise UsageError(f"bad N list {raw!r}")
    return ns


def _lexical_source(corpus, args, context_mode=None, window=None):
    return LexicalFeatureSource(
        corpus,
        dim=args.d,
        context_mode=context_mode if context_mode is not None else args.context_mode,
        window=window if window is not None else args.window,
    )


# ---------------------------------------------------------------------------
# Subcommands

def cmd_build_index(args) -> None:
    out = _out_dir(args)
    corpus = load_corpus(args.corpus, lowercase=args.lowercase_corpus)
    if args.embeddings:
        store = load_embeddings(args.embeddings)
        missing = [g for g in corpus.goal_ids() if g not in store]
        if missing:
            raise DataError(f"external embeddings missing goal ids, e.g. {missing[0]!r}")
    else:
        store = embed_corpus(corpus, dim=args.dim, seed=args.seed, lowercase=args.lowercase)
    save_embeddings(store, out / "embeddings.txt")
    (out / "corpus_report.txt").write_text(validation_report(corpus), encoding="utf-8")
    inputs = [args.corpus] + ([args.embeddings] if args.embeddings else [])
    _write_manifest(args, inputs, ["embeddings.txt", "corpus_report.txt"])


def cmd_retrieve(args) -> None:
    out = _out_dir(args)
    corpus = load_corpus(args.corpus)
    store = load_embeddings(args.embeddings)
    index = build_index(store, corpus.goal_ids())
    lists = retrieve_all(
        index,
        store,
        corpus,
        k=args.k,
        exclude_parent=not args.no_exclude_parent,
        workers=args.workers,
    )
    write_candidates(out / "candidates.tsv", lists)
    _write_manifest(args, [args.corpus, args.embeddings], ["candidates.tsv"])


def cmd_train_reranker(args) -> None:
    out = _out_dir(args)
    corpus = load_corpus(args.corpus)
    candidate_lists = read_candidates(args.candidates)
    gold_links = load_gold_links(args.gold, corpus=corpus)
    split = split_links(gold_links, seed=args.seed)
    gold_train = {l.step_id: l.gold_goal_id for l in split.train}
    gold_dev = {l.step_id: l.gold_goal_id for l in split.dev}

    source = (
        load_feature_file(args.features) if args.features else _lexical_source(corpus, args)
    )
    train_examples = make_training_examples(candidate_lists, gold_train, unlinkable=args.unlinkable)
    dev_examples = make_training_examples(candidate_lists, gold_dev, unlinkable=args.unlinkable)
    if not train_examples:
        raise DataError("no training examples: no gold step has retrieved candidates")

    model = new_model(
        dim=source.dim,
        lam=args.lambda_init,
        unlinkable=args.unlinkable,
        context_mode=args.context_mode,
        window=args.window,
    )
    result = train(
        model,
        train_examples,
        source,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        freeze_lambda=args.freeze_lambda,
        dev_examples=dev_examples or None,
    )
    save_model(result.model, out / "model.txt")
    with open(out / "loss_curve.tsv", "w", encoding="utf-8") as handle:
        handle.write("epoch\ttrain_loss\tdev_loss\n")
        for row in result.curve:
            dev = "" if row.dev_loss is None else repr(row.dev_loss)
            handle.write(f"{row.epoch}\t{row.train_loss!r}\t{dev}\n")
    inputs = [args.corpus, args.candidates, args.gold] + ([args.features] if args.features else [])
    _write_manifest(args, inputs, ["model.txt", "loss_curve.tsv"])


def _pipeline(args, corpus=None):
    corpus = corpus or load_corpus(args.corpus)
    store = load_embeddings(args.embeddings)
    index = build_index(store, corpus.goal_ids())
    model = load_model(args.model)
    if args.features:
        source = load_feature_file(args.features)
    else:
        source = LexicalFeatureSource(
            corpus, dim=model.dim, context_mode=model.context_mode, window=model.window
        )
    return LinkPipeline(
        corpus=corpus,
        index=index,
        store=store,
        model=model,
        features=source,
        k=args.k,
        exclude_parent=not args.no_exclude_parent,
    )


def cmd_link(args) -> None:
    out = _out_dir(args)
    pipeline = _pipeline(args)
    decisions = link_all(pipeline)
    write_links(out / "links.tsv", decisions)
    outputs = ["links.tsv"]
    if args.rankings:
        write_rankings(out / "rankings.tsv", decisions)
        outputs.append("rankings.tsv")
    inputs = [args.corpus, args.embeddings, args.model] + (
        [args.features] if args.features else []
    )
    _write_manifest(args, inputs, outputs)


def cmd_expand(args) -> None:
    out = _out_dir(args)
    pipeline = _pipeline(args)
    tree = expand(pipeline, args.root, args.max_depth)
    write_tree(tree, out / "tree.json")
    inputs = [args.corpus, args.embeddings, args.model] + (
        [args.features] if args.features else []
    )
    _write_manifest(args, inputs, ["tree.json"])


def cmd_eval_links(args) -> None:
    out = _out_dir(args)
    rankings: dict[str, list[str]] = {}
    with open(args.rankings, encoding="utf-8") as handle:
        rows = []
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 3:
                raise DataError(f"{args.rankings}: line {lineno}: expected >= 3 columns")
            rows.append((parts[0], int(parts[1]), parts[2]))
    for step_id, rank, goal_id in sorted(rows, key=lambda r: (r[0], r[1])):
        rankings.setdefault(step_id, []).append(goal_id)

    gold = load_gold_links(args.gold)
    if args.split != "all":
        gold = split_links(gold, seed=args.seed).part(args.split)
    report = recall_report(rankings, gold, _parse_ns(args.ns))
    with open(out / "recall.tsv", "w", encoding="utf-8") as handle:
        handle.write("n\trecall\n")
        for n, value in sorted(report.items()):
            handle.write(f"{n}\t{value!r}\n")
    with open(out / "recall.json", "w", encoding="utf-8") as handle:
        json.dump({str(n): v for n, v in report.items()}, handle, sort_keys=True, indent=2)
        handle.write("\n")
    _write_manifest(args, [args.rankings, args.gold], ["recall.tsv", "recall.json"])


def cmd_search(args) -> None:
    out = _out_dir(args)
    corpus = load_corpus(args.corpus)
    if args.mode == "goal":
        docs = [(a.goal_id, a.title) for a in corpus.articles]
    else:
        docs = [
            (a.goal_id, a.title + " " + " ".join(s.text for s in a.steps))
            for a in corpus.articles
        ]
    index = index_docs(docs, k1=args.k1, b=args.b)
    ranked = search(index, args.query, args.n)
    with open(out / "search.tsv", "w", encoding="utf-8") as handle:
        for rank, (doc_id, score) in enumerate(ranked, 1):
            handle.write(f"{rank}\t{doc_id}\t{score!r}\n")
    _write_manifest(args, [args.corpus], ["search.tsv"])


def cmd_vr_index(args) -> None:
    out = _out_dir(args)
    videos = load_videos(args.videos)
    index = build_video_index(videos, k1=args.k1, b=args.b)
    (out / "vr_index.json").write_text(index.to_json() + "\n", encoding="utf-8")
    _write_manifest(args, [args.videos], ["vr_index.json"])


def _video_index(args, videos):
    if getattr(args, "index", None):
        return TextIndex.from_json(Path(args.index).read_text(encoding="utf-8"))
    return build_video_index(videos, k1=args.k1, b=args.b)


def cmd_vr_filter(args) -> None:
    out = _out_dir(args)
    corpus = load_corpus(args.corpus)
    videos = load_videos(args.videos)
    splits = split_videos(videos, seed=args.seed)
    index = _video_index(args, videos)
    links = read_links(args.links) if args.links else None
    if args.level == FIL_L2 and links is None:
        raise UsageError("--links is required for level fil_l2")

    queries = []
    for goal_id in splits.goals():
        if goal_id not in corpus:
            raise DataError(f"video goal {goal_id!r} not in corpus")
        pool = candidate_pool(corpus, goal_id, args.level, links=links)
        queries.append(
            filter_steps(
                goal_id,
                corpus.article(goal_id).title,
                pool,
                splits.train[goal_id],
                index,
                weights=(args.wg, args.ws),
                cap=args.cap,
                cost_kind=args.cost,
                level=args.level,
            )
        )
    write_queries(out / "queries.json", queries)
    inputs = [args.corpus, args.videos] + ([args.links] if args.links else [])
    if getattr(args, "index", None):
        inputs.append(args.index)
    _write_manifest(args, inputs, ["queries.json"])


def cmd_vr_eval(args) -> None:
    out = _out_dir(args)
    videos = load_videos(args.videos)
    splits = split_videos(videos, seed=args.seed)
    index = _video_index(args, videos)
    inputs = [args.videos]

    if args.queries:
        queries = read_queries(args.queries)
        inputs.append(args.queries)
    else:
        if not args.corpus:
            raise UsageError("--corpus is required when --queries is not given")
        corpus = load_corpus(args.corpus)
        inputs.append(args.corpus)
        queries = [make_query(corpus, goal_id, args.level) for goal_id in splits.goals()]
    if getattr(args, "index", None):
        inputs.append(args.index)

    gold = {
        q.goal_id: splits.part(args.split)[q.goal_id]
        for q in queries
        if splits.part(args.split).get(q.goal_id)
    }
    scorer = ClauseScorer(index)
    rankings = {q.goal_id: rank_videos(index, q, scorer) for q in queries if q.goal_id in gold}
    ns = _parse_ns(args.ns)
    metrics = vr_metrics(rankings, gold, ns)

    level = queries[0].level if queries else ""
    header = ["level"]
    row = [level]
    for n in ns:
        header += [f"r@{n}", f"p@{n}"]
        row += [repr(metrics.recall[n]), repr(metrics.precision[n])]
    header.append("mr")
    row.append(repr(metrics.mean_rank))
    with open(out / "vr_metrics.tsv", "w", encoding="utf-8") as handle:
        handle.write("\t".join(header) + "\n")
        handle.write("\t".join(row) + "\n")
    _write_manifest(args, inputs, ["vr_metrics.tsv"])


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> Parser:
    parser = Parser(prog="prockb", description=__doc__)
    parser.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = {}  # type: ignore[attr-defined]

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=func, command=name)
        p.add_argument("--out-dir", required=True, help="directory for artifacts + manifest")
        parser.subcommands[name] = p  # type: ignore[attr-defined]
        return p

    p = add("build-index", cmd_build_index, help="embed a corpus (or ingest external vectors)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", help="external vector file; skips the built-in embedder")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lowercase", action="store_true", help="casefold text before embedding")
    p.add_argument("--lowercase-corpus", action="store_true", help="casefold corpus text at load")

    p = add("retrieve", cmd_retrieve, help="top-k candidate goals for every step")
    p.add_argument("--corpus", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, default=30)
    p.add_argument("--no-exclude-parent", action="store_true")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    p = add("train-reranker", cmd_train_reranker, help="train W and lambda on gold links")
    p.add_argument("--corpus", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--features", help="precomputed pair-feature file")
    p.add_argument("--d", type=int, default=16, help="lexical feature dimension")
    p.add_argument("--context-mode", choices=["none", "goal", "surround", "both"], default="both")
    p.add_argument("--window", type=int, default=1)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lambda-init", type=float, default=1.0)
    p.add_argument("--freeze-lambda", action="store_true")
    p.add_argument("--unlinkable", action="store_true")

    for name, func, extra in (
        ("link", cmd_link, True),
        ("expand", cmd_expand, False),
    ):
        p = add(name, func, help="link every step" if name == "link" else "grow a procedure tree")
        p.add_argument("--corpus", required=True)
        p.add_argument("--embeddings", required=True)
        p.add_argument("--model", required=True)
        p.add_argument("--features")
        p.add_argument("--k", type=int, default=30)
        p.add_argument("--no-exclude-parent", action="store_true")
        if extra:
            p.add_argument("--rankings", action="store_true", help="also dump full reranked lists")
        else:
            p.add_argument("--root", required=True)
            p.add_argument("--max-depth", type=int, default=2)

    p = add("eval-links", cmd_eval_links, help="recall@N of a rankings file vs gold links")
    p.add_argument("--rankings", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--ns", default="1,10,30")
    p.add_argument("--split", choices=["all", "train", "dev", "test"], default="all")
    p.add_argument("--seed", type=int, default=0)

    p = add("search", cmd_search, help="BM25 search over goal titles or full articles")
    p.add_argument("--corpus", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--mode", choices=["goal", "article"], default="goal")
    p.add_argument("-n", type=int, default=10)
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)

    p = add("vr-index", cmd_vr_index, help="build and persist a BM25 index over captions")
    p.add_argument("--videos", required=True)
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)

    p = add("vr-filter", cmd_vr_filter, help="hill-climb filtered queries per goal")
    p.add_argument("--videos", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--level", choices=[FIL_L1, FIL_L2], default=FIL_L1, type=str.upper)
    p.add_argument("--links", help="step->goal link dump, needed for fil_l2")
    p.add_argument("--index", help="vr_index.json from vr-index (else rebuilt)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--wg", type=float, default=1.0)
    p.add_argument("--ws", type=float, default=0.5)
    p.add_argument("--cap", type=int, default=15)
    p.add_argument("--cost", choices=["mean_rank", "neg_recall50"], default="mean_rank")
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)

    p = add("vr-eval", cmd_vr_eval, help="recall/precision@N and mean rank per query level")
    p.add_argument("--videos", required=True)
    p.add_argument("--queries", help="queries.json from vr-filter")
    p.add_argument("--corpus", help="needed with --level to build unfiltered queries")
    p.add_argument("--level", choices=[L0, L1], default=L0, type=str.upper)
    p.add_argument("--index", help="vr_index.json from vr-index (else rebuilt)")
    p.add_argument("--split", choices=["train", "dev", "test"], default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ns", default="1,10,25,50")
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)

    return parser


def _apply_config(parser: Parser, argv: list[str]) -> list[str]:
    """Pull --config out of argv and fold its values in as parser defaults."""
    config_path = None
    rest = []
    i = 0
    while i < len(argv):
        arg = argv[i]
        if arg == "--config":
            if i + 1 >= len(argv):
                raise UsageError("--config needs a path")
            config_path = argv[i + 1]
            i += 2
            continue
        if arg.startswith("--config="):
            config_path = arg.split("=", 1)[1]
            i += 1
            continue
        rest.append(arg)
        i += 1
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as handle:
                config = json.load(handle)
        except OSError as exc:
            raise DataError(f"cannot read config {config_path!r}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{config_path}: malformed JSON: {exc.msg}") from None
        if not isinstance(config, dict):
            raise DataError(f"{config_path}: config must be a JSON object")
        for subparser in parser.subcommands.values():  # type: ignore[attr-defined]
            subparser.set_defaults(**config)
    return rest


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config(parser, argv)
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, KeyError, ValueError) as exc:
        message = exc.args[0] if isinstance(exc, (DataError, KeyError, ValueError)) and exc.args else exc
        print(f"error: {message}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse --help
        code = exc.code if isinstance(exc.code, int) else 0
        return code
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def console_main() -> None:
    sys.exit(main())
