"""Link steps to goal articles and grow procedure trees.

A LinkPipeline bundles the stage-1 index, the reranker, and a feature source.
Linking one step is retrieve -> rerank -> argmax. Expansion replaces a linked
step by the linked article's steps, breadth-first, stopping at max_depth and
refusing to revisit any goal already on the root-to-node path so trees stay
acyclic and finite.
"""

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .corpus import Corpus
from .embedding import EmbeddingStore
from .errors import DataError
from .rerank import UNLINKABLE, FeatureSource, RerankModel, ScoredCandidate, score_candidates
from .retrieval import DEFAULT_K, GoalIndex, topk


@dataclass
class LinkPipeline:
    corpus: Corpus
    index: GoalIndex
    store: EmbeddingStore
    model: RerankModel
    features: FeatureSource
    k: int = DEFAULT_K
    exclude_parent: bool = True

    def config_hash(self) -> str:
        payload = {
            "k": self.k,
            "exclude_parent": self.exclude_parent,
            "dim": self.index.dim,
            "n_goals": len(self.index),
            "model": {
                "d": self.model.dim,
                "lambda": self.model.lam,
                "w": hashlib.sha256(self.model.w.tobytes()).hexdigest(),
                "unlinkable": self.model.unlinkable_enabled,
                "u": (
                    hashlib.sha256(self.model.unlinkable_feat.tobytes()).hexdigest()
                    if self.model.unlinkable_feat is not None
                    else None
                ),
                "context_mode": self.model.context_mode,
                "window": self.model.window,
            },
            "features": getattr(self.features, "name", type(self.features).__name__),
        }
        blob = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class LinkDecision:
    step_id: str
    outcome: str  # goal_id or UNLINKABLE
    alternatives: tuple[ScoredCandidate, ...]  # full reranked list, best first
    config_hash: str

    @property
    def chosen(self) -> ScoredCandidate:
        return self.alternatives[0]


def link_step(pipeline: LinkPipeline, step_id: str) -> LinkDecision:
    """Retrieve candidates for one step, rerank them, take the argmax.

    k is clamped to the number of goals available after exclusion so small
    corpora still link.
    """
    step = pipeline.corpus.step(step_id)
    exclude = {step.parent_goal_id} if pipeline.exclude_parent else set()
    available = len(pipeline.index) - len(exclude & pipeline.index.goal_id_set)
    if available < 1:
        raise ValueError(f"no goals available to link step {step_id!r}")
    candidates = topk(
        pipeline.index,
        pipeline.store[step_id],
        min(pipeline.k, available),
        exclude=exclude,
        step_id=step_id,
    )
    scored = score_candidates(pipeline.model, candidates, pipeline.features)
    return LinkDecision(
        step_id=step_id,
        outcome=scored.entries[0].goal_id,
        alternatives=scored.entries,
        config_hash=pipeline.config_hash(),
    )


def link_all(pipeline: LinkPipeline, step_ids: Iterable[str] | None = None) -> list[LinkDecision]:
    ids = list(step_ids) if step_ids is not None else [s.step_id for s in pipeline.corpus.steps()]
    return [link_step(pipeline, sid) for sid in ids]


def write_links(path: str | Path, decisions: Iterable[LinkDecision]) -> None:
    """Link dump TSV: step_id, outcome, sim1, sim2 of the chosen entry."""
    with open(path, "w", encoding="utf-8") as handle:
        for dec in decisions:
            top = dec.chosen
            handle.write(f"{dec.step_id}\t{dec.outcome}\t{top.sim1!r}\t{top.sim2!r}\n")


def read_links(path: str | Path) -> dict[str, str]:
    """step_id -> outcome map from a link dump."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise DataError(f"{path}: line {lineno}: expected at least 2 columns")
            out[parts[0]] = parts[1]
    return out


def write_rankings(path: str | Path, decisions: Iterable[LinkDecision]) -> None:
    """Full reranked lists as TSV: step_id, rank, goal_id, sim1, sim2."""
    with open(path, "w", encoding="utf-8") as handle:
        for dec in decisions:
            for rank, entry in enumerate(dec.alternatives, 1):
                handle.write(
                    f"{dec.step_id}\t{rank}\t{entry.goal_id}\t{entry.sim1!r}\t{entry.sim2!r}\n"
                )


# ---------------------------------------------------------------------------
# Trees

@dataclass
class StepNode:
    step_id: str
    text: str
    depth: int
    decision: LinkDecision | None = None
    child: "GoalNode | None" = None
    suppressed_cycle: bool = False


@dataclass
class GoalNode:
    goal_id: str
    title: str
    depth: int
    steps: list[StepNode] = field(default_factory=list)


@dataclass
class ProcedureTree:
    root: GoalNode
    max_depth: int
    config_hash: str

    def goal_nodes(self) -> Iterator[GoalNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            for step in node.steps:
                if step.child is not None:
                    stack.append(step.child)

    def step_nodes(self) -> Iterator[StepNode]:
        for goal in self.goal_nodes():
            yield from goal.steps


def expand(
    pipeline: LinkPipeline,
    root_goal_id: str,
    max_depth: int,
    exclude_ancestors: bool = True,
) -> ProcedureTree:
    """Grow a procedure tree from one root article, breadth-first.

    A step is expanded iff it links to a goal, that goal is not already on
    the path from the root, and the step sits above max_depth. Unlinkable
    steps and suppressed cycles stay leaves. max_depth=0 returns the bare
    depth-one article.
    """
    if max_depth < 0:
        raise ValueError(f"max_depth must be >= 0, got {max_depth}")
    corpus = pipeline.corpus
    root_article = corpus.article(root_goal_id)
    root = GoalNode(goal_id=root_goal_id, title=root_article.title, depth=0)
    queue: deque[tuple[GoalNode, frozenset[str]]] = deque([(root, frozenset())])

    while queue:
        node, ancestors = queue.popleft()
        path_goals = ancestors | {node.goal_id}
        article = corpus.article(node.goal_id)
        for step in article.steps:
            step_node = StepNode(step_id=step.step_id, text=step.text, depth=node.depth)
            node.steps.append(step_node)
            if node.depth >= max_depth:
                continue
            decision = link_step(pipeline, step.step_id)
            step_node.decision = decision
            if decision.outcome == UNLINKABLE:
                continue
            if exclude_ancestors and decision.outcome in path_goals:
                step_node.suppressed_cycle = True
                continue
            target = corpus.article(decision.outcome)
            child = GoalNode(goal_id=target.goal_id, title=target.title, depth=node.depth + 1)
            step_node.child = child
            queue.append((child, path_goals))

    return ProcedureTree(root=root, max_depth=max_depth, config_hash=pipeline.config_hash())


def tree_to_dict(tree: ProcedureTree) -> dict:
    def step_dict(step: StepNode) -> dict:
        out: dict = {
            "step_id": step.step_id,
            "text": step.text,
            "link": step.decision.outcome if step.decision else None,
            "children": [step_dict(s) for s in step.child.steps] if step.child else [],
        }
        if step.decision:
            out["sim1"] = step.decision.chosen.sim1
            out["sim2"] = step.decision.chosen.sim2
        if step.suppressed_cycle:
            out["suppressed_cycle"] = True
        return out

    def goal_dict(goal: GoalNode) -> dict:
        return {
            "goal_id": goal.goal_id,
            "goal": goal.title,
            "steps": [step_dict(s) for s in goal.steps],
        }

    return {
        "max_depth": tree.max_depth,
        "config_hash": tree.config_hash,
        "tree": goal_dict(tree.root),
    }


def write_tree(tree: ProcedureTree, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(tree_to_dict(tree), handle, sort_keys=True, ensure_ascii=False, indent=2)
        handle.write("\n")
