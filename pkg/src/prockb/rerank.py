"""Stage 2: joint scoring and reranking of (step, candidate goal) pairs.

Each pair gets a combined score sim2 = W . features + lambda * sim1, where
sim1 is the stage-1 cosine. W, lambda, and the feature row of the synthetic
"unlinkable" candidate are trained with listwise softmax cross-entropy over
the retrieved candidate lists (hard negatives) using plain mini-batch SGD,
which keeps training bitwise-deterministic under a fixed seed.

The unlinkable candidate is a placeholder goal appended to every candidate
list when enabled. Its sim1 is the minimum sim1 of the real candidates and
its feature row is a free learned vector. A step whose gold goal is missing
from its candidate list trains toward the placeholder.

Pair features come either from a built-in lexical extractor or from a text
file of precomputed vectors, so an external neural pair encoder can be
plugged in without any ML runtime here. The input string contract for such
encoders is produced by render_pair_input.
"""

import math
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Protocol, Sequence

import numpy as np

from .corpus import Corpus, StepContext, context_of
from .errors import DataError
from .retrieval import Candidate, CandidateList
from .textsearch import tokenize

UNLINKABLE = "UNLINKABLE"
CTX_DELIMITER = "[CTX]"
MIN_DIM = 8


def render_pair_input(ctx: StepContext, step_text: str, goal_text: str) -> str:
    """Serialize one (context, step, goal) triple for an external pair scorer.

    Template: ``[CLS] <ctx> [ST] <step> [ED] <goal> [SEP]`` with the context
    pieces ordered goal, previous steps, next steps, joined by [CTX].
    """
    pieces = []
    if ctx.goal_text is not None:
        pieces.append(ctx.goal_text)
    pieces.extend(ctx.prev_steps)
    pieces.extend(ctx.next_steps)
    ctx_str = f" {CTX_DELIMITER} ".join(pieces)
    parts = ["[CLS]"]
    if ctx_str:
        parts.append(ctx_str)
    parts += ["[ST]", step_text, "[ED]", goal_text, "[SEP]"]
    return " ".join(parts)


# ---------------------------------------------------------------------------
# Feature sources

class FeatureSource(Protocol):
    dim: int

    def features(self, step_id: str, goal_id: str) -> np.ndarray: ...


def idf_table(texts: Iterable[str]) -> dict[str, float]:
    """Per-token IDF over a document collection (same form as the BM25 IDF)."""
    df: Counter[str] = Counter()
    n = 0
    for text in texts:
        n += 1
        df.update(set(tokenize(text)))
    return {t: math.log(1.0 + (n - d + 0.5) / (d + 0.5)) for t, d in df.items()}


def _jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def _char_ngram_cosine(a: str, b: str, n: int = 3) -> float:
    ca = Counter(a[i : i + n] for i in range(len(a) - n + 1))
    cb = Counter(b[i : i + n] for i in range(len(b) - n + 1))
    if not ca or not cb:
        return 0.0
    dot = sum(v * cb.get(g, 0) for g, v in ca.items())
    na = math.sqrt(sum(v * v for v in ca.values()))
    nb = math.sqrt(sum(v * v for v in cb.values()))
    return dot / (na * nb) if na and nb else 0.0


class LexicalFeatureSource:
    """Deterministic surface-overlap features for a (step, goal) pair.

    Layout: [bias, token Jaccard, char-3gram cosine, IDF-weighted overlap,
    token length ratio, exact-match flag, context-goal Jaccard], zero-padded
    to `dim`. The IDF table defaults to one built over the corpus goal titles.
    """

    name = "lexical"

    def __init__(
        self,
        corpus: Corpus,
        dim: int,
        context_mode: str = "none",
        window: int = 1,
        idf: Mapping[str, float] | None = None,
    ):
        if dim < MIN_DIM:
            raise ValueError(f"dim must be >= {MIN_DIM}, got {dim}")
        self.corpus = corpus
        self.dim = dim
        self.context_mode = context_mode
        self.window = window
        self.idf = dict(idf) if idf is not None else idf_table(a.title for a in corpus.articles)

    def features(self, step_id: str, goal_id: str) -> np.ndarray:
        step = self.corpus.step(step_id)
        goal_title = self.corpus.article(goal_id).title
        ctx = context_of(self.corpus, step_id, self.context_mode, self.window)

        s_tokens = set(tokenize(step.text))
        g_tokens = set(tokenize(goal_title))
        ctx_tokens: set[str] = set()
        if ctx.goal_text is not None:
            ctx_tokens |= set(tokenize(ctx.goal_text))
        for text in ctx.prev_steps + ctx.next_steps:
            ctx_tokens |= set(tokenize(text))

        union_idf = sum(self.idf.get(t, 1.0) for t in s_tokens | g_tokens)
        inter_idf = sum(self.idf.get(t, 1.0) for t in s_tokens & g_tokens)
        n_s, n_g = len(s_tokens), len(g_tokens)

        vec = np.zeros(self.dim, dtype=np.float64)
        vec[0] = 1.0
        vec[1] = _jaccard(s_tokens, g_tokens)
        vec[2] = _char_ngram_cosine(step.text.lower(), goal_title.lower())
        vec[3] = inter_idf / union_idf if union_idf > 0.0 else 0.0
        vec[4] = min(n_s, n_g) / max(n_s, n_g) if max(n_s, n_g) else 0.0
        vec[5] = 1.0 if step.text.casefold() == goal_title.casefold() else 0.0
        vec[6] = _jaccard(ctx_tokens, g_tokens)
        return vec


class TableFeatureSource:
    """Feature rows keyed by (step_id, goal_id), typically loaded from disk."""

    name = "table"

    def __init__(self, dim: int, table: dict[tuple[str, str], np.ndarray]):
        self.dim = dim
        self._table = table

    def features(self, step_id: str, goal_id: str) -> np.ndarray:
        try:
            return self._table[(step_id, goal_id)]
        except KeyError:
            raise KeyError(f"no feature row for step {step_id!r}, goal {goal_id!r}") from None


def load_feature_file(path: str | Path) -> TableFeatureSource:
    """Read ``dim=<d>`` header then rows ``step_id goal_id v1 ... vd``."""
    table: dict[tuple[str, str], np.ndarray] = {}
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().strip()
        if not header.startswith("dim="):
            raise DataError(f"{path}: expected header 'dim=<d>', got {header!r}")
        dim = int(header[4:])
        for lineno, line in enumerate(handle, 2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != dim + 2:
                raise DataError(f"{path}: line {lineno}: expected step goal + {dim} values")
            vec = np.array([float(x) for x in parts[2:]], dtype=np.float64)
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{path}: line {lineno}: non-finite value")
            table[(parts[0], parts[1])] = vec
    return TableFeatureSource(dim=dim, table=table)


def write_feature_file(
    path: str | Path, dim: int, rows: Iterable[tuple[str, str, np.ndarray]]
) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"dim={dim}\n")
        for step_id, goal_id, vec in rows:
            values = " ".join(repr(float(x)) for x in vec)
            handle.write(f"{step_id} {goal_id} {values}\n")


# ---------------------------------------------------------------------------
# Model

@dataclass
class RerankModel:
    w: np.ndarray
    lam: float
    unlinkable_enabled: bool = False
    unlinkable_feat: np.ndarray | None = None
    context_mode: str = "none"
    window: int = 1

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    def copy(self) -> "RerankModel":
        return replace(
            self,
            w=self.w.copy(),
            unlinkable_feat=None if self.unlinkable_feat is None else self.unlinkable_feat.copy(),
        )


def new_model(
    dim: int,
    lam: float = 1.0,
    unlinkable: bool = False,
    context_mode: str = "none",
    window: int = 1,
) -> RerankModel:
    """Zero-initialized model; with W=0 and lam=1 it reproduces stage-1 order."""
    return RerankModel(
        w=np.zeros(dim, dtype=np.float64),
        lam=lam,
        unlinkable_enabled=unlinkable,
        unlinkable_feat=np.zeros(dim, dtype=np.float64) if unlinkable else None,
        context_mode=context_mode,
        window=window,
    )


def save_model(model: RerankModel, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"dim={model.dim}\n")
        handle.write(f"lambda={model.lam!r}\n")
        handle.write(f"unlinkable={int(model.unlinkable_enabled)}\n")
        handle.write(f"context_mode={model.context_mode}\n")
        handle.write(f"window={model.window}\n")
        handle.write("W " + " ".join(repr(float(x)) for x in model.w) + "\n")
        if model.unlinkable_feat is not None:
            handle.write("U " + " ".join(repr(float(x)) for x in model.unlinkable_feat) + "\n")


def load_model(path: str | Path) -> RerankModel:
    fields: dict[str, str] = {}
    w = u = None
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            if line.startswith("W "):
                w = np.array([float(x) for x in line[2:].split()], dtype=np.float64)
            elif line.startswith("U "):
                u = np.array([float(x) for x in line[2:].split()], dtype=np.float64)
            elif "=" in line:
                key, value = line.split("=", 1)
                fields[key] = value
    try:
        dim = int(fields["dim"])
        model = RerankModel(
            w=w if w is not None else np.zeros(dim),
            lam=float(fields["lambda"]),
            unlinkable_enabled=bool(int(fields["unlinkable"])),
            unlinkable_feat=u,
            context_mode=fields["context_mode"],
            window=int(fields["window"]),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed model checkpoint ({exc})") from None
    if model.w.shape[0] != dim:
        raise DataError(f"{path}: W has {model.w.shape[0]} values, expected {dim}")
    if model.unlinkable_enabled and model.unlinkable_feat is None:
        raise DataError(f"{path}: unlinkable model is missing its U row")
    return model


# ---------------------------------------------------------------------------
# Scoring

class ScoredCandidate(NamedTuple):
    goal_id: str
    sim1: float
    sim2: float


@dataclass(frozen=True)
class ScoredCandidates:
    step_id: str
    entries: tuple[ScoredCandidate, ...]
    feature_source: str

    def ranked_ids(self) -> list[str]:
        return [entry.goal_id for entry in self.entries]


def sim2(model: RerankModel, features: np.ndarray, sim1: float) -> float:
    if features.shape != (model.dim,):
        raise ValueError(f"feature dim {features.shape} does not match model dim {model.dim}")
    return float(model.w @ features) + model.lam * sim1


def score_candidates(
    model: RerankModel, candidates: CandidateList, source: FeatureSource
) -> ScoredCandidates:
    """Score every candidate with sim2 and sort descending, ties by goal_id.

    With unlinkable enabled, a placeholder entry is appended whose sim1 is the
    minimum sim1 of the real candidates and whose features are the model's
    learned unlinkable row.
    """
    if not candidates.entries:
        raise ValueError(f"step {candidates.step_id!r} has an empty candidate list")
    scored = [
        ScoredCandidate(goal_id, sim1_val, sim2(model, source.features(candidates.step_id, goal_id), sim1_val))
        for goal_id, sim1_val in candidates.entries
    ]
    if model.unlinkable_enabled:
        floor = min(entry.sim1 for entry in candidates.entries)
        scored.append(ScoredCandidate(UNLINKABLE, floor, sim2(model, model.unlinkable_feat, floor)))
    scored.sort(key=lambda entry: (-entry.sim2, entry.goal_id))
    return ScoredCandidates(
        step_id=candidates.step_id,
        entries=tuple(scored),
        feature_source=getattr(source, "name", type(source).__name__),
    )


# ---------------------------------------------------------------------------
# Training

@dataclass(frozen=True)
class TrainExample:
    """One listwise example: the retrieved candidates and the gold label.

    `gold` is a candidate goal_id, or UNLINKABLE when the gold goal is absent
    from the candidate list (unlinkable mode only).
    """

    step_id: str
    candidates: tuple[Candidate, ...]
    gold: str


def make_training_examples(
    candidate_lists: Iterable[CandidateList],
    gold: Mapping[str, str],
    unlinkable: bool = False,
) -> list[TrainExample]:
    """Pair candidate lists with gold labels.

    Steps without a gold link are skipped. When the gold goal is missing from
    the list: label it UNLINKABLE in unlinkable mode, drop the example
    otherwise.
    """
    examples = []
    for cand in candidate_lists:
        gold_goal = gold.get(cand.step_id)
        if gold_goal is None:
            continue
        in_list = any(entry.goal_id == gold_goal for entry in cand.entries)
        if in_list:
            examples.append(TrainExample(cand.step_id, tuple(cand.entries), gold_goal))
        elif unlinkable:
            examples.append(TrainExample(cand.step_id, tuple(cand.entries), UNLINKABLE))
    return examples


@dataclass
class LossGrads:
    loss: float
    grad_w: np.ndarray
    grad_lam: float
    grad_unlinkable: np.ndarray | None


def example_features(source: FeatureSource, example: TrainExample) -> np.ndarray:
    """Feature matrix for the real candidates of one example, row-aligned."""
    return np.stack([source.features(example.step_id, c.goal_id) for c in example.candidates])


def nll_loss(model: RerankModel, example: TrainExample, feats: np.ndarray) -> LossGrads:
    """Listwise negative log-likelihood of the gold candidate, with analytic
    gradients for W, lambda, and the unlinkable feature row.

    loss = -log softmax(sim2)[gold] over the candidate set, plus the
    placeholder slot when unlinkable is enabled.
    """
    m = len(example.candidates)
    if m == 0:
        raise ValueError(f"step {example.step_id!r}: empty candidate set")
    if feats.shape != (m, model.dim):
        raise ValueError(f"feature matrix {feats.shape} does not match ({m}, {model.dim})")

    sim1s = np.array([c.sim1 for c in example.candidates], dtype=np.float64)
    ids = [c.goal_id for c in example.candidates]
    if model.unlinkable_enabled:
        feats = np.vstack([feats, model.unlinkable_feat])
        sim1s = np.append(sim1s, sim1s[:m].min())
        ids.append(UNLINKABLE)
    elif example.gold == UNLINKABLE:
        raise ValueError(f"step {example.step_id!r}: UNLINKABLE label without unlinkable mode")
    try:
        gold_idx = ids.index(example.gold)
    except ValueError:
        raise ValueError(
            f"step {example.step_id!r}: gold {example.gold!r} not in candidate set"
        ) from None

    z = feats @ model.w + model.lam * sim1s
    z_shift = z - z.max()
    exp_z = np.exp(z_shift)
    total = exp_z.sum()
    probs = exp_z / total
    loss = float(math.log(total) - z_shift[gold_idx])

    g = probs.copy()
    g[gold_idx] -= 1.0
    grad_w = feats.T @ g
    grad_lam = float(g @ sim1s)
    grad_u = g[-1] * model.w if model.unlinkable_enabled else None
    return LossGrads(loss=loss, grad_w=grad_w, grad_lam=grad_lam, grad_unlinkable=grad_u)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    dev_loss: float | None


@dataclass
class TrainResult:
    model: RerankModel
    curve: list[EpochStats]
    best_epoch: int


def mean_loss(model: RerankModel, examples: Sequence[TrainExample], source: FeatureSource) -> float:
    total = 0.0
    for example in examples:
        total += nll_loss(model, example, example_features(source, example)).loss
    return total / len(examples)


def train(
    model: RerankModel,
    examples: Sequence[TrainExample],
    source: FeatureSource,
    lr: float,
    epochs: int,
    batch_size: int = 32,
    seed: int = 0,
    freeze_lambda: bool = False,
    dev_examples: Sequence[TrainExample] | None = None,
) -> TrainResult:
    """Mini-batch SGD on the mean listwise NLL.

    Deterministic under a fixed seed (single-threaded, fixed accumulation
    order). Returns the checkpoint with the best dev loss when a dev set is
    given, the final model otherwise.
    """
    if not examples:
        raise ValueError("empty training set")
    model = model.copy()
    rng = np.random.default_rng(seed)
    feats_cache = [example_features(source, ex) for ex in examples]

    curve: list[EpochStats] = []
    best: tuple[float, int, RerankModel] | None = None
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(examples))
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            grad_w = np.zeros(model.dim)
            grad_lam = 0.0
            grad_u = np.zeros(model.dim) if model.unlinkable_enabled else None
            for i in batch:
                out = nll_loss(model, examples[i], feats_cache[i])
                if not math.isfinite(out.loss):
                    raise RuntimeError(
                        f"non-finite training loss at epoch {epoch} (learning rate too high?)"
                    )
                epoch_losses.append(out.loss)
                grad_w += out.grad_w
                grad_lam += out.grad_lam
                if grad_u is not None:
                    grad_u += out.grad_unlinkable
            scale = lr / len(batch)
            model.w -= scale * grad_w
            if not freeze_lambda:
                model.lam -= scale * grad_lam
            if grad_u is not None:
                model.unlinkable_feat -= scale * grad_u

        train_loss = sum(epoch_losses) / len(epoch_losses)
        dev_loss = mean_loss(model, dev_examples, source) if dev_examples else None
        curve.append(EpochStats(epoch=epoch, train_loss=train_loss, dev_loss=dev_loss))
        if dev_loss is not None and (best is None or dev_loss < best[0]):
            best = (dev_loss, epoch, model.copy())

    if best is not None:
        return TrainResult(model=best[2], curve=curve, best_epoch=best[1])
    return TrainResult(model=model, curve=curve, best_epoch=epochs)
