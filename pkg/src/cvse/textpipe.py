"""Report processing: sentence splitting, abnormal-sentence classification,
sentence embedding, k-means grouping, and mutual-exclusivity refinement."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .errors import UsageError

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_SENTENCE_END_RE = re.compile(r"(?<=[.!?])\s+")


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercased alphanumeric tokens, punctuation stripped."""
    return tuple(_TOKEN_RE.findall(text.lower()))


@dataclass(frozen=True)
class Sentence:
    sid: str
    report_id: str
    text: str
    tokens: tuple[str, ...]


def split_sentences(report_id: str, text: str) -> list[Sentence]:
    """Split on '.', '!' or '?' followed by whitespace or end of text.

    Segments without any alphanumeric token are dropped. Ids are assigned as
    ``{report_id}:{index}`` over the kept segments. Abbreviations such as
    "dr. smith" split at the period; that is a known limitation of the rule.
    """
    sentences = []
    for part in _SENTENCE_END_RE.split(text.strip()):
        part = part.strip()
        tokens = tokenize(part)
        if not tokens:
            continue
        sentences.append(Sentence(sid=f"{report_id}:{len(sentences)}", report_id=report_id,
                                  text=part, tokens=tokens))
    return sentences


# ---------------------------------------------------------------------------
# abnormal-sentence classifier

@dataclass(frozen=True)
class ClassifierConfig:
    lr: float = 0.5
    iterations: int = 400
    threshold: float = 0.5
    seed: int = 0


@dataclass
class BowClassifier:
    vocab: dict[str, int]
    weights: np.ndarray
    bias: float
    threshold: float

    def counts(self, tokens) -> np.ndarray:
        x = np.zeros(len(self.vocab))
        for tok in tokens:
            idx = self.vocab.get(tok)
            if idx is not None:
                x[idx] += 1.0
        return x


def train_classifier(labeled: list[tuple[str, bool]], config: ClassifierConfig = ClassifierConfig()) -> BowClassifier:
    """Logistic regression on bag-of-words counts via full-batch gradient descent."""
    if not labeled:
        raise UsageError("no labeled sentences")
    y = np.array([1.0 if flag else 0.0 for _, flag in labeled])
    if y.min() == y.max():
        raise UsageError("labeled data contains a single class")
    vocab = {tok: i for i, tok in enumerate(sorted({t for text, _ in labeled for t in tokenize(text)}))}
    X = np.zeros((len(labeled), len(vocab)))
    for row, (text, _) in enumerate(labeled):
        for tok in tokenize(text):
            X[row, vocab[tok]] += 1.0
    w = np.zeros(len(vocab))
    b = 0.0
    n = len(labeled)
    for _ in range(config.iterations):
        p = 1.0 / (1.0 + np.exp(-(X @ w + b)))
        err = p - y
        w -= config.lr * (X.T @ err) / n
        b -= config.lr * err.mean()
    return BowClassifier(vocab=vocab, weights=w, bias=float(b), threshold=config.threshold)


def classify_abnormal(classifier: BowClassifier, sentence: Sentence) -> tuple[bool, float]:
    """(is_abnormal, probability); unknown tokens are ignored."""
    if not sentence.tokens:
        raise UsageError(f"sentence {sentence.sid} has no tokens")
    z = classifier.counts(sentence.tokens) @ classifier.weights + classifier.bias
    prob = float(1.0 / (1.0 + np.exp(-z)))
    return prob >= classifier.threshold, prob


# ---------------------------------------------------------------------------
# sentence embedders

def _token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def _hash_vector(token: str, dim: int) -> np.ndarray:
    h = _token_hash(token)
    v = np.zeros(dim)
    v[h % dim] = 1.0 if (h >> 63) & 1 else -1.0
    return v


class HashEmbedder:
    """Deterministic feature hashing of tokens into ``dim`` signed buckets,
    l2-normalized."""

    def __init__(self, dim: int):
        if dim < 1:
            raise UsageError("embedding dim must be >= 1")
        self.dim = dim

    def embed(self, sentence: Sentence) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in sentence.tokens:
            v += _hash_vector(tok, self.dim)
        norm = np.linalg.norm(v)
        return v / max(norm, 1e-8)


class TableEmbedder:
    """Average of per-token vectors from a lookup table; unknown tokens fall
    back to their signed hash bucket vector."""

    def __init__(self, table: dict[str, np.ndarray], dim: int):
        self.table = table
        self.dim = dim
        for tok, vec in table.items():
            if vec.shape != (dim,):
                raise UsageError(f"table vector for {tok!r} has shape {vec.shape}, expected ({dim},)")

    @classmethod
    def from_file(cls, path) -> "TableEmbedder":
        """One token per line: token, then whitespace-separated reals."""
        table = {}
        dim = None
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts:
                    continue
                vec = np.array([float(x) for x in parts[1:]])
                if dim is None:
                    dim = vec.shape[0]
                elif vec.shape[0] != dim:
                    raise UsageError(f"{path}:{lineno}: vector dim {vec.shape[0]} != {dim}")
                table[parts[0]] = vec
        if not table:
            raise UsageError(f"{path}: empty embedding table")
        return cls(table, dim)

    def embed(self, sentence: Sentence) -> np.ndarray:
        rows = [self.table.get(tok, None) for tok in sentence.tokens]
        rows = [r if r is not None else _hash_vector(tok, self.dim)
                for r, tok in zip(rows, sentence.tokens)]
        return np.mean(rows, axis=0)


def embed_sentence(embedder, sentence: Sentence) -> np.ndarray:
    if not sentence.tokens:
        raise UsageError(f"sentence {sentence.sid} has no tokens")
    return embedder.embed(sentence)


# ---------------------------------------------------------------------------
# k-means

def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centroids[i] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iters: int = 100
           ) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded from the point farthest from its assigned
    centroid. Inertia is asserted non-increasing across iterations. Returns
    (assignments, centroids, inertia).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or k > n:
        raise UsageError(f"k={k} must be between 1 and the number of points ({n})")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, k, rng)
    prev_assign = None
    prev_inertia = np.inf
    assign = np.zeros(n, dtype=int)
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        for empty in [c for c in range(k) if not np.any(assign == c)]:
            farthest = int(d2[np.arange(n), assign].argmax())
            centroids[empty] = points[farthest]
            d2[:, empty] = ((points - centroids[empty]) ** 2).sum(axis=1)
            assign = d2.argmin(axis=1)
        inertia = float(d2[np.arange(n), assign].sum())
        assert inertia <= prev_inertia + 1e-9, "k-means inertia increased"
        prev_inertia = inertia
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign.copy()
        for c in range(k):
            centroids[c] = points[assign == c].mean(axis=0)
    return assign, centroids, prev_inertia


# ---------------------------------------------------------------------------
# mutual-exclusivity patterns

#: 13 flag classes over six sets of mutually exclusive term stems; a flag is
#: set when any token starts with one of the class stems. Order is fixed.
MUTEX_CLASSES: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("right", ("right",)),
    ("left", ("left",)),
    ("bilateral", ("bilateral",)),
    ("small", ("small",)),
    ("large", ("great", "large")),
    ("low", ("low",)),
    ("high", ("high",)),
    ("enlarged", ("elevate", "enlarge", "increase", "widen")),
    ("reduced", ("shrink", "decrease")),
    ("improved", ("improve", "resolve", "clear")),
    ("worsened", ("worsen",)),
    ("mild", ("mild",)),
    ("severe", ("severe",)),
)

MutexPattern = tuple[int, ...]


def mutex_pattern(sentence_or_tokens) -> MutexPattern:
    """13 binary flags; token order does not matter."""
    tokens = getattr(sentence_or_tokens, "tokens", sentence_or_tokens)
    return tuple(
        int(any(tok.startswith(stem) for tok in tokens for stem in stems))
        for _, stems in MUTEX_CLASSES
    )


@dataclass(frozen=True)
class FindingGroup:
    group_id: int
    cluster_id: int
    pattern: MutexPattern
    member_ids: tuple[str, ...]
    representative_id: str


def refine_groups(sentences: list[Sentence], assignments,
                  patterns: dict[str, MutexPattern] | None = None,
                  embeddings: dict[str, np.ndarray] | None = None) -> list[FindingGroup]:
    """Partition each k-means cluster by exact mutex-pattern equality.

    Group ids are assigned in (cluster id, pattern) order; members are sorted
    by sentence id. When ``embeddings`` is given the representative is the
    medoid, otherwise the lowest member id.
    """
    if patterns is None:
        patterns = {s.sid: mutex_pattern(s) for s in sentences}
    clusters: dict[int, dict[MutexPattern, list[str]]] = {}
    for sentence, cluster_id in zip(sentences, assignments):
        pat = patterns[sentence.sid]
        clusters.setdefault(int(cluster_id), {}).setdefault(pat, []).append(sentence.sid)
    groups = []
    for cluster_id in sorted(clusters):
        for pat in sorted(clusters[cluster_id]):
            members = tuple(sorted(clusters[cluster_id][pat]))
            rep = group_representative(members, embeddings) if embeddings else members[0]
            groups.append(FindingGroup(
                group_id=len(groups), cluster_id=cluster_id, pattern=pat,
                member_ids=members, representative_id=rep,
            ))
    return groups


def group_representative(member_ids, embeddings: dict[str, np.ndarray]) -> str:
    """Medoid: member minimizing summed squared distance to the others; ties
    broken by lowest sentence id."""
    members = sorted(member_ids)
    if not members:
        raise UsageError("empty group has no representative")
    vectors = np.stack([embeddings[sid] for sid in members])
    d2 = ((vectors[:, None, :] - vectors[None, :, :]) ** 2).sum(axis=2)
    return members[int(d2.sum(axis=1).argmin())]


def build_groups(sentences: list[Sentence], embeddings: dict[str, np.ndarray],
                 k: int, seed: int = 0, max_iters: int = 100) -> tuple[list[FindingGroup], int]:
    """k-means over sentence embeddings, then mutex refinement with medoid
    representatives. Returns (groups, number of k-means clusters)."""
    if not sentences:
        raise UsageError("no sentences to group")
    points = np.stack([embeddings[s.sid] for s in sentences])
    assignments, _, _ = kmeans(points, k, seed=seed, max_iters=max_iters)
    groups = refine_groups(sentences, assignments, embeddings=embeddings)
    return groups, len(set(int(a) for a in assignments))
