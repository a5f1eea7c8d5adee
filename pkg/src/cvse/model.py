"""Joint visual-semantic embedding model with conditional region attention.

A study pairs a frontal and a lateral feature map. Sentences and regions are
projected into a shared d-dimensional space and l2-normalized; per-region
attention is conditioned on the query sentence; similarity is the negative
attention-weighted squared distance, averaged over the two views. Training
minimizes a bidirectional hinge ranking loss with randomly sampled negatives
and keeps the parameters that score best on the dev split.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import numcore as nc
from .errors import DataError, NumericError, ShapeError, UsageError
from .evalkit import recall_at_k


@dataclass(frozen=True)
class FeatureMap:
    """Grid of region feature vectors for one image view.

    ``regions`` has shape (width * height, channels) in row-major grid order:
    region j sits at grid row j // width, column j % width.
    """

    width: int
    height: int
    regions: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ShapeError("feature map needs width, height >= 1")
        if self.regions.ndim != 2 or self.regions.shape[0] != self.width * self.height:
            raise ShapeError(
                f"expected {self.width * self.height} region rows, got array of shape {self.regions.shape}"
            )
        if not np.all(np.isfinite(self.regions)):
            raise NumericError("feature map contains non-finite values")

    @property
    def channels(self) -> int:
        return self.regions.shape[1]


@dataclass(frozen=True)
class Study:
    """Two-view study with its gold abnormal-finding sentence ids."""

    study_id: str
    frontal: FeatureMap
    lateral: FeatureMap
    gold: tuple[str, ...] = ()

    def __post_init__(self):
        if self.frontal is None or self.lateral is None:
            raise DataError(f"study {self.study_id}: both views are required")
        if self.frontal.channels != self.lateral.channels:
            raise DataError(f"study {self.study_id}: views disagree on channel count")

    @property
    def views(self) -> dict[str, FeatureMap]:
        return {"frontal": self.frontal, "lateral": self.lateral}


class Candidate(NamedTuple):
    """Retrieval pool entry: one finding group's representative sentence."""

    group_id: int
    sid: str
    text: str
    embedding: np.ndarray


class Anchor(NamedTuple):
    """One training pair: a study and one of its gold findings."""

    study: Study
    sid: str
    embedding: np.ndarray


@dataclass(frozen=True)
class ModelDims:
    d1: int
    d2: int
    d: int
    d_att: int

    def __post_init__(self):
        if min(self.d1, self.d2, self.d, self.d_att) < 1:
            raise ShapeError("all model dimensions must be >= 1")


PARAM_ORDER = ("text_w", "text_b", "region_w", "region_b", "attn_w", "attn_b", "attn_v")

CHECKPOINT_MAGIC = b"CVSE"
CHECKPOINT_VERSION = 1


def _param_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    return {
        "text_w": (dims.d, dims.d1),
        "text_b": (dims.d,),
        "region_w": (dims.d, dims.d2),
        "region_b": (dims.d,),
        "attn_w": (dims.d_att, 2 * dims.d),
        "attn_b": (dims.d_att,),
        "attn_v": (dims.d_att,),
    }


@dataclass
class CvseModel:
    """Projection and attention parameters plus the loss hyperparameters."""

    dims: ModelDims
    params: dict[str, np.ndarray]
    margin: float = 0.2
    negatives: int = 8

    def __post_init__(self):
        if self.margin <= 0:
            raise UsageError("margin must be positive")
        if self.negatives < 1:
            raise UsageError("negatives count must be >= 1")
        shapes = _param_shapes(self.dims)
        if set(self.params) != set(shapes):
            raise ShapeError(f"parameter keys {sorted(self.params)} != expected {sorted(shapes)}")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def init(cls, dims: ModelDims, margin: float = 0.2, negatives: int = 8, seed: int = 0) -> "CvseModel":
        """Seeded init, uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
        rng = np.random.default_rng(seed)
        fan_in = {
            "text_w": dims.d1, "text_b": dims.d1,
            "region_w": dims.d2, "region_b": dims.d2,
            "attn_w": 2 * dims.d, "attn_b": 2 * dims.d,
            "attn_v": dims.d_att,
        }
        params = {}
        for name, shape in _param_shapes(dims).items():
            bound = 1.0 / np.sqrt(fan_in[name])
            params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(dims=dims, params=params, margin=margin, negatives=negatives)

    # -- forward pieces -----------------------------------------------------

    def _leaves(self, params: dict | None) -> dict[str, nc.Tensor]:
        if params is not None:
            return params
        return {k: nc.Tensor(v) for k, v in self.params.items()}

    def embed_text(self, v, params: dict | None = None) -> nc.Tensor:
        """Sentence embedding -> unit-norm vector in the joint space."""
        p = self._leaves(params)
        v = v if isinstance(v, nc.Tensor) else nc.Tensor(np.asarray(v, dtype=np.float64))
        if v.ndim != 1 or v.shape[0] != self.dims.d1:
            raise ShapeError(f"sentence embedding must have dim {self.dims.d1}, got shape {v.shape}")
        return nc.l2_normalize(nc.linear_forward(v, p["text_w"], p["text_b"]))

    def embed_regions(self, fmap: FeatureMap, params: dict | None = None) -> nc.Tensor:
        """Feature map -> matrix of unit-norm joint vectors, one row per region."""
        p = self._leaves(params)
        if fmap.channels != self.dims.d2:
            raise ShapeError(f"feature map has {fmap.channels} channels, model expects {self.dims.d2}")
        M = nc.Tensor(np.asarray(fmap.regions, dtype=np.float64))
        return nc.l2_normalize_rows(nc.linear_rows(M, p["region_w"], p["region_b"]))

    def attention(self, regions: nc.Tensor, text: nc.Tensor, params: dict | None = None) -> nc.Tensor:
        """Per-region weights conditioned on the query text; sums to 1."""
        p = self._leaves(params)
        if regions.ndim != 2 or regions.shape[0] == 0:
            raise ShapeError("attention needs a non-empty matrix of joint region vectors")
        paired = nc.concat_rows_with(regions, text)
        hidden = nc.linear_rows(paired, p["attn_w"], p["attn_b"])
        return nc.softmax(nc.matvec(hidden, p["attn_v"]))

    def _view_similarity(self, regions: nc.Tensor, text: nc.Tensor, p: dict) -> nc.Tensor:
        alpha = self.attention(regions, text, params=p)
        return nc.neg(nc.dot(alpha, nc.sq_dist_rows(regions, text)))

    def similarity(self, a_emb, fmap: FeatureMap, params: dict | None = None) -> nc.Tensor:
        """Negative attention-weighted squared distance; always <= 0."""
        p = self._leaves(params)
        text = self.embed_text(a_emb, params=p)
        regions = self.embed_regions(fmap, params=p)
        return self._view_similarity(regions, text, p)

    def pair_similarity(self, a_emb, study: Study, params: dict | None = None) -> nc.Tensor:
        """Mean of the two per-view similarities."""
        if study.frontal is None or study.lateral is None:
            raise DataError(f"study {study.study_id} is missing a view")
        p = self._leaves(params)
        text = self.embed_text(a_emb, params=p)
        sf = self._view_similarity(self.embed_regions(study.frontal, params=p), text, p)
        sl = self._view_similarity(self.embed_regions(study.lateral, params=p), text, p)
        return (sf + sl) * 0.5

    def attention_map(self, fmap: FeatureMap, a_emb) -> np.ndarray:
        """Attention reshaped onto the (height, width) grid; sums to 1."""
        alpha = self.attention(self.embed_regions(fmap), self.embed_text(a_emb))
        return alpha.value.reshape(fmap.height, fmap.width)

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        save_model(self, path)

    @classmethod
    def load(cls, path, margin: float = 0.2, negatives: int = 8) -> "CvseModel":
        return load_model(path, margin=margin, negatives=negatives)


# ---------------------------------------------------------------------------
# loss

class NegativeSampler:
    """Draws unmatched findings and studies for each anchor.

    Negative findings are gold sentences of other studies, excluding every
    finding in the anchor study's gold set; negative studies are those whose
    gold set does not contain the anchor finding. Sampling is uniform without
    replacement; when a pool is smaller than the requested count it falls
    back to replacement and records the event.
    """

    def __init__(self, studies: list[Study], embeddings: dict[str, np.ndarray],
                 negatives: int, rng: np.random.Generator):
        self.negatives = negatives
        self.rng = rng
        self.studies = list(studies)
        self.findings: list[tuple[str, np.ndarray]] = []
        seen = set()
        for study in self.studies:
            for sid in study.gold:
                if sid not in seen:
                    seen.add(sid)
                    self.findings.append((sid, embeddings[sid]))
        self.replacement_events = 0

    def _draw(self, pool: list, count: int) -> list:
        if not pool:
            raise UsageError("negative pool is empty")
        if len(pool) >= count:
            idx = self.rng.choice(len(pool), size=count, replace=False)
        else:
            self.replacement_events += 1
            idx = self.rng.choice(len(pool), size=count, replace=True)
        return [pool[i] for i in idx]

    def sample(self, anchor: Anchor) -> tuple[list[tuple[str, np.ndarray]], list[Study]]:
        gold = set(anchor.study.gold)
        finding_pool = [f for f in self.findings if f[0] not in gold]
        study_pool = [s for s in self.studies if anchor.sid not in s.gold]
        return self._draw(finding_pool, self.negatives), self._draw(study_pool, self.negatives)


def triplet_loss(model: CvseModel, batch: list[Anchor], sampler, margin: float | None = None,
                 params: dict | None = None) -> nc.Tensor:
    """Bidirectional hinge ranking loss, summed over anchors and negatives,
    divided by the number of anchors in the batch."""
    if not batch:
        raise UsageError("triplet_loss needs a non-empty batch")
    delta = model.margin if margin is None else margin
    p = model._leaves(params)

    region_cache: dict[str, tuple[nc.Tensor, nc.Tensor]] = {}
    text_cache: dict[str, nc.Tensor] = {}

    def joint_views(study: Study) -> tuple[nc.Tensor, nc.Tensor]:
        got = region_cache.get(study.study_id)
        if got is None:
            got = (model.embed_regions(study.frontal, params=p),
                   model.embed_regions(study.lateral, params=p))
            region_cache[study.study_id] = got
        return got

    def joint_text(sid: str, emb: np.ndarray) -> nc.Tensor:
        got = text_cache.get(sid)
        if got is None:
            got = model.embed_text(emb, params=p)
            text_cache[sid] = got
        return got

    def pair_sim(study: Study, text: nc.Tensor) -> nc.Tensor:
        rf, rl = joint_views(study)
        return (model._view_similarity(rf, text, p) + model._view_similarity(rl, text, p)) * 0.5

    total = None
    for anchor in batch:
        pos_text = joint_text(anchor.sid, anchor.embedding)
        pos_score = pair_sim(anchor.study, pos_text)
        neg_findings, neg_studies = sampler.sample(anchor)
        for sid, emb in neg_findings:
            term = nc.hinge(pair_sim(anchor.study, joint_text(sid, emb)) - pos_score + delta)
            total = term if total is None else total + term
        for neg_study in neg_studies:
            term = nc.hinge(pair_sim(neg_study, pos_text) - pos_score + delta)
            total = term if total is None else total + term
    if total is None:
        return nc.Tensor(np.array(0.0))
    return total * (1.0 / len(batch))


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    epochs: int = 40
    lr: float = 0.001
    margin: float = 0.2
    negatives: int = 8
    batch_size: int = 32
    seed: int = 0
    eval_k: int = 3


@dataclass
class TrainingData:
    train_studies: list[Study]
    embeddings: dict[str, np.ndarray]
    dev_studies: list[Study] = field(default_factory=list)
    dev_gold_groups: dict[str, frozenset[int]] = field(default_factory=dict)
    pool: list[Candidate] = field(default_factory=list)


def _dev_recall(model: CvseModel, data: TrainingData, k: int) -> float:
    eligible = [s for s in data.dev_studies if data.dev_gold_groups.get(s.study_id)]
    if not eligible or not data.pool:
        return 0.0
    k = min(k, len(data.pool))
    retrieved = [[item.group_id for item in retrieve(model, s, data.pool, k).items] for s in eligible]
    gold = [set(data.dev_gold_groups[s.study_id]) for s in eligible]
    return recall_at_k(retrieved, gold, k)


def train(dims: ModelDims, data: TrainingData, cfg: TrainConfig) -> tuple[CvseModel, list[dict]]:
    """Mini-batch Adam on the ranking loss; keeps the best-dev-recall weights.

    Deterministic given ``cfg.seed``: the model is initialised from the seed
    and a separate derived stream drives shuffling and negative sampling.
    """
    if not data.train_studies:
        raise UsageError("training set is empty")
    for study in data.train_studies:
        if not study.gold:
            raise UsageError(f"training study {study.study_id} has no gold findings")

    model = CvseModel.init(dims, margin=cfg.margin, negatives=cfg.negatives, seed=cfg.seed)
    log: list[dict] = []
    if cfg.epochs == 0:
        return model, log

    rng = np.random.default_rng((cfg.seed, 1))
    anchors = [Anchor(study, sid, data.embeddings[sid])
               for study in data.train_studies for sid in study.gold]
    sampler = NegativeSampler(data.train_studies, data.embeddings, cfg.negatives, rng)
    state = nc.AdamState(lr=cfg.lr)
    params = model.params
    best_recall = -1.0
    best_params = {k: v.copy() for k, v in params.items()}

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(anchors))
        losses = []
        replacement_before = sampler.replacement_events
        for start in range(0, len(anchors), cfg.batch_size):
            batch = [anchors[i] for i in order[start:start + cfg.batch_size]]
            leaves = {k: nc.Tensor(v) for k, v in params.items()}
            loss = triplet_loss(model, batch, sampler, margin=cfg.margin, params=leaves)
            value = float(loss.value)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            loss.backward()
            grads = {k: (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(params[k]))
                     for k in params}
            params, state = nc.adam_step(params, grads, state)
            model.params = params
            losses.append(value)
        recall = _dev_recall(model, data, cfg.eval_k)
        log.append({
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)),
            "dev_recall": recall,
            "sampled_with_replacement": sampler.replacement_events > replacement_before,
        })
        if recall > best_recall:
            best_recall = recall
            best_params = {k: v.copy() for k, v in params.items()}

    model.params = best_params
    return model, log


# ---------------------------------------------------------------------------
# retrieval

@dataclass(frozen=True)
class Retrieved:
    sid: str
    group_id: int
    score: float
    attention: dict[str, np.ndarray]


@dataclass(frozen=True)
class RetrievalResult:
    items: list[Retrieved]


def retrieve(model: CvseModel, study: Study, pool: list[Candidate], k: int) -> RetrievalResult:
    """Top-k candidates by pair similarity; ties broken by ascending group id."""
    if not pool or k == 0:
        raise UsageError("retrieve needs a non-empty pool and k >= 1")
    if k > len(pool):
        raise UsageError(f"k={k} exceeds pool size {len(pool)}")
    scores = [float(model.pair_similarity(c.embedding, study).value) for c in pool]
    order = sorted(range(len(pool)), key=lambda i: (-scores[i], pool[i].group_id))
    items = []
    for i in order[:k]:
        cand = pool[i]
        attn = {name: model.attention_map(fmap, cand.embedding) for name, fmap in study.views.items()}
        items.append(Retrieved(sid=cand.sid, group_id=cand.group_id, score=scores[i], attention=attn))
    return RetrievalResult(items=items)


# ---------------------------------------------------------------------------
# checkpoint file format
#
# magic "CVSE" | u16 version | u32 d1, d2, d, d_att | for each tensor in
# PARAM_ORDER: u32 value count, then count f64 little-endian values in
# row-major order | u64 checksum (blake2b-8 digest of everything between the
# version field and the checksum).

def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_model(model: CvseModel, path) -> None:
    dims = model.dims
    payload = struct.pack("<IIII", dims.d1, dims.d2, dims.d, dims.d_att)
    for name in PARAM_ORDER:
        flat = np.ascontiguousarray(model.params[name], dtype="<f8").ravel()
        payload += struct.pack("<I", flat.size) + flat.tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<Q", _checksum(payload)))


def load_model(path, margin: float = 0.2, negatives: int = 8) -> CvseModel:
    if not os.path.exists(path):
        raise DataError(f"checkpoint {path} does not exist")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    payload, stored = blob[6:-8], blob[-8:]
    if struct.unpack("<Q", stored)[0] != _checksum(payload):
        raise DataError(f"{path}: checksum mismatch, file is corrupt")
    d1, d2, d, d_att = struct.unpack_from("<IIII", payload, 0)
    dims = ModelDims(d1=d1, d2=d2, d=d, d_att=d_att)
    shapes = _param_shapes(dims)
    offset = 16
    params = {}
    for name in PARAM_ORDER:
        shape = shapes[name]
        (count,) = struct.unpack_from("<I", payload, offset)
        offset += 4
        expected = int(np.prod(shape))
        if count != expected:
            raise DataError(f"{path}: tensor {name!r} has {count} values, expected {expected}")
        params[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(payload):
        raise DataError(f"{path}: trailing bytes after parameter data")
    return CvseModel(dims=dims, params=params, margin=margin, negatives=negatives)
