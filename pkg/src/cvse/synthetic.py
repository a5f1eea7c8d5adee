"""Synthetic dataset generator with a ground-truth concept map.

Each concept gets a visual prototype (planted into a contiguous region block
per view), a text prototype (sentence embeddings are prototype plus noise),
and a surface template with an optional modifier slot drawn from the
mutually exclusive term sets. The emitted manifest, feature maps, sentence
embedding table, and truth map make retrieval quality, grouping counts, and
attention localization checkable exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataio import write_embeddings, write_feature_map
from .errors import UsageError
from .model import FeatureMap

# (template tokens with one MOD slot, modifier axis); base wording avoids all
# mutex stems so the pattern of a realized sentence is decided by the modifier
CONCEPT_TEMPLATES = (
    ("MOD pleural effusion is seen", "side"),
    ("there is MOD basilar atelectasis", "severity"),
    ("MOD cardiomegaly is present", "course"),
    ("MOD upper lobe opacity noted", "side"),
    ("pulmonary edema appears MOD on this exam", "course"),
    ("MOD apical pneumothorax identified", "side"),
    ("MOD degenerative changes of the spine", "severity"),
    ("the cardiac silhouette is MOD", "size"),
    ("MOD consolidation in the lingula", "side"),
    ("MOD interstitial markings throughout", "extent"),
    ("a MOD nodular density projects over the hilum", "extent"),
    ("MOD rib fracture deformity again demonstrated", "side"),
)

MODIFIER_AXES = {
    "side": ("right", "left"),
    "severity": ("mild", "severe"),
    "size": ("enlarged", "decreased"),
    "extent": ("small", "large"),
    "level": ("low", "high"),
    "course": ("improved", "worsened"),
}

LEAD_INS = ("", "stable", "persistent", "new")

NORMAL_SENTENCES = (
    "the lungs are well expanded.",
    "heart size within normal limits.",
    "the mediastinum is unremarkable.",
    "osseous structures are intact.",
    "visualized soft tissues are normal.",
    "no acute cardiopulmonary abnormality.",
)


def _realize(rng: np.random.Generator, template: str, modifier: str | None) -> str:
    words = []
    lead = LEAD_INS[rng.integers(len(LEAD_INS))]
    if lead:
        words.append(lead)
    for tok in template.split():
        if tok == "MOD":
            if modifier is not None:
                words.append(modifier)
        else:
            words.append(tok)
    return " ".join(words) + "."


def _plant_blocks(rng: np.random.Generator, w: int, h: int, count: int) -> list[tuple[int, int, int, int]]:
    """Disjoint (row, col, block_h, block_w) placements on a block tiling."""
    bh, bw = min(2, h), min(2, w)
    slots = [(r * bh, c * bw) for r in range(h // bh) for c in range(w // bw)]
    if count > len(slots):
        raise UsageError(
            f"cannot place {count} disjoint {bh}x{bw} blocks on a {h}x{w} grid "
            f"({len(slots)} slots available)"
        )
    chosen = rng.choice(len(slots), size=count, replace=False)
    return [(slots[i][0], slots[i][1], bh, bw) for i in chosen]


def gen_synthetic(cfg: RunConfig, out_dir) -> dict:
    """Write manifest, feature maps, embeddings, and truth map; returns the truth map."""
    if cfg.concepts < 2:
        raise UsageError("need at least 2 concepts")
    if cfg.concepts > len(CONCEPT_TEMPLATES):
        raise UsageError(f"at most {len(CONCEPT_TEMPLATES)} concepts are available")
    if not 1 <= cfg.variants <= 3:
        raise UsageError("variants must be 1, 2 or 3")

    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    visual_protos = rng.standard_normal((cfg.concepts, cfg.d2))
    text_protos = rng.standard_normal((cfg.concepts, cfg.d1))
    normal_protos = rng.standard_normal((len(NORMAL_SENTENCES), cfg.d1))

    concept_axes = []
    concept_variants: list[tuple[str | None, ...]] = []
    for c in range(cfg.concepts):
        _, axis = CONCEPT_TEMPLATES[c]
        concept_axes.append(axis)
        values = MODIFIER_AXES[axis]
        if cfg.variants == 1:
            concept_variants.append((None,))
        elif cfg.variants == 2:
            concept_variants.append(values)
        else:
            concept_variants.append((None,) + values)

    variant_cursor = [0] * cfg.concepts
    embeddings: dict[str, np.ndarray] = {}
    manifest_lines = []
    truth_sentences: dict[str, dict] = {}
    truth_studies: dict[str, dict] = {}
    realized_pairs: set[tuple[int, int]] = set()

    split_plan = [("train", cfg.train_studies), ("dev", cfg.dev_studies), ("test", cfg.test_studies)]
    for split, count in split_plan:
        for index in range(count):
            study_id = f"{split}{index:04d}"
            n_concepts = int(rng.integers(1, min(3, cfg.concepts) + 1))
            chosen = sorted(int(c) for c in rng.choice(cfg.concepts, size=n_concepts, replace=False))

            abnormal = []
            for c in chosen:
                variants = concept_variants[c]
                v_idx = variant_cursor[c] % len(variants)
                variant_cursor[c] += 1
                realized_pairs.add((c, v_idx))
                text = _realize(rng, CONCEPT_TEMPLATES[c][0], variants[v_idx])
                abnormal.append((c, variants[v_idx], text))

            n_normal = int(rng.integers(2, 5))
            normal_idx = sorted(int(i) for i in rng.choice(len(NORMAL_SENTENCES), size=n_normal, replace=False))
            entries = [("abnormal", a) for a in abnormal] + [("normal", i) for i in normal_idx]
            order = rng.permutation(len(entries))

            texts, gold = [], []
            blocks_by_view: dict[str, dict[int, tuple[int, int, int, int]]] = {}
            for pos, entry_idx in enumerate(order):
                kind, payload = entries[entry_idx]
                sid = f"{study_id}:{pos}"
                if kind == "abnormal":
                    concept, variant, text = payload
                    gold.append(sid)
                    embeddings[sid] = text_protos[concept] + cfg.noise * rng.standard_normal(cfg.d1)
                    truth_sentences[sid] = {"concept": concept, "variant": variant}
                else:
                    text = NORMAL_SENTENCES[payload]
                    embeddings[sid] = normal_protos[payload] + cfg.noise * rng.standard_normal(cfg.d1)
                texts.append(text)

            for view in ("frontal", "lateral"):
                grid = cfg.noise * rng.standard_normal((cfg.h * cfg.w, cfg.d2))
                placed = _plant_blocks(rng, cfg.w, cfg.h, len(chosen))
                view_blocks = {}
                for concept, (r0, c0, bh, bw) in zip(chosen, placed):
                    for r in range(r0, r0 + bh):
                        for c in range(c0, c0 + bw):
                            grid[r * cfg.w + c] = visual_protos[concept] + cfg.noise * rng.standard_normal(cfg.d2)
                    view_blocks[concept] = (r0, c0, bh, bw)
                blocks_by_view[view] = view_blocks
                fmap = FeatureMap(width=cfg.w, height=cfg.h, regions=grid.astype(np.float32))
                write_feature_map(out_dir / "features" / f"{study_id}_{view}.cvfm", fmap)

            truth_studies[study_id] = {
                "concepts": chosen,
                "blocks": {view: {str(c): list(b) for c, b in vb.items()}
                           for view, vb in blocks_by_view.items()},
            }
            manifest_lines.append(json.dumps({
                "study_id": study_id,
                "split": split,
                "report": " ".join(texts),
                "gold": gold,
                "frontal": f"features/{study_id}_frontal.cvfm",
                "lateral": f"features/{study_id}_lateral.cvfm",
            }))

    truth = {
        "concepts": [
            {"id": c, "template": CONCEPT_TEMPLATES[c][0], "axis": concept_axes[c],
             "variants": [v if v is not None else "" for v in concept_variants[c]]}
            for c in range(cfg.concepts)
        ],
        "sentences": truth_sentences,
        "studies": truth_studies,
        "expected_groups": len(realized_pairs),
    }

    (out_dir / "manifest.jsonl").write_text("\n".join(manifest_lines) + "\n", encoding="utf-8")
    write_embeddings(out_dir / "embeddings.txt", embeddings)
    (out_dir / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return truth
