"""Command-line surface: gen-synthetic, cluster, train, retrieve, eval,
export-attention. Every RunConfig key is also a flag; flags override the
--config file, which overrides defaults. Exit codes: 0 success, 1 validation
error, 2 runtime error."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio, evalkit, textpipe
from .config import RunConfig, build_config
from .errors import CvseError, DataError, NumericError, ShapeError, UsageError
from .model import (Candidate, CvseModel, ModelDims, TrainConfig, TrainingData,
                    load_model, retrieve, train)
from .synthetic import gen_synthetic


def _split_all_reports(dataset: dataio.Dataset) -> dict[str, list[textpipe.Sentence]]:
    sentences = {}
    for record in dataset.records:
        if record.report_text is None:
            raise DataError(f"study {record.study_id!r} has no report text")
        sentences[record.study_id] = textpipe.split_sentences(record.study_id, record.report_text)
    return sentences


def _embedding_source(cfg: RunConfig, sentences_by_sid: dict[str, textpipe.Sentence]):
    """Sentence id -> vector. Prefers a precomputed per-sentence table on disk,
    falling back to the configured text embedder."""
    path = cfg.embeddings_path()
    if path.exists():
        table = dataio.read_embeddings(path)

        def lookup(sid: str) -> np.ndarray:
            vec = table.get(sid)
            if vec is None:
                raise DataError(f"sentence {sid!r} is missing from {path}")
            return vec

        return lookup
    if cfg.embedder == "table":
        if not cfg.table:
            raise UsageError("embedder=table requires a table path")
        embedder = textpipe.TableEmbedder.from_file(cfg.table)
    else:
        embedder = textpipe.HashEmbedder(cfg.d1)

    def embed(sid: str) -> np.ndarray:
        return textpipe.embed_sentence(embedder, sentences_by_sid[sid])

    return embed


def cmd_gen_synthetic(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    truth = gen_synthetic(cfg, out)
    print(f"wrote synthetic dataset to {out} "
          f"({cfg.train_studies}/{cfg.dev_studies}/{cfg.test_studies} studies, "
          f"{cfg.concepts} concepts, {truth['expected_groups']} expected groups)")
    return truth


def cmd_cluster(cfg: RunConfig) -> tuple[int, int]:
    """split -> classify -> embed -> k-means -> refine -> representatives."""
    dataset = dataio.ingest(cfg.manifest_path(), expected_d2=cfg.d2)
    by_study = _split_all_reports(dataset)
    all_sentences = [s for record in dataset.records for s in by_study[record.study_id]]
    by_sid = {s.sid: s for s in all_sentences}

    labeled = []
    for record in dataset.split("train"):
        gold = set(record.gold)
        for sentence in by_study[record.study_id]:
            labeled.append((sentence.text, sentence.sid in gold))
    classifier = textpipe.train_classifier(labeled)

    abnormal = [s for s in all_sentences if textpipe.classify_abnormal(classifier, s)[0]]
    if not abnormal:
        raise DataError("classifier marked no sentence as abnormal")

    lookup = _embedding_source(cfg, by_sid)
    embeddings = {s.sid: lookup(s.sid) for s in abnormal}
    groups, n_clusters = textpipe.build_groups(abnormal, embeddings, k=cfg.clusters, seed=cfg.seed)

    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    dataio.write_groups(cfg.groups_path(), groups, {s.sid: s.text for s in abnormal})
    print(f"clusters before refinement: {n_clusters}, groups after refinement: {len(groups)}")
    return n_clusters, len(groups)


def _load_pool(cfg: RunConfig, lookup) -> list[Candidate]:
    return [Candidate(group_id=g.group_id, sid=g.representative_id,
                      text=g.representative_text, embedding=lookup(g.representative_id))
            for g in dataio.read_groups(cfg.groups_path())]


def _gold_group_map(groups) -> dict[str, int]:
    return {sid: g.group_id for g in groups for sid in g.member_ids}


def cmd_train(cfg: RunConfig) -> dict:
    dataset = dataio.ingest(cfg.manifest_path(), expected_d2=cfg.d2)
    by_study = _split_all_reports(dataset)
    by_sid = {s.sid: s for sentences in by_study.values() for s in sentences}
    lookup = _embedding_source(cfg, by_sid)

    groups = dataio.read_groups(cfg.groups_path())
    pool = _load_pool(cfg, lookup)
    member_group = _gold_group_map(groups)

    train_studies = [r.to_study() for r in dataset.split("train")]
    dev_studies = [r.to_study() for r in dataset.split("dev")]
    embeddings = {sid: lookup(sid) for record in dataset.records for sid in record.gold}
    dev_gold = {
        s.study_id: frozenset(member_group[sid] for sid in s.gold if sid in member_group)
        for s in dev_studies
    }

    dims = ModelDims(d1=cfg.d1, d2=cfg.d2, d=cfg.d, d_att=cfg.attention_dim)
    tcfg = TrainConfig(epochs=cfg.epochs, lr=cfg.lr, margin=cfg.margin,
                       negatives=cfg.negatives, batch_size=cfg.batch_size,
                       seed=cfg.seed, eval_k=cfg.k)
    data = TrainingData(train_studies=train_studies, embeddings=embeddings,
                        dev_studies=dev_studies, dev_gold_groups=dev_gold, pool=pool)
    model, log = train(dims, data, tcfg)

    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    model.save(cfg.checkpoint_path())
    header = {
        "dims": dataclasses.asdict(dims),
        "epochs": cfg.epochs, "lr": cfg.lr, "margin": cfg.margin,
        "negatives": cfg.negatives, "batch_size": cfg.batch_size,
        "seed": cfg.seed, "dev_eval_k": cfg.k,
    }
    log_path = Path(cfg.out) / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": header}) + "\n")
        for entry in log:
            fh.write(json.dumps(entry) + "\n")
    best = max((e["dev_recall"] for e in log), default=0.0)
    print(f"trained {cfg.epochs} epochs; best dev recall@{cfg.k} = {best:.3f}; "
          f"checkpoint at {cfg.checkpoint_path()}")
    return {"log": log, "best_dev_recall": best}


def cmd_retrieve(cfg: RunConfig, split: str = "test") -> list[dict]:
    dataset = dataio.ingest(cfg.manifest_path(), expected_d2=cfg.d2)
    by_study = _split_all_reports(dataset)
    by_sid = {s.sid: s for sentences in by_study.values() for s in sentences}
    lookup = _embedding_source(cfg, by_sid)
    pool = _load_pool(cfg, lookup)
    model = load_model(cfg.checkpoint_path(), margin=cfg.margin, negatives=cfg.negatives)

    records = dataset.split(split)
    if not records:
        raise UsageError(f"split {split!r} is empty")
    rows = []
    for record in records:
        result = retrieve(model, record.to_study(), pool, k=min(cfg.k, len(pool)))
        rows.append({
            "study_id": record.study_id,
            "ranked": [[item.group_id, next(c.text for c in pool if c.group_id == item.group_id),
                        item.score] for item in result.items],
        })
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    dataio.write_predictions(cfg.predictions_path(), rows)
    print(f"wrote {len(rows)} predictions for split {split!r} to {cfg.predictions_path()}")
    return rows


def cmd_eval(cfg: RunConfig, split: str = "test") -> dict:
    dataset = dataio.ingest(cfg.manifest_path(), expected_d2=cfg.d2)
    by_study = _split_all_reports(dataset)
    groups = dataio.read_groups(cfg.groups_path())
    member_group = _gold_group_map(groups)
    predictions = dataio.read_predictions(cfg.predictions_path())

    records = {r.study_id: r for r in dataset.split(split)}
    predicted_ids = [row["study_id"] for row in predictions]
    missing = sorted(set(records) - set(predicted_ids))
    unknown = sorted(set(predicted_ids) - set(records))
    if missing or unknown:
        raise DataError(f"prediction/study mismatch: missing={missing}, unknown={unknown}")

    table = evalkit.load_keyword_table(cfg.keywords or None)
    pred_labels, gold_labels = [], []
    nlg_candidates, nlg_references = [], []
    retrieved_groups, gold_groups = [], []
    for row in predictions:
        record = records[row["study_id"]]
        texts_by_sid = {s.sid: s.text for s in by_study[record.study_id]}
        ranked_texts = [text for _, text, _ in row["ranked"]]
        gold_sids = sorted(record.gold)
        gold_texts = [texts_by_sid[sid] for sid in gold_sids if sid in texts_by_sid]

        pred_labels.append(evalkit.label_diseases(ranked_texts, table))
        gold_labels.append(evalkit.label_diseases(gold_texts, table))
        retrieved_groups.append([gid for gid, _, _ in row["ranked"]])
        gold_groups.append({member_group[sid] for sid in gold_sids if sid in member_group})
        if gold_texts:
            nlg_candidates.append([t for text in ranked_texts for t in textpipe.tokenize(text)])
            nlg_references.append([t for text in gold_texts for t in textpipe.tokenize(text)])

    k = min(cfg.k, min((len(r) for r in retrieved_groups), default=cfg.k))
    report = {
        "note": "corpus-level BLEU over aligned (prediction, reference) pairs",
        "split": split,
        "clinical": evalkit.clinical_metrics(pred_labels, gold_labels).to_dict(),
        "bleu_1": evalkit.bleu(nlg_candidates, nlg_references, max_n=1),
        "bleu_4": evalkit.bleu(nlg_candidates, nlg_references, max_n=4),
        "rouge_l": evalkit.rouge_l_corpus(nlg_candidates, nlg_references),
        "meteor": evalkit.meteor_corpus(nlg_candidates, nlg_references),
        "recall_at_k": {"k": k, "value": evalkit.recall_at_k(retrieved_groups, gold_groups, k)},
    }
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    with open(cfg.metrics_path(), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    print(f"recall@{k} = {report['recall_at_k']['value']:.3f}, "
          f"macro accuracy = {report['clinical']['macro']['accuracy']:.3f}; "
          f"report at {cfg.metrics_path()}")
    return report


def cmd_export_attention(cfg: RunConfig, study_id: str, sentence_id: str) -> list[Path]:
    dataset = dataio.ingest(cfg.manifest_path(), expected_d2=cfg.d2)
    record = dataset.find(study_id)
    by_study = _split_all_reports(dataset)
    by_sid = {s.sid: s for sentences in by_study.values() for s in sentences}
    if sentence_id not in by_sid:
        raise DataError(f"unknown sentence id {sentence_id!r}")
    lookup = _embedding_source(cfg, by_sid)
    model = load_model(cfg.checkpoint_path(), margin=cfg.margin, negatives=cfg.negatives)
    embedding = lookup(sentence_id)

    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    safe_sid = sentence_id.replace(":", "-")
    written = []
    for view, fmap in record.to_study().views.items():
        grid = model.attention_map(fmap, embedding)
        path = Path(cfg.out) / f"attention_{study_id}_{safe_sid}_{view}.csv"
        with open(path, "w", encoding="utf-8") as fh:
            for row in grid:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
        written.append(path)
        print(f"wrote {path} (sum = {grid.sum():.9f})")
    return written


# ---------------------------------------------------------------------------
# argument parsing

def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="flat key=value config file")
    for f in dataclasses.fields(RunConfig):
        kind = {int: int, float: float, str: str}[{"int": int, "float": float, "str": str}[f.type]
                                                  if isinstance(f.type, str) else f.type]
        parser.add_argument(f"--{f.name}", type=kind, default=None,
                            help=f"override config key {f.name} (default {f.default!r})")


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig)}
    return build_config(args.config, overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cvse",
                                     description="abnormal-finding retrieval pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-synthetic", "cluster", "train", "retrieve", "eval", "export-attention"):
        p = sub.add_parser(name)
        _add_config_flags(p)
        if name in ("retrieve", "eval"):
            p.add_argument("--split", default="test", choices=dataio.SPLITS)
        if name == "export-attention":
            p.add_argument("--study", required=True)
            p.add_argument("--sentence", required=True)
    args = parser.parse_args(argv)

    try:
        cfg = _config_from_args(args)
        if args.command == "gen-synthetic":
            cmd_gen_synthetic(cfg)
        elif args.command == "cluster":
            cmd_cluster(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "retrieve":
            cmd_retrieve(cfg, split=args.split)
        elif args.command == "eval":
            cmd_eval(cfg, split=args.split)
        elif args.command == "export-attention":
            cmd_export_attention(cfg, args.study, args.sentence)
    except (UsageError, DataError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, CvseError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
