"""Dataset files: feature-map binaries, JSON-lines manifests, sentence
embedding tables, group files, and prediction files.

Feature-map format: magic "CVFM", u16 version, u32 width, u32 height,
u32 channels (all little-endian), then width*height*channels f32
little-endian values, region-major then channel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import FeatureMap, Study
from .textpipe import FindingGroup

FEATURE_MAGIC = b"CVFM"
FEATURE_VERSION = 1

SPLITS = ("train", "dev", "test")


def write_feature_map(path, fmap: FeatureMap) -> None:
    data = np.ascontiguousarray(fmap.regions, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<HIII", FEATURE_VERSION, fmap.width, fmap.height, fmap.channels))
        fh.write(data.tobytes())


def read_feature_map(path) -> FeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 18 or blob[:4] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature-map file")
    version, w, h, d2 = struct.unpack_from("<HIII", blob, 4)
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature-map version {version}")
    expected = 18 + 4 * w * h * d2
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(blob)}")
    regions = np.frombuffer(blob, dtype="<f4", count=w * h * d2, offset=18).reshape(w * h, d2).copy()
    return FeatureMap(width=w, height=h, regions=regions)


# ---------------------------------------------------------------------------
# manifest

@dataclass
class StudyRecord:
    study_id: str
    split: str
    report_text: str | None
    gold: tuple[str, ...]
    frontal: FeatureMap
    lateral: FeatureMap

    def to_study(self) -> Study:
        return Study(study_id=self.study_id, frontal=self.frontal,
                     lateral=self.lateral, gold=self.gold)


@dataclass
class Dataset:
    root: Path
    records: list[StudyRecord]

    def split(self, name: str) -> list[StudyRecord]:
        return [r for r in self.records if r.split == name]

    def split_counts(self) -> dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}

    def find(self, study_id: str) -> StudyRecord:
        for record in self.records:
            if record.study_id == study_id:
                return record
        raise DataError(f"unknown study id {study_id!r}")


def ingest(manifest_path, expected_d2: int | None = None) -> Dataset:
    """Load and validate a JSON-lines manifest.

    Each line holds {study_id, split, report | report_path, gold?, frontal,
    lateral} with feature paths relative to the manifest directory. Raises
    DataError naming the offending record on duplicates, missing files, or
    channel-count mismatches.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest {manifest_path} does not exist")
    root = manifest_path.parent
    records = []
    seen_ids = set()
    d2 = expected_d2
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{manifest_path}:{lineno}: bad JSON ({exc})") from exc
            sid = raw.get("study_id")
            if not sid:
                raise DataError(f"{manifest_path}:{lineno}: record has no study_id")
            if sid in seen_ids:
                raise DataError(f"duplicate study id {sid!r}")
            seen_ids.add(sid)
            split = raw.get("split")
            if split not in SPLITS:
                raise DataError(f"study {sid!r}: unknown split {split!r}")
            report = raw.get("report")
            if report is None and raw.get("report_path"):
                report_file = root / raw["report_path"]
                if not report_file.exists():
                    raise DataError(f"study {sid!r}: report file {report_file} does not exist")
                report = report_file.read_text("utf-8")
            maps = {}
            for view in ("frontal", "lateral"):
                rel = raw.get(view)
                if not rel:
                    raise DataError(f"study {sid!r}: missing {view} feature path")
                path = root / rel
                if not path.exists():
                    raise DataError(f"study {sid!r}: {view} feature file {path} does not exist")
                maps[view] = read_feature_map(path)
                if d2 is None:
                    d2 = maps[view].channels
                elif maps[view].channels != d2:
                    raise DataError(
                        f"study {sid!r}: {view} map has {maps[view].channels} channels, expected {d2}"
                    )
            records.append(StudyRecord(
                study_id=sid, split=split, report_text=report,
                gold=tuple(raw.get("gold", ())),
                frontal=maps["frontal"], lateral=maps["lateral"],
            ))
    if not records:
        raise DataError(f"{manifest_path}: no studies")
    return Dataset(root=root, records=records)


# ---------------------------------------------------------------------------
# sentence embeddings (one id per line: id, then whitespace-separated reals)

def write_embeddings(path, table: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(table):
            values = " ".join(repr(float(x)) for x in table[key])
            fh.write(f"{key} {values}\n")


def read_embeddings(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding file {path} does not exist")
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
                raise DataError(f"{path}:{lineno}: vector dim {vec.shape[0]} != {dim}")
            table[parts[0]] = vec
    if not table:
        raise DataError(f"{path}: empty embedding file")
    return table


# ---------------------------------------------------------------------------
# group files (JSON lines)

def write_groups(path, groups: list[FindingGroup], texts: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in groups:
            fh.write(json.dumps({
                "group_id": g.group_id,
                "cluster_id": g.cluster_id,
                "pattern": list(g.pattern),
                "member_ids": list(g.member_ids),
                "representative_id": g.representative_id,
                "representative_text": texts[g.representative_id],
            }) + "\n")


@dataclass(frozen=True)
class GroupRecord:
    group_id: int
    cluster_id: int
    pattern: tuple[int, ...]
    member_ids: tuple[str, ...]
    representative_id: str
    representative_text: str


def read_groups(path) -> list[GroupRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"group file {path} does not exist")
    groups = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            groups.append(GroupRecord(
                group_id=raw["group_id"], cluster_id=raw["cluster_id"],
                pattern=tuple(raw["pattern"]), member_ids=tuple(raw["member_ids"]),
                representative_id=raw["representative_id"],
                representative_text=raw["representative_text"],
            ))
    if not groups:
        raise DataError(f"{path}: empty group file")
    return groups


# ---------------------------------------------------------------------------
# prediction files (JSON lines)

def write_predictions(path, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def read_predictions(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"prediction file {path} does not exist")
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
