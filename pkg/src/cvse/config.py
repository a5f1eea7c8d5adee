"""Run configuration: defaults, flat key=value config files, CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import UsageError


@dataclass
class RunConfig:
    # model dimensions
    d1: int = 64
    d2: int = 64
    d: int = 512
    d_att: int = 0  # 0 means "same as d"
    # training
    margin: float = 0.2
    negatives: int = 8
    batch_size: int = 32
    epochs: int = 40
    lr: float = 0.001
    # grouping / retrieval
    clusters: int = 8
    k: int = 3
    seed: int = 0
    embedder: str = "hash"  # "hash" or "table"
    # synthetic generation
    concepts: int = 8
    train_studies: int = 200
    dev_studies: int = 50
    test_studies: int = 50
    w: int = 4
    h: int = 4
    noise: float = 0.1
    variants: int = 1
    # paths (empty string means "derive from data/out")
    data: str = "."
    out: str = "out"
    manifest: str = ""
    embeddings: str = ""
    table: str = ""
    keywords: str = ""
    groups: str = ""
    checkpoint: str = ""
    predictions: str = ""
    metrics: str = ""

    def __post_init__(self):
        for name in ("d1", "d2", "d", "negatives", "batch_size", "clusters", "k",
                     "concepts", "w", "h", "variants"):
            if getattr(self, name) < 1:
                raise UsageError(f"config {name} must be >= 1")
        if self.d_att < 0 or self.epochs < 0:
            raise UsageError("d_att and epochs must be >= 0")
        if self.margin <= 0:
            raise UsageError("margin must be positive")
        if self.noise < 0:
            raise UsageError("noise must be >= 0")
        if self.embedder not in ("hash", "table"):
            raise UsageError(f"unknown embedder {self.embedder!r}")

    @property
    def attention_dim(self) -> int:
        return self.d_att or self.d

    # -- derived paths ------------------------------------------------------

    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else Path(self.data) / "manifest.jsonl"

    def embeddings_path(self) -> Path:
        return Path(self.embeddings) if self.embeddings else Path(self.data) / "embeddings.txt"

    def groups_path(self) -> Path:
        return Path(self.groups) if self.groups else Path(self.out) / "groups.jsonl"

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "model.cvse"

    def predictions_path(self) -> Path:
        return Path(self.predictions) if self.predictions else Path(self.out) / "predictions.jsonl"

    def metrics_path(self) -> Path:
        return Path(self.metrics) if self.metrics else Path(self.out) / "metrics.json"


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    return raw


def parse_config_file(path) -> dict:
    """Flat key=value lines; blank lines and '#' comments are ignored."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = _coerce(key, raw)
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {raw!r}") from exc
    return values


def build_config(config_path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then config-file values, then explicit overrides."""
    values = {}
    if config_path:
        values.update(parse_config_file(config_path))
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    return RunConfig(**values)
