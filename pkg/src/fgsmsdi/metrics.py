"""Per-epoch metrics rows, the metrics CSV, and the JSON run manifest."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, List, Union

MANIFEST_VERSION = 1
CSV_COLUMNS = ("epoch", "split", "attack", "accuracy", "loss", "wall_ms", "gen_updates")


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    split: str
    attack: str
    accuracy: float
    loss: float
    wall_ms: float
    gen_updates: int

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.wall_ms < 0:
            raise ValueError(f"negative wall clock {self.wall_ms}")


def write_metrics_csv(path: Union[str, Path], records: Iterable[MetricsRecord]) -> None:
    # repr() round-trips floats exactly
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.epoch, r.split, r.attack, repr(float(r.accuracy)), repr(float(r.loss)),
                        repr(float(r.wall_ms)), r.gen_updates])


def read_metrics_csv(path: Union[str, Path]) -> List[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics columns {reader.fieldnames}")
        return [
            MetricsRecord(int(row["epoch"]), row["split"], row["attack"], float(row["accuracy"]),
                          float(row["loss"]), float(row["wall_ms"]), int(row["gen_updates"]))
            for row in reader
        ]


def write_manifest(path: Union[str, Path], config: dict, **extra) -> None:
    doc = {"format_version": MANIFEST_VERSION, "config": config, **extra}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path: Union[str, Path]) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('format_version')!r}")
    return doc
