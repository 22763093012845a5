"""Per-evaluation metrics rows and their CSV form."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

from .model import atomic_write_bytes

BASE_COLUMNS = ["iteration", "epoch", "mean_batch_loss", "train_accuracy", "test_accuracy"]


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    mean_batch_loss: float
    train_accuracy: float
    test_accuracy: Optional[float] = None
    extra: dict = field(default_factory=dict)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.10f}"
    return str(value)


def metrics_csv(records: list[MetricsRecord]) -> str:
    extra_cols = list(records[0].extra) if records else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BASE_COLUMNS + extra_cols)
    for r in records:
        row = [r.iteration, r.epoch, r.mean_batch_loss, r.train_accuracy, r.test_accuracy]
        row += [r.extra.get(c) for c in extra_cols]
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_metrics_csv(records: list[MetricsRecord], path):
    atomic_write_bytes(path, metrics_csv(records).encode("utf-8"))


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
