"""Per-round metric records and append-only sinks (JSON lines or CSV)."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

from fedsi.models import TokenStats

FIELDS = ("round", "split", "loss", "perplexity", "accuracy", "counted_tokens",
          "wall_seconds", "upload_bytes", "diverged")


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    split: str  # "train_sample" or "eval"
    loss: float
    perplexity: float
    accuracy: float
    counted_tokens: int
    wall_seconds: float = 0.0
    upload_bytes: int = 0
    diverged: bool = False

    @classmethod
    def from_stats(cls, round: int, split: str, stats: TokenStats, **extra) -> "MetricsRecord":
        loss = stats.loss
        ppl = math.exp(loss) if math.isfinite(loss) and loss < 700 else math.inf
        return cls(round, split, loss, ppl, stats.accuracy, stats.counted, **extra)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class MetricsSink:
    """Appends one line per record; CSV files get a header when created."""

    def __init__(self, path: str | Path, fmt: str = "jsonl"):
        if fmt not in ("jsonl", "csv"):
            raise ValueError(f"unknown metrics format {fmt!r}")
        self.path = Path(path)
        self.fmt = fmt

    def write(self, record: MetricsRecord) -> None:
        row = record.to_dict()
        if self.fmt == "jsonl":
            line = json.dumps(row) + "\n"
        else:
            buf = io.StringIO()
            csv.writer(buf, lineterminator="\n").writerow([row[f] for f in FIELDS])
            line = buf.getvalue()
        try:
            new = not self.path.exists() or self.path.stat().st_size == 0
            with open(self.path, "a", encoding="utf-8") as fh:
                if new and self.fmt == "csv":
                    fh.write(",".join(FIELDS) + "\n")
                fh.write(line)
        except OSError as exc:
            raise OSError(f"{self.path}: cannot append metrics ({exc.strerror or exc})") from exc


def write_metrics(record: MetricsRecord, sink: MetricsSink) -> None:
    sink.write(record)


def read_metrics(path: str | Path) -> list[dict]:
    """Parse a metrics file written by :class:`MetricsSink` (either format)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".csv":
        rows = list(csv.DictReader(io.StringIO(text)))
        out = []
        for r in rows:
            out.append({
                "round": int(r["round"]), "split": r["split"], "loss": float(r["loss"]),
                "perplexity": float(r["perplexity"]), "accuracy": float(r["accuracy"]),
                "counted_tokens": int(r["counted_tokens"]), "wall_seconds": float(r["wall_seconds"]),
                "upload_bytes": int(r["upload_bytes"]), "diverged": r["diverged"] == "True",
            })
        return out
    return [json.loads(line) for line in text.splitlines() if line]
