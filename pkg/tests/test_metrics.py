import math

import pytest

from fedsi.metrics import FIELDS, MetricsRecord, MetricsSink, read_metrics, write_metrics
from fedsi.models import TokenStats


def records():
    return [MetricsRecord.from_stats(r, "eval", TokenStats(10, 8, 20.0, 16.0 + r, 3), upload_bytes=r)
            for r in range(4)]


@pytest.mark.parametrize("fmt", ["jsonl", "csv"])
def test_append_one_line_per_record(tmp_path, fmt):
    path = tmp_path / f"m.{fmt}"
    sink = MetricsSink(path, fmt)
    header = 1 if fmt == "csv" else 0
    for i, rec in enumerate(records(), start=1):
        write_metrics(rec, sink)
        assert len(path.read_text().splitlines()) == i + header
    back = read_metrics(path)
    assert [r["round"] for r in back] == [0, 1, 2, 3]
    assert back[2] == records()[2].to_dict()


def test_csv_header_fields(tmp_path):
    path = tmp_path / "m.csv"
    MetricsSink(path, "csv").write(records()[0])
    assert path.read_text().splitlines()[0] == ",".join(FIELDS)


def test_perplexity_is_exp_loss():
    for rec in records():
        assert abs(rec.perplexity - math.exp(rec.loss)) <= 1e-9 * rec.perplexity


def test_from_stats_definitions():
    rec = MetricsRecord.from_stats(5, "train_sample", TokenStats(10, 4, 9.0, 4.0, 1))
    assert rec.loss == 1.0 and rec.accuracy == 0.25 and rec.counted_tokens == 4
    empty = MetricsRecord.from_stats(0, "eval", TokenStats())
    assert (empty.loss, empty.perplexity, empty.accuracy, empty.counted_tokens) == (0.0, 1.0, 0.0, 0)


def test_io_error_names_path(tmp_path):
    sink = MetricsSink(tmp_path / "no" / "such" / "dir" / "m.jsonl")
    with pytest.raises(OSError, match="m.jsonl"):
        sink.write(records()[0])


def test_unknown_format():
    with pytest.raises(ValueError):
        MetricsSink("x", "parquet")
