"""Tests for checkpoints, metrics CSV files and JSONL reports."""

import json
import struct

import numpy as np
import pytest

from fedlga_sim.errors import (
    CheckpointDimensionError,
    CheckpointMagicError,
    CheckpointTruncatedError,
)
from fedlga_sim.persistence import (
    CHECKPOINT_MAGIC,
    METRICS_HEADER,
    MetricsWriter,
    decode_checkpoint,
    encode_checkpoint,
    read_checkpoint,
    write_checkpoint,
    write_csv,
    write_jsonl,
    write_metrics,
)
from fedlga_sim.simulation import RoundRecord


@pytest.fixture
def records():
    """Two rounds of metrics."""
    return [
        RoundRecord(0, "fedlga", 3, 2.25, 2.5, 0.125, 0.5, 0.05, 12.0),
        RoundRecord(1, "fedlga", 3, 1.0 / 3.0, 0.75, 0.5, 0.4, 0.05, 9.5),
    ]


class TestCheckpoint:
    """Binary parameter checkpoints."""

    def test_layout(self):
        """Magic, little-endian dimension, then float64 values."""
        raw = encode_checkpoint(np.array([1.0, -2.5]))
        assert raw[:8] == CHECKPOINT_MAGIC
        assert struct.unpack("<I", raw[8:12]) == (2,)
        assert struct.unpack("<2d", raw[12:]) == (1.0, -2.5)

    @pytest.mark.parametrize("dim", [0, 1, 10_000])
    def test_bit_exact_restore(self, tmp_path, dim):
        """Written parameters come back bit for bit."""
        params = np.random.default_rng(dim).normal(size=dim)
        path = write_checkpoint(params, tmp_path / "nested" / "ckpt.bin")
        restored = read_checkpoint(path, expected_dim=dim)
        assert restored.dtype == np.float64
        assert restored.tobytes() == params.tobytes()

    def test_special_values_preserved(self):
        params = np.array([np.inf, -0.0, 5e-324, np.nan])
        assert decode_checkpoint(encode_checkpoint(params)).tobytes() == params.tobytes()

    def test_bad_magic(self):
        with pytest.raises(CheckpointMagicError):
            decode_checkpoint(b"NOTACKPT" + struct.pack("<I", 0))

    def test_truncated_header(self):
        with pytest.raises(CheckpointTruncatedError):
            decode_checkpoint(CHECKPOINT_MAGIC + b"\x01")

    def test_truncated_payload(self):
        raw = encode_checkpoint(np.ones(3))[:-1]
        with pytest.raises(CheckpointTruncatedError, match="expected 3 values"):
            decode_checkpoint(raw)

    def test_dimension_mismatch(self, tmp_path):
        path = write_checkpoint(np.ones(4), tmp_path / "ckpt.bin")
        with pytest.raises(CheckpointDimensionError, match="expected 5"):
            read_checkpoint(path, expected_dim=5)

    def test_rejects_matrices(self):
        with pytest.raises(ValueError, match="flat vectors"):
            encode_checkpoint(np.ones((2, 2)))


class TestMetricsCsv:
    """Per-round metrics files."""

    def test_header_and_rows(self, tmp_path, records):
        """Columns follow the fixed header; floats round-trip through repr."""
        path = write_metrics(records, tmp_path / "run.csv")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == ",".join(METRICS_HEADER)
        assert lines[1] == "0,fedlga,3,2.25,2.5,0.125,0.5,0.05,12.0"
        assert float(lines[2].split(",")[3]) == 1.0 / 3.0
        assert len(lines) == 3

    def test_empty_run_writes_header_only(self, tmp_path):
        path = write_metrics([], tmp_path / "empty.csv")
        assert path.read_text(encoding="utf-8") == ",".join(METRICS_HEADER) + "\n"

    def test_streaming_writer(self, tmp_path, records):
        with MetricsWriter(tmp_path / "stream.csv") as writer:
            for record in records:
                writer.write(record)
            assert writer.rows_written == 2
        with pytest.raises(ValueError, match="already closed"):
            writer.write(records[0])

    def test_write_csv_blanks_none(self, tmp_path):
        path = write_csv(tmp_path / "table.csv", ("a", "b"), [[1, None], [0.5, "x"]])
        assert path.read_text(encoding="utf-8") == "a,b\n1,\n0.5,x\n"


class TestJsonl:
    """JSON-lines reports."""

    def test_one_object_per_line(self, tmp_path):
        """numpy scalars and arrays are converted to plain JSON values."""
        path = write_jsonl(
            tmp_path / "report.jsonl",
            [{"suite": "hessian", "value": np.float64(1.5)}, {"values": np.arange(3)}],
        )
        lines = path.read_text(encoding="utf-8").splitlines()
        assert [json.loads(line) for line in lines] == [
            {"suite": "hessian", "value": 1.5},
            {"values": [0, 1, 2]},
        ]

    def test_unserializable_value(self, tmp_path):
        with pytest.raises(TypeError, match="cannot serialize"):
            write_jsonl(tmp_path / "bad.jsonl", [{"value": object()}])
