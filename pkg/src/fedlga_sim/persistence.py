"""On-disk formats: parameter checkpoints, per-round metrics CSV and JSONL reports.

Checkpoint layout (all little-endian)::

    8 bytes   magic "FLGACKPT"
    4 bytes   unsigned dimension d
    8*d bytes IEEE-754 float64 values
"""

import csv
import json
import logging
import struct
from collections.abc import Iterable
from pathlib import Path
from typing import IO, Any

import numpy as np

from fedlga_sim.errors import (
    CheckpointDimensionError,
    CheckpointMagicError,
    CheckpointTruncatedError,
)
from fedlga_sim.model import ParamVector
from fedlga_sim.simulation import RoundRecord

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FLGACKPT"
_DIM = struct.Struct("<I")

METRICS_HEADER = (
    "round",
    "strategy",
    "seed",
    "train_loss",
    "test_loss",
    "test_acc",
    "rho_effective",
    "eta_l",
    "wall_ms",
)


def encode_checkpoint(params: ParamVector) -> bytes:
    values = np.ascontiguousarray(params, dtype="<f8")
    if values.ndim != 1:
        msg = f"checkpoints hold flat vectors, got shape {values.shape}"
        raise ValueError(msg)
    return CHECKPOINT_MAGIC + _DIM.pack(values.size) + values.tobytes()


def decode_checkpoint(
    raw: bytes, expected_dim: int | None = None, source: str = "<bytes>"
) -> ParamVector:
    """Parse checkpoint bytes.

    Raises:
        CheckpointMagicError: The magic bytes are wrong
        CheckpointTruncatedError: Header or payload is incomplete
        CheckpointDimensionError: The dimension differs from ``expected_dim``
    """
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        msg = f"{source}: bad magic, not a FLGACKPT checkpoint"
        raise CheckpointMagicError(msg)
    header = len(CHECKPOINT_MAGIC) + _DIM.size
    if len(raw) < header:
        msg = f"{source}: checkpoint header is truncated"
        raise CheckpointTruncatedError(msg)
    (dim,) = _DIM.unpack_from(raw, len(CHECKPOINT_MAGIC))
    if len(raw) < header + 8 * dim:
        msg = f"{source}: expected {dim} values, payload holds {(len(raw) - header) // 8}"
        raise CheckpointTruncatedError(msg)
    if expected_dim is not None and dim != expected_dim:
        msg = f"{source}: checkpoint has dimension {dim}, expected {expected_dim}"
        raise CheckpointDimensionError(msg)
    if dim == 0:
        return np.zeros(0, dtype=np.float64)
    return np.frombuffer(raw, dtype="<f8", count=dim, offset=header).astype(np.float64)


def write_checkpoint(params: ParamVector, path: str | Path) -> Path:
    """Write a parameter vector; returns the path written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params))
    logger.info("Wrote checkpoint of dimension %d to %s", params.size, path)
    return path


def read_checkpoint(path: str | Path, expected_dim: int | None = None) -> ParamVector:
    """Read a parameter vector written by :func:`write_checkpoint`."""
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), expected_dim, str(path))


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return ""
    return str(value)


class MetricsWriter:
    """Streams :class:`RoundRecord` rows into a metrics CSV file."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file: IO[str] | None = open(self.path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._file, lineterminator="\n")
        self._writer.writerow(METRICS_HEADER)
        self.rows_written = 0

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    def write(self, record: RoundRecord) -> None:
        if self._file is None:
            msg = f"{self.path} is already closed"
            raise ValueError(msg)
        self._writer.writerow([_cell(value) for value in record.to_row()])
        self.rows_written += 1

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None


def write_metrics(records: Iterable[RoundRecord], path: str | Path) -> Path:
    """Write a complete metrics CSV (header plus one row per record)."""
    with MetricsWriter(path) as writer:
        for record in records:
            writer.write(record)
    return Path(path)


def write_csv(path: str | Path, header: Iterable[str], rows: Iterable[Iterable[Any]]) -> Path:
    """Write a plain CSV table with the same cell formatting as the metrics files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_cell(value) for value in row])
    return path


def write_jsonl(path: str | Path, objects: Iterable[dict[str, Any]]) -> Path:
    """Write one JSON object per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for obj in objects:
            f.write(json.dumps(obj, ensure_ascii=False, default=_json_default))
            f.write("\n")
    return path


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    msg = f"cannot serialize {type(value).__name__} to JSON"
    raise TypeError(msg)
