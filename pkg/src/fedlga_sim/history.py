"""Run History - SQLite registry of experiment runs and their round records."""

import json
import logging
import os
import sqlite3
from collections.abc import Iterator
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any

from fedlga_sim.simulation import RoundRecord

logger = logging.getLogger(__name__)

_SCHEMA = """
CREATE TABLE IF NOT EXISTS runs (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    created_at TEXT NOT NULL,
    strategy TEXT NOT NULL,
    seed INTEGER NOT NULL,
    config TEXT NOT NULL,
    final_accuracy REAL,
    rounds_to_target INTEGER
);
CREATE TABLE IF NOT EXISTS rounds (
    run_id INTEGER NOT NULL REFERENCES runs(id),
    round INTEGER NOT NULL,
    train_loss REAL NOT NULL,
    test_loss REAL NOT NULL,
    test_acc REAL NOT NULL,
    rho_effective REAL NOT NULL,
    eta_l REAL NOT NULL,
    wall_ms REAL NOT NULL,
    PRIMARY KEY (run_id, round)
);
"""


class RunHistory:
    """Stores finished runs so sweeps and reruns can be compared later."""

    def __init__(self, db_path: str | Path | None = None) -> None:
        """Open (and create if needed) the history database.

        Args:
            db_path: SQLite file; defaults to ``FEDLGA_HISTORY_DB`` or ``runs/history.db``
        """
        if db_path is None:
            db_path = os.getenv("FEDLGA_HISTORY_DB", str(Path("runs") / "history.db"))
        self.db_path = str(db_path)
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        with self.get_connection() as conn:
            conn.executescript(_SCHEMA)

    @contextmanager
    def get_connection(self) -> Iterator[sqlite3.Connection]:
        """Connection that commits on success and rolls back on error."""
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        try:
            yield conn
            conn.commit()
        except Exception:
            conn.rollback()
            raise
        finally:
            conn.close()

    def log_run(
        self,
        strategy: str,
        seed: int,
        config_text: str,
        records: list[RoundRecord],
        rounds_to_target: int | None = None,
    ) -> int:
        """Store a run with all its round records.

        Returns:
            The new run id
        """
        final_accuracy = records[-1].test_accuracy if records else None
        with self.get_connection() as conn:
            cursor = conn.execute(
                """
                INSERT INTO runs (created_at, strategy, seed, config, final_accuracy,
                                  rounds_to_target)
                VALUES (?, ?, ?, ?, ?, ?)
                """,
                (
                    datetime.now().isoformat(),
                    strategy,
                    seed,
                    config_text,
                    final_accuracy,
                    rounds_to_target,
                ),
            )
            run_id = int(cursor.lastrowid)
            conn.executemany(
                """
                INSERT INTO rounds (run_id, round, train_loss, test_loss, test_acc,
                                    rho_effective, eta_l, wall_ms)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
                """,
                [
                    (
                        run_id,
                        r.round,
                        r.train_loss,
                        r.test_loss,
                        r.test_accuracy,
                        r.rho_effective,
                        r.eta_l,
                        r.wall_ms,
                    )
                    for r in records
                ],
            )
        logger.info("Recorded run %d (%s, seed %d) in %s", run_id, strategy, seed, self.db_path)
        return run_id

    def get_run(self, run_id: int) -> dict[str, Any] | None:
        with self.get_connection() as conn:
            row = conn.execute("SELECT * FROM runs WHERE id = ?", (run_id,)).fetchone()
        return dict(row) if row else None

    def get_rounds(self, run_id: int) -> list[dict[str, Any]]:
        """Round rows of a run, in round order."""
        with self.get_connection() as conn:
            rows = conn.execute(
                "SELECT * FROM rounds WHERE run_id = ? ORDER BY round", (run_id,)
            ).fetchall()
        return [dict(row) for row in rows]

    def get_recent_runs(self, limit: int = 10) -> list[dict[str, Any]]:
        """Most recent runs first."""
        with self.get_connection() as conn:
            rows = conn.execute("SELECT * FROM runs ORDER BY id DESC LIMIT ?", (limit,)).fetchall()
        return [dict(row) for row in rows]

    def export_jsonl(self, output_path: str | Path) -> Path:
        """Write every run, with its rounds embedded, as one JSON object per line."""
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with self.get_connection() as conn:
            runs = [dict(row) for row in conn.execute("SELECT * FROM runs ORDER BY id")]
        with open(output_path, "w", encoding="utf-8") as f:
            for run in runs:
                run["rounds"] = self.get_rounds(run["id"])
                f.write(json.dumps(run, ensure_ascii=False))
                f.write("\n")
        return output_path


_default_history: RunHistory | None = None


def get_run_history(db_path: str | Path | None = None) -> RunHistory:
    """Get or create the default run history.

    Args:
        db_path: Optional path to the database file, used on first call only

    Returns:
        RunHistory instance
    """
    global _default_history
    if _default_history is None:
        _default_history = RunHistory(db_path)
    return _default_history
