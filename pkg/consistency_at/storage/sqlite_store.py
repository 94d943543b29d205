import json
import logging
import sqlite3
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import pandas as pd

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ('epoch', 'lr', 'train_adv_loss', 'train_cons_loss', 'clean_acc', 'pgd10_acc')
CHECKPOINT_KINDS = ('last', 'best')


class RunStore:
    """SQLite registry of one run: per-epoch metrics, checkpoints, evaluations."""

    def __init__(self, db_path: str):
        self.db_path = str(db_path)
        self.conn = None
        self.cursor = None
        self._init_db()

    def _init_db(self):
        """Initialize the database connection and schema."""
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)

        self.conn = sqlite3.connect(self.db_path)
        self.conn.row_factory = sqlite3.Row
        self.cursor = self.conn.cursor()
        self._create_tables()

    def _create_tables(self):
        """Create necessary tables if they don't exist."""

        # One row per completed epoch
        self.cursor.execute("""
            CREATE TABLE IF NOT EXISTS epochs (
                epoch INTEGER PRIMARY KEY,
                lr REAL,
                train_adv_loss REAL,
                train_cons_loss REAL,
                clean_acc REAL,
                pgd10_acc REAL,
                recorded_at TIMESTAMP
            )
        """)

        self.cursor.execute("""
            CREATE TABLE IF NOT EXISTS checkpoints (
                kind TEXT PRIMARY KEY, -- last, best
                epoch INTEGER,
                path TEXT,
                pgd10_acc REAL,
                config_hash TEXT,
                saved_at TIMESTAMP
            )
        """)

        self.cursor.execute("""
            CREATE TABLE IF NOT EXISTS evaluations (
                checkpoint TEXT,
                suite TEXT,
                metric TEXT,
                value REAL,
                evaluated_at TIMESTAMP,
                PRIMARY KEY (checkpoint, suite, metric)
            )
        """)

        # Key-value store for run metadata
        self.cursor.execute("""
            CREATE TABLE IF NOT EXISTS run_state (
                key TEXT PRIMARY KEY,
                value TEXT
            )
        """)

        self.conn.commit()

    def close(self):
        if self.conn:
            self.conn.close()

    # --- Epochs ---
    def record_epoch(self, row: Dict[str, Any]):
        """Insert or replace the metrics of one epoch."""
        query = """
            INSERT INTO epochs (epoch, lr, train_adv_loss, train_cons_loss, clean_acc, pgd10_acc, recorded_at)
            VALUES (?, ?, ?, ?, ?, ?, ?)
            ON CONFLICT(epoch) DO UPDATE SET
                lr=excluded.lr,
                train_adv_loss=excluded.train_adv_loss,
                train_cons_loss=excluded.train_cons_loss,
                clean_acc=excluded.clean_acc,
                pgd10_acc=excluded.pgd10_acc,
                recorded_at=excluded.recorded_at
        """
        self.cursor.execute(query, tuple(row[c] for c in METRIC_COLUMNS) + (datetime.now().isoformat(),))
        self.conn.commit()

    def get_epochs(self) -> List[Dict[str, Any]]:
        self.cursor.execute(f"SELECT {', '.join(METRIC_COLUMNS)} FROM epochs ORDER BY epoch ASC")
        return [dict(row) for row in self.cursor.fetchall()]

    def truncate_epochs(self, after_epoch: int):
        """Drop rows past a checkpointed epoch (left behind by an interrupted run)."""
        self.cursor.execute("DELETE FROM epochs WHERE epoch > ?", (after_epoch,))
        self.conn.commit()

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.get_epochs(), columns=list(METRIC_COLUMNS))

    # --- Checkpoints ---
    def register_checkpoint(self, kind: str, epoch: int, path: str, pgd10_acc: Optional[float], config_hash: str):
        if kind not in CHECKPOINT_KINDS:
            raise ValueError(f"checkpoint kind must be one of {CHECKPOINT_KINDS}, got {kind!r}")
        self.cursor.execute("""
            INSERT INTO checkpoints (kind, epoch, path, pgd10_acc, config_hash, saved_at)
            VALUES (?, ?, ?, ?, ?, ?)
            ON CONFLICT(kind) DO UPDATE SET
                epoch=excluded.epoch,
                path=excluded.path,
                pgd10_acc=excluded.pgd10_acc,
                config_hash=excluded.config_hash,
                saved_at=excluded.saved_at
        """, (kind, epoch, str(path), pgd10_acc, config_hash, datetime.now().isoformat()))
        self.conn.commit()

    def get_checkpoint(self, kind: str) -> Optional[Dict[str, Any]]:
        self.cursor.execute("SELECT * FROM checkpoints WHERE kind = ?", (kind,))
        row = self.cursor.fetchone()
        if row:
            return dict(row)
        return None

    # --- Evaluations ---
    def record_evaluation(self, checkpoint: str, suite: str, rows: Iterable[Tuple[str, float]]):
        now = datetime.now().isoformat()
        data = [(checkpoint, suite, metric, value, now) for metric, value in rows]
        if not data:
            return
        self.cursor.executemany("""
            INSERT INTO evaluations (checkpoint, suite, metric, value, evaluated_at)
            VALUES (?, ?, ?, ?, ?)
            ON CONFLICT(checkpoint, suite, metric) DO UPDATE SET
                value=excluded.value,
                evaluated_at=excluded.evaluated_at
        """, data)
        self.conn.commit()

    def get_evaluation(self, checkpoint: str, suite: str) -> Dict[str, float]:
        self.cursor.execute("""
            SELECT metric, value FROM evaluations WHERE checkpoint = ? AND suite = ?
        """, (checkpoint, suite))
        return {row['metric']: row['value'] for row in self.cursor.fetchall()}

    # --- Run State ---
    def set_state(self, key: str, value: Any):
        self.cursor.execute("""
            INSERT INTO run_state (key, value) VALUES (?, ?)
            ON CONFLICT(key) DO UPDATE SET value=excluded.value
        """, (key, json.dumps(value)))
        self.conn.commit()

    def get_state(self, key: str, default: Any = None) -> Any:
        self.cursor.execute("SELECT value FROM run_state WHERE key = ?", (key,))
        row = self.cursor.fetchone()
        if row:
            return json.loads(row['value'])
        return default
