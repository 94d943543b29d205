import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Union

import pandas as pd

from consistency_at.storage.sqlite_store import METRIC_COLUMNS, RunStore
from consistency_at.utils import atomic_write_text, ensure_directory

logger = logging.getLogger(__name__)

HASH_PREFIX = '# config_hash='


def _with_hash_line(config_hash: str, csv_text: str) -> str:
    return f"{HASH_PREFIX}{config_hash}\n{csv_text}"


class CsvExporter:
    """Writes the run's tables to CSV/JSON files; every file carries the config hash."""

    def __init__(self, store: RunStore, output_dir: Union[str, Path], config_hash: str):
        self.store = store
        self.output_dir = Path(output_dir)
        self.config_hash = config_hash
        ensure_directory(self.output_dir)

    @property
    def metrics_path(self) -> Path:
        return self.output_dir / 'metrics.csv'

    def export_metrics(self) -> Path:
        """Rewrite metrics.csv from the registry (temp file + rename)."""
        frame = self.store.metrics_frame()
        frame['epoch'] = frame['epoch'].astype(int)
        atomic_write_text(self.metrics_path, _with_hash_line(self.config_hash, frame.to_csv(index=False, columns=list(METRIC_COLUMNS))))
        return self.metrics_path

    def export_report(self, report, suite: str) -> Dict[str, Path]:
        eval_dir = self.output_dir / 'eval'
        ensure_directory(eval_dir)
        rows = report.rows()
        paths = {'csv': eval_dir / f'{suite}.csv', 'json': eval_dir / f'{suite}.json'}

        table = pd.DataFrame(rows, columns=['metric', 'value'])
        atomic_write_text(paths['csv'], _with_hash_line(self.config_hash, table.to_csv(index=False)))

        document: Dict[str, Any] = dict(report.to_dict(), suite=suite, config_hash=self.config_hash)
        atomic_write_text(paths['json'], json.dumps(document, indent=2, sort_keys=True))

        if report.corruption_errors:
            paths['corruption'] = eval_dir / 'corruption_errors.csv'
            errors = pd.DataFrame(sorted(report.corruption_errors.items()), columns=['corruption', 'error'])
            atomic_write_text(paths['corruption'], _with_hash_line(self.config_hash, errors.to_csv(index=False)))

        logger.info(f"Wrote {suite} report to {paths['csv']}")
        return paths


def read_hash(path: Union[str, Path]) -> str:
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline().strip()
    return first[len(HASH_PREFIX):] if first.startswith(HASH_PREFIX) else ''


def read_table(path: Union[str, Path], expected: Iterable[str]) -> pd.DataFrame:
    """Read a CSV written by CsvExporter, checking its columns."""
    expected = list(expected)
    try:
        frame = pd.read_csv(path, comment='#')
    except pd.errors.EmptyDataError:
        raise ValueError(f"{path} is empty; expected columns {','.join(expected)}")
    missing = [c for c in expected if c not in frame.columns]
    if missing:
        raise ValueError(f"{path} lacks columns {missing}; expected columns {','.join(expected)}")
    if frame.empty:
        raise ValueError(f"{path} has no rows; expected columns {','.join(expected)}")
    return frame
