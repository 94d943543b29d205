"""Robust-overfitting curves and dataset-fraction bars from run artifacts."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import yaml  # noqa: E402

from consistency_at.export.csv_exporter import read_hash, read_table  # noqa: E402
from consistency_at.storage.sqlite_store import METRIC_COLUMNS  # noqa: E402
from consistency_at.utils import ensure_directory  # noqa: E402

logger = logging.getLogger(__name__)


@dataclass
class CurvePlot:
    path: Path
    labels: List[str] = field(default_factory=list)
    lr_drops: Dict[str, List[int]] = field(default_factory=dict)


def lr_drop_epochs(frame: pd.DataFrame) -> List[int]:
    """Epochs whose learning rate is below the previous row's."""
    lrs = frame['lr'].tolist()
    epochs = frame['epoch'].tolist()
    return [int(epochs[i]) for i in range(1, len(lrs)) if lrs[i] < lrs[i - 1]]


def plot_robust_curves(csv_paths: Sequence[Union[str, Path]], out_path: Union[str, Path],
                       labels: Optional[Sequence[str]] = None) -> CurvePlot:
    if not csv_paths:
        raise ValueError("no metrics files given")
    # read everything first so a bad input writes nothing
    frames = [read_table(p, METRIC_COLUMNS) for p in csv_paths]
    labels = list(labels) if labels else [Path(p).parent.name or Path(p).stem for p in csv_paths]
    if len(labels) != len(frames):
        raise ValueError("one label per metrics file is required")

    result = CurvePlot(path=Path(out_path))
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, frame in zip(labels, frames):
        line, = ax.plot(frame['epoch'], frame['pgd10_acc'], label=label)
        drops = lr_drop_epochs(frame)
        for epoch in drops:
            ax.axvline(epoch, color=line.get_color(), linestyle=':', linewidth=1)
        result.labels.append(label)
        result.lr_drops[label] = drops
    ax.set_xlabel('epoch')
    ax.set_ylabel('PGD-10 robust accuracy (%)')
    ax.legend()
    fig.tight_layout()

    hashes = ','.join(read_hash(p) for p in csv_paths)
    ensure_directory(Path(out_path).parent)
    fig.savefig(out_path, metadata={'Description': f'config_hash={hashes}'})
    plt.close(fig)
    logger.info(f"Wrote {len(frames)} curve(s) to {out_path}")
    return result


def fraction_summary(run_dirs: Sequence[Union[str, Path]]) -> pd.DataFrame:
    """fraction, best and last PGD-10 accuracy per run directory."""
    rows = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        with open(run_dir / 'config.resolved.yaml', 'r') as f:
            resolved = yaml.safe_load(f)
        frame = read_table(run_dir / 'metrics.csv', METRIC_COLUMNS)
        rows.append({
            'run': run_dir.name,
            'fraction': float(resolved['data.fraction']),
            'best': float(frame['pgd10_acc'].max()),
            'last': float(frame['pgd10_acc'].iloc[-1]),
            'config_hash': resolved.get('config_hash', ''),
        })
    return pd.DataFrame(rows).sort_values('fraction', kind='stable').reset_index(drop=True)


def plot_fraction_sweep(run_dirs: Sequence[Union[str, Path]], out_path: Union[str, Path]) -> pd.DataFrame:
    if not run_dirs:
        raise ValueError("no run directories given")
    summary = fraction_summary(run_dirs)
    fig, ax = plt.subplots(figsize=(6, 4))
    positions = range(len(summary))
    width = 0.38
    ax.bar([p - width / 2 for p in positions], summary['best'], width, label='best')
    ax.bar([p + width / 2 for p in positions], summary['last'], width, label='last')
    ax.set_xticks(list(positions))
    ax.set_xticklabels([f"{100 * f:g}%" for f in summary['fraction']])
    ax.set_xlabel('training data fraction')
    ax.set_ylabel('PGD-10 robust accuracy (%)')
    ax.legend()
    fig.tight_layout()
    ensure_directory(Path(out_path).parent)
    fig.savefig(out_path, metadata={'Description': f"config_hash={','.join(summary['config_hash'])}"})
    plt.close(fig)
    return summary
