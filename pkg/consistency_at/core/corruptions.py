"""CIFAR-10-C ingestion: one NPY array per corruption, severities 1..5 stacked."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch

from consistency_at.core.types import LabeledDataset

logger = logging.getLogger(__name__)

CORRUPTIONS = (
    'gaussian_noise', 'shot_noise', 'impulse_noise', 'speckle_noise',
    'defocus_blur', 'glass_blur', 'motion_blur', 'zoom_blur', 'gaussian_blur',
    'snow', 'frost', 'fog', 'spatter',
    'brightness', 'contrast', 'saturate',
    'elastic_transform', 'pixelate', 'jpeg_compression',
)
SEVERITIES = 5
PER_SEVERITY = 10000


@dataclass
class CorruptionData:
    """
    Corruption name -> one LabeledDataset per severity (index 0 is severity 1).

    `sets` holds corruptions already in memory; `sources` maps names to NPY
    files read only while iterating, one corruption at a time.
    """
    sets: Dict[str, List[LabeledDataset]] = field(default_factory=dict)
    missing: List[str] = field(default_factory=list)
    sources: Dict[str, Path] = field(default_factory=dict)
    labels: Optional[np.ndarray] = None
    num_classes: int = 10

    def names(self) -> List[str]:
        return list(self.sets) + [name for name in self.sources if name not in self.sets]

    def iter_sets(self) -> Iterator[Tuple[str, List[LabeledDataset]]]:
        yield from self.sets.items()
        for name, path in self.sources.items():
            if name in self.sets:
                continue
            logger.debug(f"Reading corruption {name} from {path}")
            yield name, split_severities(np.load(path, mmap_mode='r'), self.labels, self.num_classes)


def split_severities(images: np.ndarray, labels: np.ndarray, num_classes: int = 10) -> List[LabeledDataset]:
    """Cut an HWC uint8 array of 5 stacked severity blocks into datasets."""
    if images.shape[0] % SEVERITIES != 0:
        raise ValueError(f"{images.shape[0]} images cannot be split into {SEVERITIES} severities")
    block = images.shape[0] // SEVERITIES
    if labels.shape[0] == block:
        labels = np.tile(labels, SEVERITIES)
    if labels.shape[0] != images.shape[0]:
        raise ValueError("labels do not match the corruption array")
    pixels = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))
    targets = torch.from_numpy(labels.astype(np.int64))
    return [
        LabeledDataset(pixels[i * block:(i + 1) * block], targets[i * block:(i + 1) * block], num_classes)
        for i in range(SEVERITIES)
    ]


def load_corruptions(root: Union[str, Path], names: Optional[List[str]] = None,
                     num_classes: int = 10) -> CorruptionData:
    root = Path(root)
    labels_path = root / 'labels.npy'
    data = CorruptionData(num_classes=num_classes)
    if not labels_path.exists():
        logger.warning(f"Corruption labels not found at {labels_path}; every corruption skipped")
        data.missing = list(names or CORRUPTIONS)
        return data
    data.labels = np.load(labels_path)

    for name in names or CORRUPTIONS:
        path = root / f'{name}.npy'
        if not path.exists():
            logger.warning(f"Missing corruption file {path}; skipped")
            data.missing.append(name)
            continue
        data.sources[name] = path
    return data
