import logging
import os
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import torch

from consistency_at.core.types import DatasetSplit, LabeledDataset, RngState
from consistency_at.errors import DatasetMissingError

logger = logging.getLogger(__name__)

DATA_ENV_VAR = 'CONSISTENCY_AT_DATA'

CIFAR_SHAPE = (3, 32, 32)
CIFAR_PIXELS = 3 * 32 * 32

DATASETS: Dict[str, Dict] = {
    'cifar10': {
        'directory': 'cifar-10-batches-bin',
        'train_files': [f'data_batch_{i}.bin' for i in range(1, 6)],
        'test_files': ['test_batch.bin'],
        'label_bytes': 1,
        'num_classes': 10,
        'format': 'CIFAR-10 binary records (1 label byte + 3072 pixel bytes)',
    },
    'cifar100': {
        'directory': 'cifar-100-binary',
        'train_files': ['train.bin'],
        'test_files': ['test.bin'],
        'label_bytes': 2,
        'num_classes': 100,
        'format': 'CIFAR-100 binary records (coarse + fine label bytes + 3072 pixel bytes)',
    },
    'tiny_imagenet': {
        'directory': 'tiny-imagenet-npy',
        'num_classes': 200,
        'format': 'NPY arrays {train,test}_images.npy (uint8 NHWC 64x64x3) and {train,test}_labels.npy',
    },
}


def resolve_data_root(configured_root: Union[str, Path]) -> Path:
    return Path(os.environ.get(DATA_ENV_VAR) or configured_root)


def parse_cifar_records(raw: bytes, label_bytes: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Decode CIFAR binary records: label byte(s) followed by 3072 pixel bytes,
    channel-major R/G/B and row-major within a channel. The last label byte
    is the class (the fine label for CIFAR-100).
    """
    record = label_bytes + CIFAR_PIXELS
    buffer = np.frombuffer(raw, dtype=np.uint8)
    if buffer.size % record != 0:
        raise ValueError(f"byte count {buffer.size} is not a multiple of the record size {record}")
    records = buffer.reshape(-1, record)
    labels = records[:, label_bytes - 1].astype(np.int64)
    pixels = records[:, label_bytes:].reshape(-1, *CIFAR_SHAPE)
    return pixels, labels


def _read_cifar_files(directory: Path, files: List[str], label_bytes: int) -> Tuple[np.ndarray, np.ndarray]:
    pixels, labels = [], []
    for name in files:
        path = directory / name
        with open(path, 'rb') as f:
            p, l = parse_cifar_records(f.read(), label_bytes)
        pixels.append(p)
        labels.append(l)
    return np.concatenate(pixels), np.concatenate(labels)


def _to_dataset(pixels: np.ndarray, labels: np.ndarray, num_classes: int) -> LabeledDataset:
    return LabeledDataset(torch.from_numpy(np.ascontiguousarray(pixels)), torch.from_numpy(labels), num_classes)


def dataset_path(name: str, root: Union[str, Path]) -> Path:
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    return resolve_data_root(root) / DATASETS[name]['directory']


def load_split(name: str, root: Union[str, Path]) -> DatasetSplit:
    info = DATASETS.get(name)
    if info is None:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    directory = dataset_path(name, root)

    if name == 'tiny_imagenet':
        needed = [directory / f'{part}_{kind}.npy' for part in ('train', 'test') for kind in ('images', 'labels')]
        if not all(p.exists() for p in needed):
            raise DatasetMissingError(str(directory), info['format'])
        arrays = {p.stem: np.load(p) for p in needed}
        train = _to_dataset(arrays['train_images'].transpose(0, 3, 1, 2), arrays['train_labels'].astype(np.int64), info['num_classes'])
        test = _to_dataset(arrays['test_images'].transpose(0, 3, 1, 2), arrays['test_labels'].astype(np.int64), info['num_classes'])
    else:
        needed = [directory / f for f in info['train_files'] + info['test_files']]
        if not all(p.exists() for p in needed):
            raise DatasetMissingError(str(directory), info['format'])
        train = _to_dataset(*_read_cifar_files(directory, info['train_files'], info['label_bytes']), info['num_classes'])
        test = _to_dataset(*_read_cifar_files(directory, info['test_files'], info['label_bytes']), info['num_classes'])

    logger.info(f"Loaded {name}: {len(train)} train / {len(test)} test images from {directory}")
    return DatasetSplit(train=train, test=test, num_classes=info['num_classes'], fraction=1.0, name=name)


def stratified_fraction(split: DatasetSplit, fraction: float, rng: RngState) -> DatasetSplit:
    """
    Keep floor(fraction * count) training images of every class, chosen by a
    seeded permutation. The test set is untouched.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return split

    generator = rng.spawn(int(round(fraction * 1_000_000))).numpy()
    labels = split.train.labels.numpy()
    keep = []
    for cls in range(split.num_classes):
        members = np.flatnonzero(labels == cls)
        if members.size == 0:
            continue
        count = int(np.floor(fraction * members.size))
        if count == 0:
            raise ValueError(f"fraction {fraction} leaves class {cls} empty ({members.size} images)")
        keep.append(generator.permutation(members)[:count])
    indices = np.sort(np.concatenate(keep))
    return DatasetSplit(
        train=split.train.subset(indices),
        test=split.test,
        num_classes=split.num_classes,
        fraction=split.fraction * fraction,
        name=split.name,
    )
