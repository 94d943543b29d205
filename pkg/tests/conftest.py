import os
import tempfile

import pytest
import torch

from consistency_at.config import RunConfig
from consistency_at.core.types import DatasetSplit, LabeledDataset
from consistency_at.model.networks import build_classifier
from consistency_at.storage.sqlite_store import RunStore


def make_dataset(n, num_classes=10, seed=0, shape=(3, 32, 32)):
    generator = torch.Generator().manual_seed(seed)
    pixels = torch.randint(0, 256, (n, *shape), generator=generator, dtype=torch.uint8)
    labels = torch.arange(n) % num_classes
    return LabeledDataset(pixels, labels, num_classes)


@pytest.fixture
def temp_db_path():
    fd, path = tempfile.mkstemp(suffix='.sqlite')
    os.close(fd)
    yield path
    os.remove(path)


@pytest.fixture
def store(temp_db_path):
    s = RunStore(temp_db_path)
    yield s
    s.close()


@pytest.fixture
def dataset_factory():
    return make_dataset


@pytest.fixture
def synthetic_split():
    return DatasetSplit(train=make_dataset(40, seed=1), test=make_dataset(20, seed=2), num_classes=10)


@pytest.fixture
def tiny_model():
    model = build_classifier('tiny_cnn', num_classes=10, seed=0)
    model.eval()
    return model


@pytest.fixture
def batch():
    dataset = make_dataset(8, seed=3)
    return dataset.batch(slice(0, 8))


@pytest.fixture
def tiny_config(tmp_path):
    return RunConfig.from_flat({
        'run.seed': 0,
        'run.output_dir': str(tmp_path / 'run'),
        'run.progress': False,
        'model.architecture': 'tiny_cnn',
        'train.epochs': 2,
        'train.batch_size': 16,
        'train.eval_batch_size': 16,
        'augment.policy': 'base',
        'loss.method': 'AT',
        'loss.regularizer': 'js_consistency',
        'attack.pgd10_train.steps': 2,
        'attack.pgd10_train.step_size': '4/255',
        'eval.batch_size': 16,
    })
