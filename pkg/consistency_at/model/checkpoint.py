"""
Checkpoint archive: a single torch.save file holding

    {"format": "consistency_at.checkpoint/1",
     "parameters": <state_dict keyed by layer path>,
     "metadata": {epoch, config_hash, architecture, num_classes, input_shape,
                  dataset, metrics, rng, optimizer, scheduler}}
"""
import copy
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch

from consistency_at.errors import CheckpointMismatchError
from consistency_at.model.networks import Classifier, build_classifier
from consistency_at.utils import ensure_directory

logger = logging.getLogger(__name__)

FORMAT = 'consistency_at.checkpoint/1'


@dataclass
class Checkpoint:
    parameters: Dict[str, torch.Tensor]
    epoch: int
    architecture: str
    num_classes: int
    input_shape: Tuple[int, int, int]
    dataset: str = 'cifar10'
    config_hash: str = ''
    metrics: Dict[str, Any] = field(default_factory=dict)
    rng: Dict[str, int] = field(default_factory=dict)
    optimizer_state: Optional[Dict[str, Any]] = None
    scheduler_state: Optional[Dict[str, Any]] = None

    def metadata(self) -> Dict[str, Any]:
        return {
            'epoch': self.epoch,
            'architecture': self.architecture,
            'num_classes': self.num_classes,
            'input_shape': list(self.input_shape),
            'dataset': self.dataset,
            'config_hash': self.config_hash,
            'metrics': dict(self.metrics),
            'rng': dict(self.rng),
            'optimizer': self.optimizer_state,
            'scheduler': self.scheduler_state,
        }


def capture(model: Classifier, epoch: int, dataset: str = 'cifar10', config_hash: str = '',
            metrics: Optional[Dict[str, Any]] = None, rng: Optional[Dict[str, int]] = None,
            optimizer=None, scheduler=None) -> Checkpoint:
    """Snapshot a model (and optionally its optimizer/scheduler) as CPU copies."""
    parameters = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    return Checkpoint(
        parameters=parameters,
        epoch=epoch,
        architecture=model.architecture,
        num_classes=model.num_classes,
        input_shape=tuple(model.input_shape),
        dataset=dataset,
        config_hash=config_hash,
        metrics=dict(metrics or {}),
        rng=dict(rng or {}),
        optimizer_state=copy.deepcopy(optimizer.state_dict()) if optimizer is not None else None,
        scheduler_state=copy.deepcopy(scheduler.state_dict()) if scheduler is not None else None,
    )


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    ensure_directory(path.parent)
    fd, tmp_path = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp')
    os.close(fd)
    try:
        torch.save({'format': FORMAT, 'parameters': checkpoint.parameters, 'metadata': checkpoint.metadata()}, tmp_path)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        archive = torch.load(path, map_location='cpu')
    except (OSError, RuntimeError, EOFError) as e:
        raise CheckpointMismatchError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(archive, dict) or archive.get('format') != FORMAT:
        raise CheckpointMismatchError(f"{path} is not a {FORMAT} archive")
    meta = archive['metadata']
    return Checkpoint(
        parameters=archive['parameters'],
        epoch=meta['epoch'],
        architecture=meta['architecture'],
        num_classes=meta['num_classes'],
        input_shape=tuple(meta['input_shape']),
        dataset=meta.get('dataset', 'cifar10'),
        config_hash=meta.get('config_hash', ''),
        metrics=meta.get('metrics') or {},
        rng=meta.get('rng') or {},
        optimizer_state=meta.get('optimizer'),
        scheduler_state=meta.get('scheduler'),
    )


def load_into(model: Classifier, checkpoint: Checkpoint):
    if model.architecture != checkpoint.architecture:
        raise CheckpointMismatchError(
            f"checkpoint holds a {checkpoint.architecture} but the model is a {model.architecture}")
    try:
        model.load_state_dict(checkpoint.parameters, strict=True)
    except RuntimeError as e:
        raise CheckpointMismatchError(f"checkpoint does not fit the {model.architecture} model: {e}") from e


def restore_classifier(checkpoint: Checkpoint, device: Union[str, torch.device] = 'cpu',
                       architecture: Optional[str] = None) -> Classifier:
    """Rebuild the classifier a checkpoint describes; architecture pins the expected one."""
    if architecture is not None and architecture != checkpoint.architecture:
        raise CheckpointMismatchError(
            f"expected a {architecture} checkpoint, found {checkpoint.architecture}")
    model = build_classifier(checkpoint.architecture, checkpoint.num_classes, checkpoint.input_shape, checkpoint.dataset)
    load_into(model, checkpoint)
    model.eval()
    return model.to(device)
