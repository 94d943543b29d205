"""
Robustness measurements. Every accuracy is a percentage over the whole
dataset, computed batch by batch in eval mode. Attack randomness for batch i
comes from rng.spawn(i), so results are reproducible for a fixed seed.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from consistency_at.attack.objectives import LossKind
from consistency_at.attack.pgd import AttackSpec, clean_reference, pgd
from consistency_at.attack.presets import UNSEEN_GRID, unseen_specs
from consistency_at.core.corruptions import CorruptionData
from consistency_at.core.types import LabeledBatch, LabeledDataset, RngState
from consistency_at.model.networks import attack_mode

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    clean_acc: Optional[float] = None
    robust_acc: Dict[str, float] = field(default_factory=dict)
    sweep: Dict[str, float] = field(default_factory=dict)
    mce: Optional[float] = None
    corruption_errors: Dict[str, float] = field(default_factory=dict)
    corruption_missing: List[str] = field(default_factory=list)
    transfer_acc: Dict[str, float] = field(default_factory=dict)
    confusing_class_rate: Optional[float] = None
    checkpoint: str = ''

    def rows(self) -> List[Tuple[str, float]]:
        """Flat (metric, value) rows; absent quantities are left out."""
        rows: List[Tuple[str, float]] = []
        if self.clean_acc is not None:
            rows.append(('clean_acc', self.clean_acc))
        rows += [(f'robust_acc/{k}', v) for k, v in self.robust_acc.items()]
        rows += [(f'unseen/{k}', v) for k, v in self.sweep.items()]
        if self.mce is not None:
            rows.append(('mce', self.mce))
        rows += [(f'corruption_error/{k}', v) for k, v in self.corruption_errors.items()]
        rows += [(f'transfer_acc/{k}', v) for k, v in self.transfer_acc.items()]
        if self.confusing_class_rate is not None:
            rows.append(('confusing_class_rate', self.confusing_class_rate))
        return rows

    def to_dict(self) -> Dict:
        return asdict(self)


def _percent(correct: int, total: int) -> float:
    return 100.0 * correct / total


def _attack(model: nn.Module, batch: LabeledBatch, spec: AttackSpec, rng: RngState):
    reference = clean_reference(model, batch.images) if spec.loss_kind is LossKind.KL_TO_REFERENCE else None
    return pgd(model, batch, spec, reference, rng)


def predict(model: nn.Module, images: torch.Tensor) -> torch.Tensor:
    with attack_mode(model), torch.no_grad():
        return model(images).argmax(dim=1)


def clean_accuracy(model: nn.Module, dataset: LabeledDataset, batch_size: int = 256, device='cpu') -> float:
    correct = 0
    for batch in dataset.iter_batches(batch_size):
        batch = batch.to(device)
        correct += int((predict(model, batch.images) == batch.labels).sum())
    return _percent(correct, len(dataset))


def robust_accuracy(model: nn.Module, dataset: LabeledDataset, spec: AttackSpec, rng: Optional[RngState] = None,
                    batch_size: int = 256, device='cpu') -> float:
    rng = rng or RngState(0)
    correct = 0
    for i, batch in enumerate(dataset.iter_batches(batch_size)):
        result = _attack(model, batch.to(device), spec, rng.spawn(i))
        correct += int((~result.success).sum())
    return _percent(correct, len(dataset))


def evaluate_whitebox(model: nn.Module, dataset: LabeledDataset, specs: Mapping[str, AttackSpec],
                      rng: Optional[RngState] = None, batch_size: int = 256, device='cpu') -> EvalReport:
    rng = rng or RngState(0)
    report = EvalReport(clean_acc=clean_accuracy(model, dataset, batch_size, device))
    for index, (name, spec) in enumerate(specs.items()):
        report.robust_acc[name] = robust_accuracy(model, dataset, spec, rng.spawn(index), batch_size, device)
        logger.info(f"{name}: {report.robust_acc[name]:.2f}% (clean {report.clean_acc:.2f}%)")
    return report


def unseen_sweep(model: nn.Module, dataset: LabeledDataset, rng: Optional[RngState] = None, batch_size: int = 256,
                 device='cpu', restarts: int = 1, grid=UNSEEN_GRID) -> Dict[str, float]:
    """Robust accuracy per (norm, epsilon) cell under PGD-100."""
    rng = rng or RngState(0)
    table = {}
    for index, (label, spec) in enumerate(unseen_specs(restarts, grid).items()):
        table[label] = robust_accuracy(model, dataset, spec, rng.spawn(index), batch_size, device)
        logger.info(f"unseen {label}: {table[label]:.2f}%")
    return table


def summarize_corruption_errors(severity_errors: Mapping[str, Sequence[float]]) -> Tuple[float, Dict[str, float]]:
    """Per-corruption error is the mean over its severities; mCE the plain mean over corruptions."""
    if not severity_errors:
        raise ValueError("no corruption errors to summarize")
    per_corruption = {name: sum(errors) / len(errors) for name, errors in severity_errors.items()}
    return sum(per_corruption.values()) / len(per_corruption), per_corruption


def mce(model: nn.Module, corruption_data: CorruptionData, batch_size: int = 256,
        device='cpu') -> Tuple[float, Dict[str, float]]:
    for name in corruption_data.missing:
        logger.warning(f"Corruption {name} unavailable; left out of the mCE")
    severity_errors = {
        name: [100.0 - clean_accuracy(model, severity, batch_size, device) for severity in severities]
        for name, severities in corruption_data.iter_sets()
    }
    return summarize_corruption_errors(severity_errors)


def black_box_transfer(source_model: nn.Module, target_model: nn.Module, dataset: LabeledDataset, spec: AttackSpec,
                       rng: Optional[RngState] = None, batch_size: int = 256, device='cpu') -> float:
    """Adversarial examples crafted on the source, scored on the target."""
    rng = rng or RngState(0)
    correct = 0
    for i, batch in enumerate(dataset.iter_batches(batch_size)):
        batch = batch.to(device)
        result = _attack(source_model, batch, spec, rng.spawn(i))
        correct += int((predict(target_model, result.adversarial) == batch.labels).sum())
    return _percent(correct, len(dataset))


def confusing_class_rate(model: nn.Module, dataset: LabeledDataset, spec: AttackSpec, rng: Optional[RngState] = None,
                         batch_size: int = 256, device='cpu') -> Optional[float]:
    """
    Among samples misclassified after the attack, the share predicted as the
    clean input's most probable wrong class. None when nothing is misclassified.
    """
    rng = rng or RngState(0)
    hits, misclassified = 0, 0
    for i, batch in enumerate(dataset.iter_batches(batch_size)):
        batch = batch.to(device)
        with attack_mode(model), torch.no_grad():
            clean_logits = model(batch.images)
        mask = torch.nn.functional.one_hot(batch.labels, clean_logits.shape[1]).bool()
        runner_up = clean_logits.masked_fill(mask, float('-inf')).argmax(dim=1)
        result = _attack(model, batch, spec, rng.spawn(i))
        adv_pred = predict(model, result.adversarial)
        wrong = adv_pred != batch.labels
        misclassified += int(wrong.sum())
        hits += int((adv_pred[wrong] == runner_up[wrong]).sum())
    if misclassified == 0:
        return None
    return _percent(hits, misclassified)
