import dataclasses
import math
from dataclasses import dataclass
from typing import List, Tuple, TypeVar

T = TypeVar('T')


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # fractions of the epoch budget at which the learning rate decays
    milestones: Tuple[float, ...] = (0.5, 0.75)
    lr_decay: float = 0.1
    attack: str = 'pgd10_train'
    eval_subset: int = 0
    eval_batch_size: int = 256

    def __post_init__(self):
        object.__setattr__(self, 'milestones', tuple(float(m) for m in self.milestones))
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        for name in ('batch_size', 'eval_batch_size'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ('lr', 'lr_decay'):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.momentum < 0 or self.weight_decay < 0 or self.eval_subset < 0:
            raise ValueError("momentum, weight_decay and eval_subset must be >= 0")
        if any(not 0 < m < 1 for m in self.milestones):
            raise ValueError(f"milestones must lie in (0, 1), got {list(self.milestones)}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {list(self.milestones)}")


def milestone_epochs(config: TrainConfig) -> List[int]:
    """Epoch indices (0-based) from which each decay is in effect."""
    return [math.ceil(m * config.epochs) for m in config.milestones]


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate used during the 0-based epoch, matching a per-epoch MultiStepLR."""
    decays = sum(1 for m in milestone_epochs(config) if epoch >= m)
    return config.lr * config.lr_decay ** decays


def halve_epoch_budget(config: T) -> T:
    """
    Half the epochs; milestones are fractions of the budget so they scale
    with it. Accepts a TrainConfig or anything holding one as `.train`.
    """
    if isinstance(config, TrainConfig):
        return dataclasses.replace(config, epochs=config.epochs // 2)
    return dataclasses.replace(config, train=halve_epoch_budget(config.train))
