"""
Shared domain types: images, labelled batches, threat models, dataset splits
and the seeded random-stream plumbing used everywhere else.

Images are float tensors in [0, 1] laid out [N, C, H, W]. Datasets keep the
raw uint8 pixels and convert per batch.
"""
import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterator, NamedTuple, Optional, Tuple, Union

import numpy as np
import torch

from consistency_at.errors import NormNotSupportedError

# ImageBatch: torch.Tensor [N, C, H, W], finite, values in [0, 1].
ImageBatch = torch.Tensor


class Norm(str, Enum):
    LINF = 'linf'
    L2 = 'l2'
    L1 = 'l1'

    @classmethod
    def parse(cls, value: Union['Norm', str, float, int]) -> 'Norm':
        if isinstance(value, Norm):
            return value
        aliases = {
            'linf': cls.LINF, 'inf': cls.LINF, 'l_inf': cls.LINF, math.inf: cls.LINF,
            'l2': cls.L2, '2': cls.L2, 2: cls.L2,
            'l1': cls.L1, '1': cls.L1, 1: cls.L1,
        }
        key = value.lower() if isinstance(value, str) else value
        if key not in aliases:
            raise NormNotSupportedError(f"norm {value!r} is not supported (use linf, l2 or l1)")
        return aliases[key]


@dataclass(frozen=True)
class ThreatModel:
    norm: Norm
    epsilon: float
    steps: int
    step_size: float
    random_start: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'norm', Norm.parse(self.norm))
        # epsilon == 0 is the degenerate ball used for clean-equivalence checks
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.step_size < 0 or (self.step_size == 0 and self.epsilon > 0):
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


class LabeledBatch(NamedTuple):
    images: ImageBatch
    labels: torch.Tensor

    def to(self, device: Union[str, torch.device]) -> 'LabeledBatch':
        return LabeledBatch(self.images.to(device), self.labels.to(device))

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def validate_image_batch(images: torch.Tensor):
    if images.dim() != 4:
        raise ValueError(f"expected a rank-4 [N, C, H, W] batch, got shape {tuple(images.shape)}")
    if images.shape[0] < 1:
        raise ValueError("batch must hold at least one image")
    if not torch.isfinite(images).all():
        raise ValueError("batch contains non-finite values")
    if images.min() < 0 or images.max() > 1:
        raise ValueError("batch values must lie in [0, 1]")


class Stream(IntEnum):
    """Sub-stream keys; each consumer of randomness spawns its own."""
    INIT = 1
    DATA_ORDER = 2
    AUGMENT = 3
    ATTACK = 4
    EVAL = 5
    SUBSAMPLE = 6
    AUGMIX_BASE = 7


@dataclass(frozen=True)
class RngState:
    """
    A (seed, stream) pair. All randomness is derived from it through numpy
    SeedSequence spawn keys, so the same pair always reproduces the same draws
    and no global generator is touched.
    """
    seed: int
    stream: int = 0

    def _sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))

    def spawn(self, *keys: int) -> 'RngState':
        state = self
        for key in keys:
            child = np.random.SeedSequence(entropy=state.seed, spawn_key=(state.stream, int(key)))
            state = RngState(state.seed, int(child.generate_state(1, np.uint64)[0] >> np.uint64(1)))
        return state

    def numpy(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self._sequence()))

    def torch_seed(self) -> int:
        return int(self._sequence().generate_state(1, np.uint64)[0] >> np.uint64(1))

    def torch(self) -> torch.Generator:
        generator = torch.Generator()
        generator.manual_seed(self.torch_seed())
        return generator


class LabeledDataset:
    """
    In-memory labelled image set. Pixels stay uint8 NCHW; batches are
    converted to [0, 1] floats by /255 on the way out.
    """

    def __init__(self, pixels: torch.Tensor, labels: torch.Tensor, num_classes: int):
        if pixels.dim() != 4:
            raise ValueError(f"pixels must be [N, C, H, W], got {tuple(pixels.shape)}")
        if pixels.shape[0] != labels.shape[0]:
            raise ValueError("labels length must equal image count")
        if labels.numel() and int(labels.max()) >= num_classes:
            raise ValueError(f"labels must be < {num_classes}")
        self.pixels = pixels
        self.labels = labels.long()
        self.num_classes = num_classes

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def batch(self, indices: Union[torch.Tensor, np.ndarray, slice]) -> LabeledBatch:
        if isinstance(indices, np.ndarray):
            indices = torch.from_numpy(indices)
        images = self.pixels[indices]
        if images.dtype == torch.uint8:
            images = images.float().div(255.0)
        return LabeledBatch(images, self.labels[indices])

    def subset(self, indices: np.ndarray) -> 'LabeledDataset':
        index = torch.from_numpy(np.asarray(indices, dtype=np.int64))
        return LabeledDataset(self.pixels[index], self.labels[index], self.num_classes)

    def iter_batches(self, batch_size: int, rng: Optional[RngState] = None) -> Iterator[LabeledBatch]:
        """Shuffled when an rng is given, sequential otherwise."""
        order = np.arange(len(self))
        if rng is not None:
            order = rng.numpy().permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self.batch(order[start:start + batch_size])

    def num_batches(self, batch_size: int) -> int:
        return math.ceil(len(self) / batch_size)


@dataclass(frozen=True)
class DatasetSplit:
    train: LabeledDataset
    test: LabeledDataset
    num_classes: int
    fraction: float = 1.0
    name: str = 'cifar10'
