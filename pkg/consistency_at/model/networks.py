"""
Classifiers operating on [0, 1] pixel-space images. Per-channel input
normalization lives inside the model as fixed buffers so attacks never see it.
"""
import contextlib
from typing import Iterator, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from consistency_at.core.types import ImageBatch

ARCHITECTURES = ('preact_resnet18', 'tiny_cnn')

# Per-dataset channel statistics used by the input normalization buffers.
CHANNEL_STATS = {
    'cifar10': ((0.4914, 0.4822, 0.4465), (0.2471, 0.2435, 0.2616)),
    'cifar100': ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    'tiny_imagenet': ((0.4802, 0.4481, 0.3975), (0.2770, 0.2691, 0.2821)),
}


class Normalize(nn.Module):
    def __init__(self, mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        self.register_buffer('mean', torch.tensor(mean).view(1, -1, 1, 1))
        self.register_buffer('std', torch.tensor(std).view(1, -1, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std


class PreActBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, kernel_size=3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, kernel_size=3, stride=1, padding=1, bias=False)
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, kernel_size=1, stride=stride, bias=False)
            )

    def forward(self, x):
        out = F.relu(self.bn1(x))
        shortcut = self.shortcut(out) if hasattr(self, 'shortcut') else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + shortcut


class PreActResNet18(nn.Module):
    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.in_planes = 64
        self.conv1 = nn.Conv2d(3, 64, kernel_size=3, stride=1, padding=1, bias=False)
        self.layer1 = self._make_layer(64, 2, stride=1)
        self.layer2 = self._make_layer(128, 2, stride=2)
        self.layer3 = self._make_layer(256, 2, stride=2)
        self.layer4 = self._make_layer(512, 2, stride=2)
        self.bn = nn.BatchNorm2d(512)
        self.linear = nn.Linear(512, num_classes)

    def _make_layer(self, planes: int, num_blocks: int, stride: int) -> nn.Sequential:
        layers = []
        for s in [stride] + [1] * (num_blocks - 1):
            layers.append(PreActBlock(self.in_planes, planes, s))
            self.in_planes = planes
        return nn.Sequential(*layers)

    def forward(self, x):
        out = self.conv1(x)
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        out = F.relu(self.bn(out))
        # adaptive pooling keeps 64x64 inputs working
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.linear(out)


class TinyCNN(nn.Module):
    """conv3x3(16)-norm-relu twice with stride 2, global average pool, linear.
    GroupNorm keeps every sample independent of the rest of the batch."""

    def __init__(self, num_classes: int = 10, in_channels: int = 3, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, kernel_size=3, stride=2, padding=1),
            nn.GroupNorm(4, width),
            nn.ReLU(),
            nn.Conv2d(width, width, kernel_size=3, stride=2, padding=1),
            nn.GroupNorm(4, width),
            nn.ReLU(),
        )
        self.linear = nn.Linear(width, num_classes)

    def forward(self, x):
        out = self.features(x)
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return self.linear(out)


class Classifier(nn.Module):
    def __init__(self, architecture: str, backbone: nn.Module, num_classes: int,
                 input_shape: Tuple[int, int, int], mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        self.architecture = architecture
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.normalize = Normalize(mean, std)
        self.backbone = backbone

    @property
    def final_linear(self) -> nn.Linear:
        return self.backbone.linear

    def forward(self, x: ImageBatch) -> torch.Tensor:
        return self.backbone(self.normalize(x))


def build_classifier(architecture: str, num_classes: int = 10, input_shape: Tuple[int, int, int] = (3, 32, 32),
                     dataset: str = 'cifar10', seed: Optional[int] = None) -> Classifier:
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}; choose from {list(ARCHITECTURES)}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    mean, std = CHANNEL_STATS.get(dataset, CHANNEL_STATS['cifar10'])
    with torch.random.fork_rng(devices=[], enabled=seed is not None):
        if seed is not None:
            torch.manual_seed(seed)
        if architecture == 'preact_resnet18':
            backbone = PreActResNet18(num_classes)
        else:
            backbone = TinyCNN(num_classes, in_channels=input_shape[0])
    return Classifier(architecture, backbone, num_classes, input_shape, mean[:input_shape[0]], std[:input_shape[0]])


def forward(model: Classifier, batch: ImageBatch, mode: str = 'eval') -> torch.Tensor:
    """Logits [N, K]. The model is left in the requested mode."""
    if mode not in ('train', 'eval'):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if batch.dim() != 4 or tuple(batch.shape[1:]) != model.input_shape:
        raise ValueError(f"expected input [N, {', '.join(map(str, model.input_shape))}], got {tuple(batch.shape)}")
    model.train(mode == 'train')
    return model(batch)


@contextlib.contextmanager
def attack_mode(model: nn.Module) -> Iterator[nn.Module]:
    """Run with running batch statistics (no statistic updates) and restore
    the previous train/eval mode on exit."""
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)


@contextlib.contextmanager
def frozen_batch_stats(model: nn.Module) -> Iterator[nn.Module]:
    """
    Train mode for attacks crafted during training: batch-statistics layers
    normalize with the current batch, but their running buffers are restored
    on exit so only the final training forward pass updates them.
    """
    was_training = model.training
    saved = [
        (module, {name: buffer.clone() for name, buffer in module.named_buffers(recurse=False)})
        for module in model.modules() if isinstance(module, nn.modules.batchnorm._BatchNorm)
    ]
    model.train()
    try:
        yield model
    finally:
        with torch.no_grad():
            for module, buffers in saved:
                for name, value in buffers.items():
                    getattr(module, name).copy_(value)
        model.train(was_training)


def statistics_context(model: nn.Module, batch_stats: bool = False):
    """frozen_batch_stats during training-time attacks, attack_mode otherwise."""
    return frozen_batch_stats(model) if batch_stats else attack_mode(model)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
