"""
Individual augmentation operations. Sampling resolves every random choice
into a ConcreteStep (per-sample parameters); applying a step is then
deterministic and uses no random generator at all.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from consistency_at.augment import autoaugment
from consistency_at.core.types import ImageBatch, RngState


class OpKind(str, Enum):
    CROP_PAD = 'crop_pad'
    HFLIP = 'hflip'
    CUTOUT = 'cutout'
    COLOR_JITTER = 'color_jitter'
    GRAYSCALE = 'grayscale'
    ROTATE90 = 'rotate90'
    GAUSSIAN_BLUR = 'gaussian_blur'
    IDENTITY = 'identity'
    AUTOAUG_SUBOP = 'autoaug_subop'


# kind -> (min magnitude, max magnitude, default magnitude, default probability)
# crop_pad: pad in pixels; cutout: square side as a fraction of the width;
# color_jitter: brightness/contrast/saturation strength. The rest ignore magnitude.
OP_TABLE: Dict[OpKind, Tuple[float, float, float, float]] = {
    OpKind.CROP_PAD: (0, 16, 4, 1.0),
    OpKind.HFLIP: (0, 0, 0, 0.5),
    OpKind.CUTOUT: (0.0625, 1.0, 0.5, 1.0),
    OpKind.COLOR_JITTER: (0.0, 1.0, 0.4, 0.8),
    OpKind.GRAYSCALE: (0, 0, 0, 0.2),
    OpKind.ROTATE90: (0, 0, 0, 0.5),
    OpKind.GAUSSIAN_BLUR: (0, 0, 0, 0.5),
    OpKind.IDENTITY: (0, 0, 0, 1.0),
    OpKind.AUTOAUG_SUBOP: (0, 0, 0, 1.0),
}

BLUR_SIGMA_RANGE = (0.1, 2.0)
BLUR_KERNEL = 3


@dataclass(frozen=True)
class AugmentOp:
    kind: OpKind
    probability: Optional[float] = None
    magnitude: Optional[float] = None

    def __post_init__(self):
        kind = OpKind(self.kind)
        low, high, default_magnitude, default_probability = OP_TABLE[kind]
        probability = default_probability if self.probability is None else float(self.probability)
        magnitude = default_magnitude if self.magnitude is None else float(self.magnitude)
        if not 0.0 <= probability <= 1.0:
            raise ValueError(f"{kind.value}: probability {probability} outside [0, 1]")
        if not low <= magnitude <= high:
            raise ValueError(f"{kind.value}: magnitude {magnitude} outside [{low}, {high}]")
        if kind is OpKind.CROP_PAD and magnitude != int(magnitude):
            raise ValueError(f"crop_pad: padding must be a whole number of pixels, got {magnitude}")
        object.__setattr__(self, 'kind', kind)
        object.__setattr__(self, 'probability', probability)
        object.__setattr__(self, 'magnitude', magnitude)

    @classmethod
    def from_dict(cls, entry: Dict[str, Any]) -> 'AugmentOp':
        unknown = set(entry) - {'kind', 'probability', 'magnitude'}
        if unknown:
            raise ValueError(f"unknown augmentation fields {sorted(unknown)}")
        return cls(kind=entry['kind'], probability=entry.get('probability'), magnitude=entry.get('magnitude'))


@dataclass(frozen=True)
class ConcreteStep:
    """
    One op with all randomness resolved. params holds one entry per sample,
    None where the op is skipped for that sample.
    """
    kind: OpKind
    magnitude: float
    params: Tuple[Any, ...]

    def __call__(self, images: ImageBatch) -> ImageBatch:
        if self.kind is OpKind.IDENTITY:
            return images
        if len(self.params) != images.shape[0]:
            raise ValueError(f"step sampled for {len(self.params)} images applied to {images.shape[0]}")
        if self.kind is OpKind.CROP_PAD:
            return _crop_pad(images, int(self.magnitude), self.params)
        outputs = [
            img if param is None else _APPLY[self.kind](img, param, self.magnitude)
            for img, param in zip(images, self.params)
        ]
        return torch.stack(outputs)


def _crop_pad(images: ImageBatch, pad: int, offsets: Sequence[Optional[Tuple[int, int]]]) -> ImageBatch:
    height, width = images.shape[-2:]
    padded = F.pad(images, (pad, pad, pad, pad), mode='constant', value=0.0)
    outputs = []
    for i, offset in enumerate(offsets):
        if offset is None:
            outputs.append(images[i])
            continue
        dy, dx = offset
        outputs.append(padded[i, :, dy:dy + height, dx:dx + width])
    return torch.stack(outputs)


def _cutout(img: torch.Tensor, center: Tuple[float, float], magnitude: float) -> torch.Tensor:
    _, height, width = img.shape
    side = int(round(magnitude * width))
    cy, cx = int(center[0] * height), int(center[1] * width)
    y1, y2 = np.clip(cy - side // 2, 0, height), np.clip(cy + side - side // 2, 0, height)
    x1, x2 = np.clip(cx - side // 2, 0, width), np.clip(cx + side - side // 2, 0, width)
    out = img.clone()
    out[:, y1:y2, x1:x2] = 0.0
    return out


def _color_jitter(img: torch.Tensor, factors: Tuple[float, float, float], magnitude: float) -> torch.Tensor:
    brightness, contrast, saturation = factors
    out = TF.adjust_brightness(img, brightness)
    out = TF.adjust_contrast(out, contrast)
    out = TF.adjust_saturation(out, saturation)
    return out.clamp(0.0, 1.0)


def _grayscale(img: torch.Tensor, _: Any, magnitude: float) -> torch.Tensor:
    return TF.rgb_to_grayscale(img, num_output_channels=img.shape[0])


def _rotate90(img: torch.Tensor, quarter_turns: int, magnitude: float) -> torch.Tensor:
    if img.shape[-1] != img.shape[-2]:
        raise ValueError("rotate90 needs square images to preserve the shape")
    return torch.rot90(img, quarter_turns, dims=(1, 2))


def _gaussian_blur(img: torch.Tensor, sigma: float, magnitude: float) -> torch.Tensor:
    return TF.gaussian_blur(img, [BLUR_KERNEL, BLUR_KERNEL], [sigma, sigma]).clamp(0.0, 1.0)


def _autoaug(img: torch.Tensor, param: Tuple, magnitude: float) -> torch.Tensor:
    for entry in param:
        if entry is not None:
            name, value = entry
            img = autoaugment.apply_subop(img, name, value)
    return img


_APPLY = {
    OpKind.HFLIP: lambda img, _, m: img.flip(-1),
    OpKind.CUTOUT: _cutout,
    OpKind.COLOR_JITTER: _color_jitter,
    OpKind.GRAYSCALE: _grayscale,
    OpKind.ROTATE90: _rotate90,
    OpKind.GAUSSIAN_BLUR: _gaussian_blur,
    OpKind.AUTOAUG_SUBOP: _autoaug,
}


def sample_step(op: AugmentOp, num_samples: int, rng: RngState,
                sub_policies: Optional[Sequence[autoaugment.SubPolicy]] = None) -> ConcreteStep:
    """Draw per-sample parameters for op. Every draw is made regardless of the
    apply mask so the amount of randomness consumed never depends on outcomes."""
    gen = rng.numpy()
    n = num_samples
    applied = gen.random(n) < op.probability
    kind = op.kind

    if kind is OpKind.IDENTITY:
        params: Tuple[Any, ...] = (None,) * n
    elif kind is OpKind.CROP_PAD:
        offsets = gen.integers(0, 2 * int(op.magnitude) + 1, size=(n, 2))
        params = tuple((int(o[0]), int(o[1])) if a else None for o, a in zip(offsets, applied))
    elif kind is OpKind.HFLIP or kind is OpKind.GRAYSCALE:
        params = tuple(True if a else None for a in applied)
    elif kind is OpKind.CUTOUT:
        centers = gen.random((n, 2))
        params = tuple((float(c[0]), float(c[1])) if a else None for c, a in zip(centers, applied))
    elif kind is OpKind.COLOR_JITTER:
        factors = gen.uniform(1 - op.magnitude, 1 + op.magnitude, size=(n, 3))
        params = tuple(tuple(float(v) for v in f) if a else None for f, a in zip(factors, applied))
    elif kind is OpKind.ROTATE90:
        turns = gen.integers(1, 4, size=n)
        params = tuple(int(t) if a else None for t, a in zip(turns, applied))
    elif kind is OpKind.GAUSSIAN_BLUR:
        sigmas = gen.uniform(*BLUR_SIGMA_RANGE, size=n)
        params = tuple(float(s) if a else None for s, a in zip(sigmas, applied))
    elif kind is OpKind.AUTOAUG_SUBOP:
        table = autoaugment.CIFAR10_POLICY if sub_policies is None else tuple(sub_policies)
        params = _sample_subpolicies(gen, n, table, applied)
    else:
        raise ValueError(f"unsupported op {kind}")
    return ConcreteStep(kind=kind, magnitude=op.magnitude, params=params)


def _sample_subpolicies(gen: np.random.Generator, n: int, table, applied) -> Tuple[Any, ...]:
    choice = gen.integers(0, max(len(table), 1), size=n)
    gates = gen.random((n, 2))
    signs = gen.choice((-1, 1), size=(n, 2))
    params = []
    for i in range(n):
        if not table or not applied[i]:
            params.append(None)
            continue
        p1, name1, bin1, p2, name2, bin2 = table[choice[i]]
        first = (name1, autoaugment.magnitude_of(name1, bin1, signs[i, 0])) if gates[i, 0] < p1 else None
        second = (name2, autoaugment.magnitude_of(name2, bin2, signs[i, 1])) if gates[i, 1] < p2 else None
        params.append(None if first is None and second is None else (first, second))
    return tuple(params)


def apply(op: AugmentOp, batch: ImageBatch, rng: RngState) -> ImageBatch:
    return sample_step(op, batch.shape[0], rng)(batch)
