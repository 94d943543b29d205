"""
Fixed AutoAugment CIFAR-10 policy: 25 sub-policies of two
(probability, operation, magnitude bin) entries, applied to float tensors.
"""
import math
from typing import Tuple

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

# Grey fill for geometric ops, (128, 128, 128) in byte units.
FILL = 128 / 255

MAGNITUDE_BINS = 10
RANGES = {
    'shearX': np.linspace(0, 0.3, MAGNITUDE_BINS),
    'shearY': np.linspace(0, 0.3, MAGNITUDE_BINS),
    'translateX': np.linspace(0, 150 / 331, MAGNITUDE_BINS),
    'translateY': np.linspace(0, 150 / 331, MAGNITUDE_BINS),
    'rotate': np.linspace(0, 30, MAGNITUDE_BINS),
    'color': np.linspace(0.0, 0.9, MAGNITUDE_BINS),
    'posterize': np.round(np.linspace(8, 4, MAGNITUDE_BINS), 0).astype(int),
    'solarize': np.linspace(256, 0, MAGNITUDE_BINS),
    'contrast': np.linspace(0.0, 0.9, MAGNITUDE_BINS),
    'sharpness': np.linspace(0.0, 0.9, MAGNITUDE_BINS),
    'brightness': np.linspace(0.0, 0.9, MAGNITUDE_BINS),
    'autocontrast': np.zeros(MAGNITUDE_BINS),
    'equalize': np.zeros(MAGNITUDE_BINS),
    'invert': np.zeros(MAGNITUDE_BINS),
}

# Operations whose magnitude is applied with a random sign.
SIGNED = frozenset({
    'shearX', 'shearY', 'translateX', 'translateY', 'rotate',
    'color', 'contrast', 'sharpness', 'brightness',
})

SubPolicy = Tuple[float, str, int, float, str, int]

CIFAR10_POLICY: Tuple[SubPolicy, ...] = (
    (0.1, 'invert', 7, 0.2, 'contrast', 6),
    (0.7, 'rotate', 2, 0.3, 'translateX', 9),
    (0.8, 'sharpness', 1, 0.9, 'sharpness', 3),
    (0.5, 'shearY', 8, 0.7, 'translateY', 9),
    (0.5, 'autocontrast', 8, 0.9, 'equalize', 2),
    (0.2, 'shearY', 7, 0.3, 'posterize', 7),
    (0.4, 'color', 3, 0.6, 'brightness', 7),
    (0.3, 'sharpness', 9, 0.7, 'brightness', 9),
    (0.6, 'equalize', 5, 0.5, 'equalize', 1),
    (0.6, 'contrast', 7, 0.6, 'sharpness', 5),
    (0.7, 'color', 7, 0.5, 'translateX', 8),
    (0.3, 'equalize', 7, 0.4, 'autocontrast', 8),
    (0.4, 'translateY', 3, 0.2, 'sharpness', 6),
    (0.9, 'brightness', 6, 0.2, 'color', 8),
    (0.5, 'solarize', 2, 0.0, 'invert', 3),
    (0.2, 'equalize', 0, 0.6, 'autocontrast', 0),
    (0.2, 'equalize', 8, 0.6, 'equalize', 4),
    (0.9, 'color', 9, 0.6, 'equalize', 6),
    (0.8, 'autocontrast', 4, 0.2, 'solarize', 8),
    (0.1, 'brightness', 3, 0.7, 'color', 0),
    (0.4, 'solarize', 5, 0.9, 'autocontrast', 3),
    (0.9, 'translateY', 9, 0.7, 'translateY', 9),
    (0.9, 'autocontrast', 2, 0.8, 'solarize', 3),
    (0.8, 'equalize', 8, 0.1, 'invert', 3),
    (0.7, 'translateY', 9, 0.9, 'autocontrast', 1),
)


def magnitude_of(name: str, bin_index: int, sign: int = 1) -> float:
    value = float(RANGES[name][bin_index])
    return value * sign if name in SIGNED else value


def _to_uint8(img: torch.Tensor) -> torch.Tensor:
    return (img * 255).round().clamp(0, 255).to(torch.uint8)


def _from_uint8(img: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    return img.to(dtype).div(255.0)


def apply_subop(img: torch.Tensor, name: str, magnitude: float) -> torch.Tensor:
    """Apply one named operation to a single [C, H, W] image in [0, 1]."""
    fill = [FILL] * img.shape[0]
    _, height, width = img.shape

    if name == 'shearX':
        out = TF.affine(img, angle=0.0, translate=[0, 0], scale=1.0,
                        shear=[math.degrees(math.atan(magnitude)), 0.0],
                        interpolation=InterpolationMode.BILINEAR, fill=fill)
    elif name == 'shearY':
        out = TF.affine(img, angle=0.0, translate=[0, 0], scale=1.0,
                        shear=[0.0, math.degrees(math.atan(magnitude))],
                        interpolation=InterpolationMode.BILINEAR, fill=fill)
    elif name == 'translateX':
        out = TF.affine(img, angle=0.0, translate=[int(round(magnitude * width)), 0], scale=1.0,
                        shear=[0.0, 0.0], fill=fill)
    elif name == 'translateY':
        out = TF.affine(img, angle=0.0, translate=[0, int(round(magnitude * height))], scale=1.0,
                        shear=[0.0, 0.0], fill=fill)
    elif name == 'rotate':
        out = TF.rotate(img, magnitude, interpolation=InterpolationMode.BILINEAR, fill=fill)
    elif name == 'color':
        out = TF.adjust_saturation(img, 1 + magnitude)
    elif name == 'contrast':
        out = TF.adjust_contrast(img, 1 + magnitude)
    elif name == 'brightness':
        out = TF.adjust_brightness(img, 1 + magnitude)
    elif name == 'sharpness':
        out = TF.adjust_sharpness(img, 1 + magnitude)
    elif name == 'posterize':
        out = _from_uint8(TF.posterize(_to_uint8(img), int(magnitude)), img.dtype)
    elif name == 'solarize':
        out = TF.solarize(img, magnitude / 256)
    elif name == 'autocontrast':
        out = TF.autocontrast(img)
    elif name == 'equalize':
        out = _from_uint8(TF.equalize(_to_uint8(img)), img.dtype)
    elif name == 'invert':
        out = TF.invert(img)
    else:
        raise ValueError(f"unknown AutoAugment operation {name!r}")
    return out.clamp(0.0, 1.0)
