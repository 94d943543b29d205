"""
Augmentation policies (distributions over transforms) and transform sampling.

A policy is an ordered list of ops. Sampling a policy resolves every random
choice up front into a Transform, which is then a plain deterministic
function of the batch. Two draws for the same step come from distinct rng
sub-streams, so T1 and T2 are independent.
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from consistency_at.augment import autoaugment
from consistency_at.augment.ops import AugmentOp, ConcreteStep, OpKind, sample_step
from consistency_at.core.types import ImageBatch, RngState

logger = logging.getLogger(__name__)

POLICY_NAMES = ('none', 'base', 'base+cutout', 'base+color', 'base+color+cutout', 'autoaugment', 'custom')

BASE_OPS = (AugmentOp(OpKind.CROP_PAD), AugmentOp(OpKind.HFLIP))
CUTOUT_OPS = (AugmentOp(OpKind.CUTOUT),)
COLOR_OPS = (AugmentOp(OpKind.COLOR_JITTER), AugmentOp(OpKind.GRAYSCALE))

# Families for the pairwise composition grid.
FAMILIES: Dict[str, Tuple[AugmentOp, ...]] = {
    'crop': BASE_OPS,
    'rotate': (AugmentOp(OpKind.ROTATE90),),
    'cutout': CUTOUT_OPS,
    'color': COLOR_OPS,
    'blur': (AugmentOp(OpKind.GAUSSIAN_BLUR),),
}


@dataclass(frozen=True)
class AugmentPolicy:
    name: str
    ops: Tuple[AugmentOp, ...]
    sub_policies: Optional[Tuple[autoaugment.SubPolicy, ...]] = None

    def __post_init__(self):
        if not self.ops:
            raise ValueError(f"policy {self.name!r} has no ops")
        object.__setattr__(self, 'ops', tuple(self.ops))
        if self.sub_policies is not None:
            object.__setattr__(self, 'sub_policies', tuple(self.sub_policies))


@dataclass(frozen=True)
class Transform:
    """A fully sampled transform; applying it draws no randomness."""
    steps: Tuple[ConcreteStep, ...]

    def __call__(self, images: ImageBatch) -> ImageBatch:
        for step in self.steps:
            images = step(images)
        return images

    @property
    def kinds(self) -> Tuple[str, ...]:
        return tuple(step.kind.value for step in self.steps)

    @property
    def is_identity(self) -> bool:
        return all(step.kind is OpKind.IDENTITY or all(p is None for p in step.params) for step in self.steps)


IDENTITY = Transform(steps=())


def build_policy(name: str, ops: Optional[Iterable[Any]] = None,
                 sub_policies: Optional[Sequence[autoaugment.SubPolicy]] = None) -> AugmentPolicy:
    """
    Build a named policy. 'custom' takes ops as AugmentOp instances or
    {kind, probability, magnitude} dicts; sub_policies replaces the
    AutoAugment table.
    """
    if name == 'none':
        return AugmentPolicy(name, (AugmentOp(OpKind.IDENTITY),))
    if name == 'base':
        return AugmentPolicy(name, BASE_OPS)
    if name == 'base+cutout':
        return AugmentPolicy(name, BASE_OPS + CUTOUT_OPS)
    if name == 'base+color':
        return AugmentPolicy(name, BASE_OPS + COLOR_OPS)
    if name == 'base+color+cutout':
        return AugmentPolicy(name, BASE_OPS + COLOR_OPS + CUTOUT_OPS)
    if name == 'autoaugment':
        table = autoaugment.CIFAR10_POLICY if sub_policies is None else tuple(sub_policies)
        return AugmentPolicy(name, (AugmentOp(OpKind.AUTOAUG_SUBOP),) + BASE_OPS + CUTOUT_OPS, sub_policies=table)
    if name == 'custom':
        parsed = tuple(op if isinstance(op, AugmentOp) else AugmentOp.from_dict(op) for op in (ops or ()))
        if not parsed:
            raise ValueError("custom policy needs at least one op")
        return AugmentPolicy(name, parsed)
    raise ValueError(f"unknown augmentation policy {name!r}; choose from {list(POLICY_NAMES)}")


def sample_transform(policy: AugmentPolicy, rng: RngState, num_samples: int = 1) -> Transform:
    steps = tuple(
        sample_step(op, num_samples, rng.spawn(index), policy.sub_policies)
        for index, op in enumerate(policy.ops)
    )
    return Transform(steps=steps)


def sample_pair(policy: AugmentPolicy, rng: RngState, num_samples: int = 1) -> Tuple[Transform, Transform]:
    return (
        sample_transform(policy, rng.spawn(1), num_samples),
        sample_transform(policy, rng.spawn(2), num_samples),
    )


def composition_policy(first: str, second: str) -> AugmentPolicy:
    """Two augmentation families applied in sequence (one family if equal)."""
    for family in (first, second):
        if family not in FAMILIES:
            raise ValueError(f"unknown augmentation family {family!r}; choose from {sorted(FAMILIES)}")
    ops = FAMILIES[first] if first == second else FAMILIES[first] + FAMILIES[second]
    return AugmentPolicy(f'custom:{first}+{second}' if first != second else f'custom:{first}', ops)


def composition_grid(families: Optional[Sequence[str]] = None) -> Dict[Tuple[str, str], AugmentPolicy]:
    """Every unordered family pair, diagonal included."""
    names: List[str] = list(families or FAMILIES)
    return {
        (a, b): composition_policy(a, b)
        for a, b in itertools.combinations_with_replacement(names, 2)
    }
