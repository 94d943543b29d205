"""
Projected gradient ascent on the input under l-inf, l2 and l1 balls.

Evaluation attacks run the model with running batch statistics (eval mode).
Attacks crafted inside a training step pass batch_stats=True: the model stays
in train mode and normalizes with the batch, while running statistics are
restored afterwards. Both restore the caller's mode.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from consistency_at.attack.objectives import LossKind, attack_loss
from consistency_at.core.geometry import clip_to_image, project_lp
from consistency_at.core.types import ImageBatch, LabeledBatch, Norm, RngState, ThreatModel
from consistency_at.model.networks import statistics_context

logger = logging.getLogger(__name__)

# Share of coordinates moved per l1 step.
L1_TOP_FRACTION = 0.01
# Scale of the Gaussian start used by KL attacks when random_start is off;
# the KL objective has zero gradient at delta = 0.
KL_INIT_SCALE = 0.001


@dataclass(frozen=True)
class AttackSpec:
    threat: ThreatModel
    loss_kind: LossKind = LossKind.CE
    restarts: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'loss_kind', LossKind.parse(self.loss_kind))
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")


@dataclass
class AttackResult:
    adversarial: ImageBatch
    delta: torch.Tensor
    loss_before: torch.Tensor
    loss_after: torch.Tensor
    success: torch.Tensor
    loss_kind: LossKind = LossKind.CE


def ascent_direction(grad: torch.Tensor, norm: Norm) -> torch.Tensor:
    """Unit steepest-ascent direction per sample. A zero gradient gives no movement."""
    if norm is Norm.LINF:
        return grad.sign()
    flat = grad.reshape(grad.shape[0], -1)
    if norm is Norm.L2:
        norms = flat.norm(p=2, dim=1, keepdim=True)
        direction = torch.where(norms > 0, flat / norms.clamp_min(torch.finfo(flat.dtype).tiny), torch.zeros_like(flat))
        return direction.reshape(grad.shape)
    top = max(1, int(round(L1_TOP_FRACTION * flat.shape[1])))
    _, indices = flat.abs().topk(top, dim=1)
    direction = torch.zeros_like(flat)
    direction.scatter_(1, indices, flat.gather(1, indices).sign() / top)
    return direction.reshape(grad.shape)


def random_start(shape: torch.Size, norm: Norm, epsilon: float, generator: torch.Generator) -> torch.Tensor:
    """A point drawn uniformly from the lp ball of radius epsilon, per sample."""
    n = shape[0]
    dim = int(torch.Size(shape[1:]).numel())
    if norm is Norm.LINF:
        return (torch.rand(shape, generator=generator) * 2 - 1) * epsilon
    if norm is Norm.L2:
        direction = torch.randn(n, dim, generator=generator)
        direction = direction / direction.norm(dim=1, keepdim=True).clamp_min(1e-12)
        radius = epsilon * torch.rand(n, 1, generator=generator) ** (1.0 / dim)
        return (direction * radius).reshape(shape)
    # l1: normalized exponentials (one slack coordinate) with random signs
    exponentials = torch.empty(n, dim + 1).exponential_(generator=generator)
    point = exponentials[:, :dim] / exponentials.sum(dim=1, keepdim=True)
    signs = torch.randint(0, 2, (n, dim), generator=generator) * 2 - 1
    return (point * signs * epsilon).reshape(shape)


def _initial_delta(x: torch.Tensor, spec: AttackSpec, generator: torch.Generator) -> torch.Tensor:
    threat = spec.threat
    if threat.random_start:
        delta = random_start(x.shape, threat.norm, threat.epsilon, generator)
    elif spec.loss_kind is LossKind.KL_TO_REFERENCE:
        delta = KL_INIT_SCALE * torch.randn(x.shape, generator=generator)
    else:
        return torch.zeros_like(x)
    return delta.to(device=x.device, dtype=x.dtype)


def _single_run(model: nn.Module, x: torch.Tensor, y: torch.Tensor, spec: AttackSpec,
                reference: Optional[torch.Tensor], generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    """One restart. Returns the best iterate found (start point included) and its loss."""
    threat = spec.threat
    delta = project_lp(_initial_delta(x, spec, generator), threat.norm, threat.epsilon)
    x_adv = clip_to_image(x + delta)
    best_adv = x_adv.clone()
    best_loss = torch.full((x.shape[0],), float('-inf'), device=x.device, dtype=x.dtype)

    for step in range(threat.steps + 1):
        x_adv = x_adv.detach().requires_grad_(True)
        loss = attack_loss(model(x_adv), y, spec.loss_kind, reference)
        with torch.no_grad():
            improved = loss > best_loss
            best_adv[improved] = x_adv[improved]
            best_loss = torch.where(improved, loss, best_loss)
        if step == threat.steps:
            break
        grad, = torch.autograd.grad(loss.sum(), x_adv)
        with torch.no_grad():
            delta = x_adv + threat.step_size * ascent_direction(grad, threat.norm) - x
            delta = project_lp(delta, threat.norm, threat.epsilon)
            x_adv = clip_to_image(x + delta)
    return best_adv.detach(), best_loss.detach()


def pgd(model: nn.Module, batch: LabeledBatch, spec: AttackSpec,
        reference: Optional[torch.Tensor] = None, rng: Optional[RngState] = None,
        batch_stats: bool = False) -> AttackResult:
    x, y = batch.images.detach(), batch.labels
    if spec.loss_kind is LossKind.KL_TO_REFERENCE and reference is None:
        raise ValueError("KL_to_reference attacks need the clean predictive distribution as reference")
    rng = rng or RngState(0)
    reference = None if reference is None else reference.detach()

    with statistics_context(model, batch_stats):
        with torch.no_grad():
            clean_logits = model(x)
            loss_before = attack_loss(clean_logits, y, spec.loss_kind, reference)

        if spec.threat.epsilon == 0:
            return AttackResult(
                adversarial=x.clone(),
                delta=torch.zeros_like(x),
                loss_before=loss_before,
                loss_after=loss_before.clone(),
                success=clean_logits.argmax(dim=1) != y,
                loss_kind=spec.loss_kind,
            )

        best_adv, best_loss = None, None
        for restart in range(spec.restarts):
            candidate, loss = _single_run(model, x, y, spec, reference, rng.spawn(restart).torch())
            if best_adv is None:
                best_adv, best_loss = candidate, loss
                continue
            improved = loss > best_loss
            best_adv[improved] = candidate[improved]
            best_loss = torch.where(improved, loss, best_loss)

        with torch.no_grad():
            logits = model(best_adv)
            loss_after = attack_loss(logits, y, spec.loss_kind, reference)

    return AttackResult(
        adversarial=best_adv,
        delta=best_adv - x,
        loss_before=loss_before,
        loss_after=loss_after,
        success=logits.argmax(dim=1) != y,
        loss_kind=spec.loss_kind,
    )


def clean_reference(model: nn.Module, images: ImageBatch, batch_stats: bool = False) -> torch.Tensor:
    """Clean predictive distribution used as the KL attack target."""
    with statistics_context(model, batch_stats), torch.no_grad():
        return F.softmax(model(images), dim=1)


def attack_transformed(model: nn.Module, x: ImageBatch, y: torch.Tensor, transform, spec: AttackSpec,
                       rng: RngState, batch_stats: bool = False) -> AttackResult:
    """Attack T(x). KL attacks use the clean prediction at T(x) as reference."""
    images = transform(x)
    reference = clean_reference(model, images, batch_stats) if spec.loss_kind is LossKind.KL_TO_REFERENCE else None
    return pgd(model, LabeledBatch(images, y), spec, reference, rng, batch_stats)


def attack_pair(model: nn.Module, x: ImageBatch, y: torch.Tensor, t1, t2, spec: AttackSpec,
                rng: RngState, batch_stats: bool = False) -> Tuple[AttackResult, AttackResult]:
    """Independent attacks on T1(x) and T2(x); no consistency term enters the inner max."""
    return (
        attack_transformed(model, x, y, t1, spec, rng.spawn(1), batch_stats),
        attack_transformed(model, x, y, t2, spec, rng.spawn(2), batch_stats),
    )
