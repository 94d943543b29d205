"""
Training objectives: AT, TRADES and MART over two augmented branches, each
optionally combined with a consistency regularizer between the branches.

total = (1/2) * sum_i L_method(T_i(x), delta_i) + lambda * regularizer
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from consistency_at.attack.objectives import LossKind
from consistency_at.attack.pgd import AttackResult
from consistency_at.errors import AttackKindMismatchError
from consistency_at.objective.divergences import (
    PROB_FLOOR, cross_entropy, js_divergence, kl_cr, kl_divergence, mse_cr, softmax_temperature,
)

logger = logging.getLogger(__name__)


class Method(str, Enum):
    AT = 'AT'
    TRADES = 'TRADES'
    MART = 'MART'


class Regularizer(str, Enum):
    NONE = 'none'
    JS_CONSISTENCY = 'js_consistency'
    CONVENTIONAL_CR = 'conventional_cr'
    MSE_CR = 'mse_cr'
    KL_CR = 'kl_cr'
    AUGMIX_CR = 'augmix_cr'


@dataclass(frozen=True)
class LossConfig:
    method: Method = Method.AT
    regularizer: Regularizer = Regularizer.JS_CONSISTENCY
    lam: float = 1.0
    tau: float = 0.5
    beta: float = 6.0
    gamma: float = 6.0
    # apply tau to the MSE/KL ablation regularizers as well
    ablation_temperature: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'method', Method(self.method))
        object.__setattr__(self, 'regularizer', Regularizer(self.regularizer))
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")

    @property
    def attack_loss_kind(self) -> LossKind:
        return LossKind.KL_TO_REFERENCE if self.method is Method.TRADES else LossKind.CE

    @property
    def needs_base_branch(self) -> bool:
        return self.regularizer is Regularizer.AUGMIX_CR


@dataclass
class LossBreakdown:
    total: torch.Tensor
    terms: Dict[str, torch.Tensor] = field(default_factory=dict)
    # unweighted regularizer value
    regularizer: float = 0.0

    @property
    def adversarial(self) -> float:
        return float(sum(v.item() for k, v in self.terms.items() if k != 'consistency'))

    def as_floats(self) -> Dict[str, float]:
        values = {name: float(value.item()) for name, value in self.terms.items()}
        values['total'] = float(self.total.item())
        values['regularizer'] = self.regularizer
        return values

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.total).item()) and all(bool(torch.isfinite(v).item()) for v in self.terms.values())


def consistency_from_logits(logits1: torch.Tensor, logits2: torch.Tensor, tau: float) -> torch.Tensor:
    return js_divergence([softmax_temperature(logits1, tau), softmax_temperature(logits2, tau)]).mean()


def consistency_loss(model: nn.Module, t1x_adv: torch.Tensor, t2x_adv: torch.Tensor, tau: float) -> torch.Tensor:
    """JS between temperature-scaled predictions on the two attacked views, batch mean.
    Gradients flow through both branches."""
    if t1x_adv.shape[0] != t2x_adv.shape[0]:
        raise ValueError("both branches must hold the same number of images")
    return consistency_from_logits(model(t1x_adv), model(t2x_adv), tau)


def conventional_cr(model: nn.Module, t1x: torch.Tensor, t2x: torch.Tensor) -> torch.Tensor:
    """JS between plain predictions on the two clean augmented views."""
    return js_divergence([F.softmax(model(t1x), dim=1), F.softmax(model(t2x), dim=1)]).mean()


def augmix_cr(model: nn.Module, base_adv: torch.Tensor, aug1_adv: torch.Tensor, aug2_adv: torch.Tensor) -> torch.Tensor:
    """Three-way JS over the base-augmented and two policy-augmented attacked views."""
    return js_divergence([F.softmax(model(x), dim=1) for x in (base_adv, aug1_adv, aug2_adv)]).mean()


def _method_terms(config: LossConfig, y: torch.Tensor, adv_logits: torch.Tensor,
                  clean_logits: Optional[torch.Tensor]) -> Dict[str, torch.Tensor]:
    if config.method is Method.AT:
        return {'adv_ce': F.cross_entropy(adv_logits, y)}

    clean_probs = F.softmax(clean_logits, dim=1)
    adv_probs = F.softmax(adv_logits, dim=1)
    kl = kl_divergence(clean_probs, adv_probs)

    if config.method is Method.TRADES:
        return {
            'clean_ce': F.cross_entropy(clean_logits, y),
            'robust_kl': config.beta * kl.mean(),
        }

    # MART: boosted CE on the adversarial view plus a KL weighted by clean misclassification
    mask = F.one_hot(y, adv_probs.shape[1]).bool()
    runner_up = adv_probs.masked_fill(mask, 0.0).amax(dim=1)
    bce = cross_entropy(adv_probs, y) - (1.0 - runner_up).clamp_min(PROB_FLOOR).log().mean()
    true_probs = clean_probs.gather(1, y.unsqueeze(1)).squeeze(1)
    return {
        'adv_bce': bce,
        'robust_kl': config.gamma * (kl * (1.0 - true_probs)).mean(),
    }


def _regularizer(config: LossConfig, adv_logits: Sequence[torch.Tensor], clean_logits: Sequence[Optional[torch.Tensor]],
                 base_logits: Optional[torch.Tensor]) -> torch.Tensor:
    kind = config.regularizer
    if kind is Regularizer.JS_CONSISTENCY:
        return consistency_from_logits(adv_logits[0], adv_logits[1], config.tau)
    if kind is Regularizer.CONVENTIONAL_CR:
        return js_divergence([F.softmax(c, dim=1) for c in clean_logits]).mean()
    if kind in (Regularizer.MSE_CR, Regularizer.KL_CR):
        tau = config.tau if config.ablation_temperature else 1.0
        p1, p2 = (softmax_temperature(z, tau) for z in adv_logits)
        return mse_cr(p1, p2) if kind is Regularizer.MSE_CR else kl_cr(p1, p2)
    if kind is Regularizer.AUGMIX_CR:
        return js_divergence([F.softmax(z, dim=1) for z in (base_logits, *adv_logits)]).mean()
    return adv_logits[0].new_zeros(())


def total_loss(model: nn.Module, x: torch.Tensor, y: torch.Tensor, transforms: Tuple, attack_results: Tuple[AttackResult, AttackResult],
               config: LossConfig, base: Optional[Tuple[object, AttackResult]] = None) -> LossBreakdown:
    """
    Composed objective over both branches. The model is used in whatever mode
    the caller left it in (train mode during training). Each branch is a
    separate forward pass. With lambda = 0 the regularizer is still measured,
    without gradient.
    """
    expected = config.attack_loss_kind
    for result in attack_results:
        if result.loss_kind is not expected:
            raise AttackKindMismatchError(
                f"{config.method.value} expects attacks on {expected.value}, got {result.loss_kind.value}")
    if config.needs_base_branch and base is None:
        raise ValueError("augmix_cr needs the base-augmented attacked branch")

    adv_logits = [model(r.adversarial) for r in attack_results]
    needs_clean = config.method is not Method.AT or config.regularizer is Regularizer.CONVENTIONAL_CR
    clean_logits = [model(t(x)) for t in transforms] if needs_clean else [None, None]

    terms: Dict[str, torch.Tensor] = {}
    for adv, clean in zip(adv_logits, clean_logits):
        for name, value in _method_terms(config, y, adv, clean).items():
            terms[name] = terms[name] + value / 2 if name in terms else value / 2

    if config.regularizer is Regularizer.NONE:
        reg = adv_logits[0].new_zeros(())
    elif config.lam == 0:
        with torch.no_grad():
            base_logits = model(base[1].adversarial) if config.needs_base_branch else None
            reg = _regularizer(config, [z.detach() for z in adv_logits],
                               [None if c is None else c.detach() for c in clean_logits], base_logits)
    else:
        base_logits = model(base[1].adversarial) if config.needs_base_branch else None
        reg = _regularizer(config, adv_logits, clean_logits, base_logits)

    terms['consistency'] = config.lam * reg
    total = sum(terms.values())
    return LossBreakdown(total=total, terms=terms, regularizer=float(reg.detach().item()))
