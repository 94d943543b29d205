"""Per-sample objectives maximized by the attacks."""
import math
from enum import Enum
from typing import Optional, Union

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12
LOG_FLOOR = math.log(PROB_FLOOR)


class LossKind(str, Enum):
    CE = 'CE'
    KL_TO_REFERENCE = 'KL_to_reference'
    CW_MARGIN = 'CW_margin'

    @classmethod
    def parse(cls, value: Union['LossKind', str]) -> 'LossKind':
        if isinstance(value, LossKind):
            return value
        for kind in cls:
            if kind.value.lower() == str(value).lower():
                return kind
        raise ValueError(f"unknown attack loss {value!r}; choose from {[k.value for k in cls]}")


def cw_margin_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """max_{k != y} z_k - z_y per sample; positive iff the logits misclassify."""
    if logits.shape[1] < 2:
        raise ValueError("the margin loss needs at least two classes")
    true_logit = logits.gather(1, labels.unsqueeze(1)).squeeze(1)
    mask = F.one_hot(labels, logits.shape[1]).bool()
    other = logits.masked_fill(mask, float('-inf')).amax(dim=1)
    return other - true_logit


def kl_to_reference(logits: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """KL(reference || softmax(logits)) per sample."""
    log_q = F.log_softmax(logits, dim=1)
    return (torch.xlogy(reference, reference) - reference * log_q.clamp_min(LOG_FLOOR)).sum(dim=1)


def attack_loss(logits: torch.Tensor, labels: torch.Tensor, kind: LossKind,
                reference: Optional[torch.Tensor] = None) -> torch.Tensor:
    kind = LossKind.parse(kind)
    if kind is LossKind.CE:
        return F.cross_entropy(logits, labels, reduction='none')
    if kind is LossKind.CW_MARGIN:
        return cw_margin_loss(logits, labels)
    if reference is None:
        raise ValueError("KL_to_reference needs the clean predictive distribution as reference")
    return kl_to_reference(logits, reference)
