"""
Probability-space divergences. All logs are natural; probabilities are
floored at PROB_FLOOR before any log. Per-sample functions return [N].
"""
from typing import Sequence

import torch
import torch.nn.functional as F

PROB_FLOOR = 1e-12


def softmax_temperature(logits: torch.Tensor, tau: float) -> torch.Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    return F.softmax(logits / tau, dim=-1)


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) per row."""
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {tuple(p.shape)} vs {tuple(q.shape)}")
    return (torch.xlogy(p, p) - p * q.clamp_min(PROB_FLOOR).log()).sum(dim=-1)


def js_divergence(dists: Sequence[torch.Tensor]) -> torch.Tensor:
    """(1/n) * sum_i KL(p_i || m) with m the mean distribution, n in {2, 3}."""
    n = len(dists)
    if n not in (2, 3):
        raise ValueError(f"JS divergence is defined here for 2 or 3 distributions, got {n}")
    shape = dists[0].shape
    if any(d.shape != shape for d in dists):
        raise ValueError(f"distribution shapes differ: {[tuple(d.shape) for d in dists]}")
    mixture = torch.stack(list(dists)).mean(dim=0)
    return sum(kl_divergence(p, mixture) for p in dists) / n


def cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of -log p_y."""
    picked = probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    return -picked.clamp_min(PROB_FLOOR).log().mean()


def mse_cr(p1: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
    return ((p1 - p2) ** 2).sum(dim=-1).mean()


def kl_cr(p1: torch.Tensor, p2: torch.Tensor) -> torch.Tensor:
    return kl_divergence(p1, p2).mean()
