from typing import Optional

import torch
import torch.nn as nn

from consistency_at.attack.objectives import LossKind, attack_loss


def input_gradient(model: nn.Module, images: torch.Tensor, labels: torch.Tensor, loss_kind: LossKind,
                   reference: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Gradient of the summed per-sample loss with respect to the input pixels.
    Only the input is differentiated, so no parameter .grad is touched.
    Runs in whatever train/eval mode the model is currently in.
    """
    images = images.detach().requires_grad_(True)
    loss = attack_loss(model(images), labels, loss_kind, reference)
    grad, = torch.autograd.grad(loss.sum(), images)
    return grad
