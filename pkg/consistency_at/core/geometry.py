"""lp-ball geometry on per-sample perturbations [N, ...]."""
import torch

from consistency_at.core.types import ImageBatch, Norm


def lp_norm(delta: torch.Tensor, norm: Norm) -> torch.Tensor:
    """Per-sample norm of a [N, ...] tensor."""
    norm = Norm.parse(norm)
    flat = delta.reshape(delta.shape[0], -1)
    if norm is Norm.LINF:
        return flat.abs().amax(dim=1)
    if norm is Norm.L2:
        return flat.norm(p=2, dim=1)
    return flat.abs().sum(dim=1)


def _project_l1(flat: torch.Tensor, epsilon: float) -> torch.Tensor:
    # Sorting-based projection onto the simplex of radius epsilon, applied to |v|
    # and re-signed (Duchi et al. 2008), batched over rows.
    abs_flat = flat.abs()
    outside = abs_flat.sum(dim=1) > epsilon
    if not outside.any():
        return flat
    v = abs_flat[outside]
    u, _ = torch.sort(v, dim=1, descending=True)
    cssv = torch.cumsum(u, dim=1) - epsilon
    ind = torch.arange(1, v.shape[1] + 1, device=v.device, dtype=v.dtype)
    cond = (u - cssv / ind) > 0
    rho = cond.sum(dim=1, keepdim=True)
    theta = torch.gather(cssv, 1, rho - 1) / rho.to(v.dtype)
    w = torch.clamp(v - theta, min=0) * torch.sign(flat[outside])
    result = flat.clone()
    result[outside] = w
    return result


def project_lp(delta: torch.Tensor, norm: Norm, epsilon: float) -> torch.Tensor:
    """
    Euclidean projection of each sample of delta onto the lp ball of radius
    epsilon. Samples already inside the ball are returned unchanged.

    l-inf clamps elementwise, l2 rescales radially, l1 uses the exact
    O(d log d) sorting algorithm.
    """
    norm = Norm.parse(norm)
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if epsilon == 0:
        return torch.zeros_like(delta)

    if norm is Norm.LINF:
        return torch.clamp(delta, -epsilon, epsilon)

    flat = delta.reshape(delta.shape[0], -1)
    if norm is Norm.L2:
        norms = flat.norm(p=2, dim=1, keepdim=True)
        scale = epsilon / norms.clamp_min(torch.finfo(flat.dtype).tiny)
        projected = torch.where(norms > epsilon, flat * scale, flat)
        return projected.reshape(delta.shape)
    return _project_l1(flat, epsilon).reshape(delta.shape)


def clip_to_image(x_adv: ImageBatch) -> ImageBatch:
    return torch.clamp(x_adv, 0.0, 1.0)
