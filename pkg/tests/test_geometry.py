import itertools

import pytest
import torch

from consistency_at.core.geometry import clip_to_image, lp_norm, project_lp
from consistency_at.core.types import Norm, ThreatModel
from consistency_at.errors import NormNotSupportedError


@pytest.mark.parametrize('norm', [Norm.LINF, Norm.L2, Norm.L1])
def test_projection_lands_in_ball_and_is_idempotent(norm):
    generator = torch.Generator().manual_seed(0)
    delta = torch.randn(2000, 3, 4, 4, generator=generator, dtype=torch.float64) * 3
    eps = 1.5
    projected = project_lp(delta, norm, eps)
    assert (lp_norm(projected, norm) <= eps + 1e-9).all()
    again = project_lp(projected, norm, eps)
    torch.testing.assert_close(again, projected, atol=1e-9, rtol=0)


@pytest.mark.parametrize('norm', [Norm.LINF, Norm.L2, Norm.L1])
def test_points_inside_ball_are_untouched(norm):
    delta = torch.full((1, 3, 2, 2), 0.01, dtype=torch.float64)
    assert torch.equal(project_lp(delta, norm, 1.0), delta)


def test_projection_examples():
    linf = project_lp(torch.tensor([[0.5, -0.5]]), Norm.LINF, 0.1)
    torch.testing.assert_close(linf, torch.tensor([[0.1, -0.1]]))

    l2 = project_lp(torch.tensor([[3.0, 4.0]], dtype=torch.float64), Norm.L2, 1.0)
    torch.testing.assert_close(l2, torch.tensor([[0.6, 0.8]], dtype=torch.float64))

    l1 = project_lp(torch.tensor([[3.0, 1.0]], dtype=torch.float64), Norm.L1, 2.0)
    torch.testing.assert_close(l1, torch.tensor([[2.0, 0.0]], dtype=torch.float64))


def test_l1_projection_matches_grid_search():
    generator = torch.Generator().manual_seed(1)
    step = 0.01
    eps = 1.0
    axis = torch.arange(-eps, eps + step / 2, step, dtype=torch.float64)
    grid = torch.tensor(list(itertools.product(axis.tolist(), repeat=2)), dtype=torch.float64)
    grid = grid[grid.abs().sum(dim=1) <= eps + 1e-12]
    for _ in range(20):
        v = torch.randn(1, 2, generator=generator, dtype=torch.float64) * 2
        projected = project_lp(v, Norm.L1, eps)
        best = grid[((grid - v) ** 2).sum(dim=1).argmin()]
        assert torch.dist(projected[0], best) <= 2 * step


def test_zero_radius_projects_to_origin():
    delta = torch.randn(4, 3, 2, 2)
    assert torch.count_nonzero(project_lp(delta, Norm.L2, 0.0)) == 0


def test_negative_radius_rejected():
    with pytest.raises(ValueError):
        project_lp(torch.zeros(1, 2), Norm.LINF, -0.1)


def test_unsupported_norm():
    with pytest.raises(NormNotSupportedError):
        project_lp(torch.zeros(1, 2), 3, 1.0)
    with pytest.raises(ValueError):
        Norm.parse('l3')


def test_clip_to_image():
    x = torch.tensor([-0.2, 0.5, 1.3])
    assert clip_to_image(x).tolist() == [0.0, 0.5, 1.0]


def test_threat_model_validation():
    ThreatModel('linf', 0.0, 1, 0.0)
    with pytest.raises(ValueError):
        ThreatModel('linf', -1.0, 1, 0.1)
    with pytest.raises(ValueError):
        ThreatModel('l2', 0.5, 0, 0.1)
    with pytest.raises(ValueError):
        ThreatModel('l1', 0.5, 10, 0.0)
