import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from advcl_toolkit.analysis import (adversarial_ce, dump_frequency_views, filter_normalized_direction, fim,
                                    loss_landscape, save_fim, save_landscape)
from advcl_toolkit.data_pipeline import LabeledBatch
from advcl_toolkit.exceptions import ValidationError
from advcl_toolkit.models import PerturbBudget
from advcl_toolkit.utils import parameter_hash

BUDGET = PerturbBudget(epsilon=8 / 255, steps=2, step_size=4 / 255, init="zero")


class Quadratic(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor([[1.0, -2.0], [0.5, 3.0]], dtype=torch.float64))


def image(seed=0):
    return torch.rand(1, 16, 16, generator=torch.Generator().manual_seed(seed))


def classified_batch(model, n=6):
    model.attach_classifier(2)
    images = torch.rand(n, 1, 16, 16, generator=torch.Generator().manual_seed(5))
    return LabeledBatch(images, torch.arange(n) % 2)


def test_fim_without_steps_returns_seed(tiny_model):
    x0 = image()
    result = fim(tiny_model, x0, unit_index=0, steps=0)
    assert torch.equal(result.image, x0)
    assert len(result.trajectory) == 1
    assert result.accepted_steps == 0


@pytest.mark.parametrize("sign", ["min", "max"])
def test_fim_trajectory_is_monotone(tiny_model, sign):
    result = fim(tiny_model, image(1), unit_index=3, steps=15, lr=0.5, sign=sign)
    t = result.trajectory
    if sign == "min":
        assert all(b <= a for a, b in zip(t, t[1:]))
    else:
        assert all(b >= a for a, b in zip(t, t[1:]))
    assert result.image.min() >= 0 and result.image.max() <= 1
    assert len(t) == result.accepted_steps + 1
    assert tiny_model.training


def test_fim_rejects_bad_arguments(tiny_model):
    with pytest.raises(ValidationError):
        fim(tiny_model, image(), unit_index=8)
    with pytest.raises(ValidationError):
        fim(tiny_model, torch.rand(2, 1, 16, 16), unit_index=0)
    with pytest.raises(ValueError):
        fim(tiny_model, image(), unit_index=0, sign="sideways")


def test_save_fim(tmp_path, tiny_model):
    x0 = image()
    result = fim(tiny_model, x0, unit_index=1, steps=2)
    paths = save_fim(result, x0, tmp_path / "fim")
    assert paths["png"].is_file()
    assert np.load(paths["npy"]).shape == (1, 16, 16)


def test_filter_normalized_direction(tiny_model):
    direction = filter_normalized_direction(tiny_model, torch.Generator().manual_seed(0))
    for name, p in tiny_model.named_parameters():
        d = direction[name]
        assert d.shape == p.shape
        if p.dim() <= 1:
            assert torch.count_nonzero(d) == 0
        else:
            assert torch.allclose(d.reshape(p.shape[0], -1).norm(dim=1), p.detach().reshape(p.shape[0], -1).norm(dim=1),
                                  rtol=1e-4)


def test_landscape_centre_is_adversarial_loss(tiny_model):
    batch = classified_batch(tiny_model)
    expected = adversarial_ce(tiny_model.eval(), batch, BUDGET).item()
    tiny_model.train()
    grid = loss_landscape(tiny_model, batch, BUDGET, alphas=[-0.5, 0.0, 0.5], betas=[0.0, 0.5], seed=3)
    assert grid.losses.shape == (3, 2)
    assert grid.loss_at(0.0, 0.0) == pytest.approx(expected, abs=1e-6)
    assert np.isfinite(grid.losses).all()


def test_landscape_restores_weights(tiny_model):
    batch = classified_batch(tiny_model)
    before = parameter_hash(tiny_model)
    loss_landscape(tiny_model, batch, BUDGET, alphas=[-1.0, 1.0], betas=[-1.0, 1.0])
    assert parameter_hash(tiny_model) == before
    assert tiny_model.training


def test_landscape_of_quadratic_matches_closed_form():
    model = Quadratic()
    w0 = model.w.detach().clone()
    grid = loss_landscape(model, None, BUDGET, alphas=[-1.0, 0.0, 2.0], betas=[-0.5, 1.0], seed=1,
                          loss_fn=lambda m, _: (m.w ** 2).sum())
    d1, d2 = grid.directions[0]["w"], grid.directions[1]["w"]
    for i, a in enumerate(grid.alphas):
        for j, b in enumerate(grid.betas):
            assert grid.losses[i, j] == pytest.approx(((w0 + a * d1 + b * d2) ** 2).sum().item(), rel=1e-10)
    assert torch.equal(model.w.detach(), w0)


def test_landscape_records_nan_cells():
    values = iter([1.0, float("nan")])
    grid = loss_landscape(Quadratic(), None, BUDGET, alphas=[0.0, 1.0], betas=[0.0],
                          loss_fn=lambda m, _: torch.tensor(next(values)))
    assert grid.losses[0, 0] == 1.0
    assert np.isnan(grid.losses[1, 0])


def test_landscape_needs_a_grid():
    with pytest.raises(ValidationError):
        loss_landscape(Quadratic(), None, BUDGET, alphas=[], loss_fn=lambda m, _: torch.zeros(()))


def test_save_landscape(tmp_path):
    grid = loss_landscape(Quadratic(), None, BUDGET, alphas=[-1.0, 0.0, 1.0], betas=[-1.0, 1.0],
                          loss_fn=lambda m, _: (m.w ** 2).sum())
    paths = save_landscape(grid, tmp_path / "landscape")
    assert all(p.is_file() for p in paths.values())
    assert np.allclose(np.load(paths["npy"]), grid.losses)


def test_dump_frequency_views(tmp_path):
    x = torch.rand(2, 1, 16, 16, generator=torch.Generator().manual_seed(0))
    paths = dump_frequency_views(x, 4.0, tmp_path / "freq")
    assert {"x", "x_high", "x_low", "panel_0", "panel_1"} <= set(paths)
    high, low = np.load(paths["x_high"]), np.load(paths["x_low"])
    assert np.allclose(high + low, x.numpy(), atol=1e-5)
    assert paths["panel_1"].is_file()


def test_adversarial_ce_with_zero_budget_is_clean_ce(tiny_model):
    batch = classified_batch(tiny_model)
    tiny_model.eval()
    zero = PerturbBudget(epsilon=0, steps=1, step_size=0.01)
    with torch.no_grad():
        clean = F.cross_entropy(tiny_model.forward_classifier(batch.images), batch.labels)
    assert adversarial_ce(tiny_model, batch, zero).item() == pytest.approx(clean.item(), abs=1e-6)
