"""Qualitative diagnostics: feature inversion maps, adversarial loss landscapes, frequency dumps."""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attacks import eval_attack, perturb
from .data_pipeline import LabeledBatch
from .exceptions import ValidationError
from .frequency_views import fft_decompose
from .models import BNRoute, FimSign, PerturbBudget
from .utils import derive_seed, ensure_dir, eval_mode, make_generator, status, warn, write_json

_MAX_BACKTRACKS = 20


# === Feature inversion maps ===

@dataclass
class FimResult:
    image: torch.Tensor
    trajectory: List[float]
    unit_index: int
    sign: FimSign
    accepted_steps: int = 0


def fim(model, x0: torch.Tensor, unit_index: int, steps: int = 100, lr: float = 0.1,
        sign: Union[FimSign, str] = FimSign.MIN, route: Union[BNRoute, str] = BNRoute.NORMAL) -> FimResult:
    """
    Drives feature coordinate ``unit_index`` of f(x0 + D) down ('min') or up ('max') by gradient
    descent on D with x0 + D kept in [0, 1].

    A step is accepted only if it does not worsen the objective; otherwise the step size is halved
    (up to 20 times) and the search stops when no step is accepted.

    Returns:
        FimResult: final image [C, H, W] and the coordinate value after every accepted step.
    """
    sign = FimSign(sign)
    if x0.dim() == 3:
        x0 = x0.unsqueeze(0)
    if x0.dim() != 4 or x0.shape[0] != 1:
        raise ValidationError(f"x0 must be a single image [C, H, W], got shape {tuple(x0.shape)}.")
    feature_dim = model.config.feature_dim
    if not 0 <= unit_index < feature_dim:
        raise ValidationError(f"unit_index {unit_index} out of range for feature_dim {feature_dim}.")
    direction = 1.0 if sign == FimSign.MIN else -1.0

    with eval_mode(model):
        def coordinate(x: torch.Tensor) -> torch.Tensor:
            return model.forward_features(x, route)[0, unit_index]

        x = x0.detach().clone()
        with torch.no_grad():
            value = coordinate(x).item()
        trajectory = [value]
        accepted = 0
        for _ in range(steps):
            x.requires_grad_(True)
            with torch.enable_grad():
                grad, = torch.autograd.grad(direction * coordinate(x), x)
            x = x.detach()
            step = lr
            moved = False
            for _ in range(_MAX_BACKTRACKS):
                candidate = (x - step * grad).clamp(0.0, 1.0)
                with torch.no_grad():
                    candidate_value = coordinate(candidate).item()
                if direction * candidate_value <= direction * value:
                    x, value, moved = candidate, candidate_value, True
                    break
                step /= 2
            if not moved:
                break
            trajectory.append(value)
            accepted += 1
    return FimResult(x[0].detach(), trajectory, unit_index, sign, accepted)


def save_fim(result: FimResult, x0: torch.Tensor, output_dir: Union[str, Path]) -> Dict[str, Path]:
    output_dir = ensure_dir(output_dir)
    stem = f"fim_unit{result.unit_index}_{result.sign.value}"
    paths = {"npy": output_dir / f"{stem}.npy", "png": output_dir / f"{stem}.png"}
    np.save(paths["npy"], result.image.cpu().numpy())
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    axes[0].imshow(_as_display(x0.reshape(result.image.shape)))
    axes[0].set_title("x0")
    axes[1].imshow(_as_display(result.image))
    axes[1].set_title(f"FIM unit {result.unit_index} ({result.sign.value})")
    axes[2].plot(result.trajectory)
    axes[2].set_title("coordinate")
    for ax in axes[:2]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(paths["png"])
    plt.close(fig)
    return paths


# === Loss landscape ===

@dataclass
class LandscapeGrid:
    alphas: List[float]
    betas: List[float]
    losses: np.ndarray
    seed: int
    directions: List[Dict[str, torch.Tensor]] = field(default_factory=list, repr=False)

    def loss_at(self, alpha: float, beta: float) -> float:
        return float(self.losses[self.alphas.index(alpha), self.betas.index(beta)])


def filter_normalized_direction(model: nn.Module, generator: torch.Generator) -> Dict[str, torch.Tensor]:
    """
    Gaussian direction rescaled so each filter (slice along dim 0) has the norm of the matching
    weight filter. One-dimensional parameters (biases, BN affine) get a zero direction.
    """
    direction = {}
    for name, p in model.named_parameters():
        d = torch.randn(p.shape, generator=generator, dtype=torch.float64).to(device=p.device, dtype=p.dtype)
        if p.dim() <= 1:
            direction[name] = torch.zeros_like(p)
            continue
        d_flat = d.reshape(p.shape[0], -1)
        p_flat = p.detach().reshape(p.shape[0], -1)
        scale = p_flat.norm(dim=1, keepdim=True) / (d_flat.norm(dim=1, keepdim=True) + 1e-10)
        direction[name] = (d_flat * scale).reshape(p.shape)
    return direction


def adversarial_ce(model, batch: LabeledBatch, budget: PerturbBudget, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean CE on x + delta, delta from a fresh eval_attack against the current weights."""
    delta = eval_attack(model, batch, budget, generator, BNRoute.NORMAL, bn_mode="eval")
    with torch.no_grad():
        return F.cross_entropy(model.forward_classifier(perturb(batch.images, delta)), batch.labels)


def loss_landscape(model: nn.Module, batch: Optional[LabeledBatch], budget: PerturbBudget,
                   alphas: Sequence[float] = (-1.0, -0.5, 0.0, 0.5, 1.0),
                   betas: Sequence[float] = (-1.0, -0.5, 0.0, 0.5, 1.0), seed: int = 0,
                   loss_fn: Optional[Callable[[nn.Module, Optional[LabeledBatch]], torch.Tensor]] = None) -> LandscapeGrid:
    """
    Loss on the plane theta + alpha * d1 + beta * d2 spanned by two filter-normalized directions.

    Each cell re-runs the attack against the perturbed weights (``loss_fn`` replaces the
    adversarial CE when given). Weights are restored from saved copies after every cell, so the
    model is bit-identical afterwards. Non-finite cells are stored as NaN with a warning.
    """
    alphas, betas = [float(a) for a in alphas], [float(b) for b in betas]
    if not alphas or not betas:
        raise ValidationError("alphas and betas must be non-empty.")
    loss_fn = loss_fn or (lambda m, b: adversarial_ce(m, b, budget, make_generator(derive_seed(seed, "attack"))))
    direction_rng = make_generator(derive_seed(seed, "directions"))
    d1 = filter_normalized_direction(model, direction_rng)
    d2 = filter_normalized_direction(model, direction_rng)
    params = dict(model.named_parameters())
    original = {name: p.detach().clone() for name, p in params.items()}
    losses = np.full((len(alphas), len(betas)), np.nan)

    with eval_mode(model):
        try:
            for i, a in enumerate(alphas):
                for j, b in enumerate(betas):
                    with torch.no_grad():
                        for name, p in params.items():
                            p.copy_(original[name] + a * d1[name] + b * d2[name])
                    value = float(loss_fn(model, batch))
                    if np.isfinite(value):
                        losses[i, j] = value
                    else:
                        warn(f"Non-finite landscape loss at alpha={a}, beta={b}; recorded as NaN.")
        finally:
            with torch.no_grad():
                for name, p in params.items():
                    p.copy_(original[name])
    status(f"Loss landscape: {len(alphas)}x{len(betas)} grid, {int(np.isnan(losses).sum())} NaN cell(s).")
    return LandscapeGrid(alphas, betas, losses, seed, [d1, d2])


def save_landscape(grid: LandscapeGrid, output_dir: Union[str, Path]) -> Dict[str, Path]:
    output_dir = ensure_dir(output_dir)
    paths = {"npy": output_dir / "landscape.npy", "png": output_dir / "landscape.png",
             "grid": output_dir / "landscape.json"}
    np.save(paths["npy"], grid.losses)
    write_json(paths["grid"], {"alphas": grid.alphas, "betas": grid.betas, "seed": grid.seed,
                               "losses": [[None if np.isnan(v) else float(v) for v in row] for row in grid.losses]})
    fig, ax = plt.subplots(figsize=(5, 4))
    if len(grid.alphas) > 1 and len(grid.betas) > 1:
        bb, aa = np.meshgrid(grid.betas, grid.alphas)
        contour = ax.contourf(aa, bb, grid.losses, levels=20)
        fig.colorbar(contour, ax=ax)
        ax.set_xlabel("alpha")
        ax.set_ylabel("beta")
    else:
        ax.plot(grid.losses.ravel(), marker="o")
        ax.set_ylabel("adversarial loss")
    fig.tight_layout()
    fig.savefig(paths["png"])
    plt.close(fig)
    return paths


# === Frequency dumps ===

def _as_display(image: torch.Tensor) -> np.ndarray:
    """[C, H, W] to an HxW or HxWx3 array rescaled to [0, 1] for viewing."""
    arr = image.detach().cpu().double().numpy()
    lo, hi = arr.min(), arr.max()
    arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


def dump_frequency_views(x: torch.Tensor, radius: float, output_dir: Union[str, Path]) -> Dict[str, Path]:
    """Writes x, x_high and x_low of every image as NPY arrays plus one PNG panel per image."""
    output_dir = ensure_dir(output_dir)
    views = fft_decompose(x, radius)
    paths = {}
    for name, tensor in (("x", x), ("x_high", views.high), ("x_low", views.low)):
        paths[name] = output_dir / f"{name}.npy"
        np.save(paths[name], tensor.cpu().numpy())
    for i in range(x.shape[0]):
        fig, axes = plt.subplots(1, 3, figsize=(9, 3))
        for ax, (title, tensor) in zip(axes, (("x", x), ("x_high", views.high), ("x_low", views.low))):
            ax.imshow(_as_display(tensor[i]), cmap="gray" if x.shape[1] == 1 else None)
            ax.set_title(title)
            ax.axis("off")
        fig.tight_layout()
        paths[f"panel_{i}"] = output_dir / f"freq_{i:03d}.png"
        fig.savefig(paths[f"panel_{i}"])
        plt.close(fig)
    return paths
