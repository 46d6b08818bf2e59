"""l-inf PGD engines for contrastive views, pseudo-label CE, supervised and evaluation attacks."""
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from .data_pipeline import LabeledBatch
from .exceptions import AttackError, ValidationError
from .losses import DEFAULT_TEMPERATURE, ProjectedFeatures, ntxent_multi_view, trades_kl
from .models import AttackInit, BNRoute, PerturbBudget
from .utils import eval_mode

LossFn = Callable[[torch.Tensor], torch.Tensor]


@contextmanager
def attack_bn_mode(model, mode: str = "eval"):
    """BN statistics used while the inner maximization runs: frozen running stats ('eval') or batch stats ('train')."""
    if mode not in ("eval", "train"):
        raise ValidationError(f"attack_bn_mode must be 'eval' or 'train', got '{mode}'.")
    with eval_mode(model, enabled=(mode == "eval")):
        yield model


def perturb(x: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """x + delta clamped into the pixel range, as fed to the model."""
    return (x + delta).clamp(0.0, 1.0)


def _initial_delta(x: torch.Tensor, budget: PerturbBudget, generator: Optional[torch.Generator]) -> torch.Tensor:
    if budget.init == AttackInit.ZERO:
        return torch.zeros_like(x)
    noise = torch.rand(x.shape, generator=generator, dtype=torch.float64)
    delta = ((2 * noise - 1) * budget.epsilon).to(device=x.device, dtype=x.dtype)
    return _project(delta, x, budget.epsilon)


def _project(delta: torch.Tensor, x: torch.Tensor, epsilon: float) -> torch.Tensor:
    delta = delta.clamp(-epsilon, epsilon)
    return torch.minimum(torch.maximum(delta, -x), 1.0 - x)


def pgd(loss_fn: LossFn, x: torch.Tensor, budget: PerturbBudget,
        generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Sign-gradient ascent on ``loss_fn(delta)`` projected onto the l-inf ball and the pixel range.

    Args:
        loss_fn (Callable): differentiable scalar function of the perturbation.
        x (torch.Tensor): clean inputs in [0, 1]; delta has the same shape.
        budget (PerturbBudget): radius, steps, step size and init.
        generator (Optional[torch.Generator]): randomness for uniform init.

    Returns:
        torch.Tensor: detached delta with |delta| <= epsilon and 0 <= x + delta <= 1.

    Raises:
        AttackError: the gradient w.r.t. delta is not finite.
    """
    x = x.detach()
    if budget.epsilon == 0:
        return torch.zeros_like(x)
    delta = _initial_delta(x, budget, generator)
    for step in range(budget.steps):
        delta.requires_grad_(True)
        with torch.enable_grad():
            loss = loss_fn(delta)
            grad, = torch.autograd.grad(loss, delta, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(delta)
        if not torch.isfinite(grad).all():
            bad = (~torch.isfinite(grad)).sum().item()
            raise AttackError(
                f"Non-finite gradient at PGD step {step + 1}/{budget.steps}: {bad} of {grad.numel()} entries, "
                f"loss={loss.item():.6g}, epsilon={budget.epsilon:.6g}, step_size={budget.step_size:.6g}."
            )
        delta = _project(delta.detach() + budget.step_size * grad.sign(), x, budget.epsilon)
    return delta.detach()


def contrastive_view_loss(model, views: Sequence[torch.Tensor], routes: Sequence[Union[BNRoute, str]],
                          temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Multi-view NT-Xent over g(f(view, route)) for each (view, route) pair."""
    if len(views) != len(routes):
        raise ValidationError("need one BN route per view.")
    z = [model.forward_projection(v, r) for v, r in zip(views, routes)]
    return ntxent_multi_view(ProjectedFeatures.from_views(z), temperature)


def adv_view_3view(model, x: torch.Tensor, t1x: torch.Tensor, t2x: torch.Tensor, budget: PerturbBudget,
                   temperature: float = DEFAULT_TEMPERATURE, generator: Optional[torch.Generator] = None,
                   bn_mode: str = "eval") -> torch.Tensor:
    """Perturbs the identity view x to maximize the 3-view loss over (t1x, t2x, x + delta)."""
    with attack_bn_mode(model, bn_mode):
        with torch.no_grad():
            z1 = model.forward_projection(t1x, BNRoute.NORMAL)
            z2 = model.forward_projection(t2x, BNRoute.NORMAL)

        def loss_fn(delta):
            z3 = model.forward_projection(perturb(x, delta), BNRoute.ADV_CL)
            return ntxent_multi_view(ProjectedFeatures.from_views([z1, z2, z3]), temperature)

        return pgd(loss_fn, x, budget, generator)


def adv_view_single(model, t1x: torch.Tensor, t2x: torch.Tensor, budget: PerturbBudget,
                    temperature: float = DEFAULT_TEMPERATURE, generator: Optional[torch.Generator] = None,
                    bn_mode: str = "eval") -> torch.Tensor:
    """One-sided attack: perturbs t1x against the clean view t2x."""
    with attack_bn_mode(model, bn_mode):
        with torch.no_grad():
            z2 = model.forward_projection(t2x, BNRoute.NORMAL)

        def loss_fn(delta):
            z1 = model.forward_projection(perturb(t1x, delta), BNRoute.ADV_CL)
            return ntxent_multi_view(ProjectedFeatures.from_views([z1, z2]), temperature)

        return pgd(loss_fn, t1x, budget, generator)


def adv_view_paired(model, t1x: torch.Tensor, t2x: torch.Tensor, budget: PerturbBudget,
                    temperature: float = DEFAULT_TEMPERATURE, generator: Optional[torch.Generator] = None,
                    bn_mode: str = "eval") -> Tuple[torch.Tensor, torch.Tensor]:
    """Joint argmax over (delta1, delta2) of the 2-view loss on (t1x + delta1, t2x + delta2)."""
    if t1x.shape != t2x.shape:
        raise ValidationError("paired views must share a shape.")
    b = t1x.shape[0]
    stacked = torch.cat([t1x, t2x], dim=0)
    with attack_bn_mode(model, bn_mode):
        def loss_fn(delta):
            adv = perturb(stacked, delta)
            z1 = model.forward_projection(adv[:b], BNRoute.ADV_CL)
            z2 = model.forward_projection(adv[b:], BNRoute.ADV_CL)
            return ntxent_multi_view(ProjectedFeatures.from_views([z1, z2]), temperature)

        delta = pgd(loss_fn, stacked, budget, generator)
    return delta[:b], delta[b:]


def pseudo_ce_loss(model, x: torch.Tensor, pseudo_labels: Sequence[torch.Tensor], head_indices: Sequence[int],
                   route: Union[BNRoute, str] = BNRoute.ADV_CE, reduction: str = "mean") -> torch.Tensor:
    """Unweighted mean over heads of the CE between pseudo-head logits and pseudo labels."""
    if len(pseudo_labels) != len(head_indices) or not head_indices:
        raise ValidationError("need one pseudo-label vector per head index (at least one head).")
    features = model.forward_features(x, route)
    losses = []
    for labels, h in zip(pseudo_labels, head_indices):
        if not 0 <= h < len(model.pseudo_heads):
            raise ValidationError(f"head_index {h} out of range for {len(model.pseudo_heads)} pseudo heads.")
        logits = model.pseudo_heads[h](features)
        if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise ValidationError(f"pseudo labels for head {h} must lie in [0, {logits.shape[1]}).")
        losses.append(F.cross_entropy(logits, labels.long(), reduction=reduction))
    return torch.stack(losses).mean()


def adv_ce(model, x: torch.Tensor, pseudo_labels: Sequence[torch.Tensor], budget: PerturbBudget,
           head_indices: Sequence[int], generator: Optional[torch.Generator] = None,
           bn_mode: str = "eval") -> torch.Tensor:
    """Perturbation maximizing the ensemble-averaged pseudo-label CE under route adv_ce."""
    with attack_bn_mode(model, bn_mode):
        return pgd(lambda d: pseudo_ce_loss(model, perturb(x, d), pseudo_labels, head_indices, BNRoute.ADV_CE, "sum"),
                   x, budget, generator)


def eval_attack(model, batch: LabeledBatch, budget: PerturbBudget, generator: Optional[torch.Generator] = None,
                route: Union[BNRoute, str] = BNRoute.NORMAL, bn_mode: str = "eval") -> torch.Tensor:
    """Perturbation maximizing the true-label CE through the downstream classifier."""
    x, y = batch.images, batch.labels
    with attack_bn_mode(model, bn_mode):
        return pgd(lambda d: F.cross_entropy(model.forward_classifier(perturb(x, d), route), y, reduction="sum"),
                   x, budget, generator)


def trades_attack(model, x: torch.Tensor, budget: PerturbBudget, generator: Optional[torch.Generator] = None,
                  route: Union[BNRoute, str] = BNRoute.NORMAL, bn_mode: str = "eval") -> torch.Tensor:
    """Perturbation maximizing KL(clean || adversarial) of the classifier outputs."""
    with attack_bn_mode(model, bn_mode):
        with torch.no_grad():
            clean_logits = model.forward_classifier(x, route)
        return pgd(lambda d: trades_kl(clean_logits, model.forward_classifier(perturb(x, d), route), reduction="sum"),
                   x, budget, generator)
