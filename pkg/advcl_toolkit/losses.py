"""Contrastive and classification losses."""
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .exceptions import ValidationError

NORM_EPS = 1e-12
DEFAULT_TEMPERATURE = 0.5
DEFAULT_TRADES_BETA = 6.0


def _check_temperature(t: float) -> float:
    if not t > 0:
        raise ValidationError(f"temperature must be > 0, got {t}.")
    return float(t)


@dataclass
class ProjectedFeatures:
    """Projected embeddings of ``b`` samples under ``m`` views, one row each."""
    z: torch.Tensor
    view_index: torch.Tensor
    sample_index: torch.Tensor

    def __post_init__(self):
        if self.z.dim() != 2:
            raise ValidationError(f"z must be [N, d], got shape {tuple(self.z.shape)}.")
        n = self.z.shape[0]
        if self.view_index.shape != (n,) or self.sample_index.shape != (n,):
            raise ValidationError("view_index and sample_index must be vectors of length N.")
        pairs = set(zip(self.sample_index.tolist(), self.view_index.tolist()))
        if len(pairs) != n or n != self.num_samples * self.num_views:
            raise ValidationError("every (sample, view) pair must appear exactly once (N == b * m).")

    @property
    def num_views(self) -> int:
        return int(self.view_index.max().item()) + 1 if self.view_index.numel() else 0

    @property
    def num_samples(self) -> int:
        return int(self.sample_index.max().item()) + 1 if self.sample_index.numel() else 0

    @classmethod
    def from_views(cls, views: Sequence[torch.Tensor]) -> "ProjectedFeatures":
        """Stacks per-view [b, d] embeddings view-major."""
        if len(views) == 0:
            raise ValidationError("need at least one view.")
        b = views[0].shape[0]
        if any(v.dim() != 2 or v.shape != views[0].shape for v in views):
            raise ValidationError("all views must share the same [b, d] shape.")
        m = len(views)
        device = views[0].device
        return cls(
            z=torch.cat(list(views), dim=0),
            view_index=torch.arange(m, device=device).repeat_interleave(b),
            sample_index=torch.arange(b, device=device).repeat(m),
        )


def ntxent_multi_view(zs: ProjectedFeatures, t: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """
    Multi-view NT-Xent: for every anchor, the other views of its sample are positives and all
    ``bm - 1`` other rows form the denominator. Summed over anchors and positives, divided by b.
    """
    t = _check_temperature(t)
    m, b = zs.num_views, zs.num_samples
    if m < 2:
        raise ValidationError(f"need at least 2 views, got {m}.")
    z = F.normalize(zs.z, dim=1, eps=NORM_EPS)
    logits = z @ z.t() / t
    self_mask = torch.eye(z.shape[0], dtype=torch.bool, device=z.device)
    log_denominator = torch.logsumexp(logits.masked_fill(self_mask, float("-inf")), dim=1, keepdim=True)
    positives = (zs.sample_index[:, None] == zs.sample_index[None, :]) & ~self_mask
    log_ratio = logits - log_denominator
    return -(log_ratio * positives).sum() / b


def ntxent_two_view(z1: torch.Tensor, z2: torch.Tensor, t: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Two-view NT-Xent over 2b embeddings, per-sample mean."""
    if z1.dim() != 2 or z1.shape != z2.shape:
        raise ValidationError(f"z1 and z2 must share a [b, d] shape, got {tuple(z1.shape)} and {tuple(z2.shape)}.")
    if z1.shape[0] < 1 or z1.shape[1] < 1:
        raise ValidationError("need b >= 1 and d >= 1.")
    return ntxent_multi_view(ProjectedFeatures.from_views([z1, z2]), t)


def _check_labels(logits: torch.Tensor, labels: torch.Tensor) -> None:
    if logits.dim() != 2:
        raise ValidationError(f"logits must be [B, K], got shape {tuple(logits.shape)}.")
    if labels.dim() != 1 or labels.shape[0] != logits.shape[0]:
        raise ValidationError("labels must be a vector aligned with the logits rows.")
    k = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValidationError(f"labels must lie in [0, {k}).")


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    _check_labels(logits, labels)
    return F.cross_entropy(logits, labels.long(), reduction=reduction)


def trades_kl(logits_clean: torch.Tensor, logits_adv: torch.Tensor, reduction: str = "batchmean") -> torch.Tensor:
    """KL(softmax(clean) || softmax(adv))."""
    return F.kl_div(F.log_softmax(logits_adv, dim=1), F.log_softmax(logits_clean, dim=1),
                    reduction=reduction, log_target=True)


def trades_loss(logits_clean: torch.Tensor, logits_adv: torch.Tensor, labels: torch.Tensor,
                beta: float = DEFAULT_TRADES_BETA) -> torch.Tensor:
    if beta < 0:
        raise ValidationError(f"beta must be >= 0, got {beta}.")
    if logits_adv.shape != logits_clean.shape:
        raise ValidationError("clean and adversarial logits must share a shape.")
    loss = cross_entropy(logits_clean, labels)
    if beta == 0:
        return loss
    return loss + beta * trades_kl(logits_clean, logits_adv)
