"""Radial FFT split of images into high- and low-frequency views."""
import math
from dataclasses import dataclass
from typing import NamedTuple

import torch

from .exceptions import ValidationError


@dataclass(frozen=True)
class FrequencyMask:
    radius: float = 8.0
    height: int = 32
    width: int = 32
    keep: str = "high"

    def __post_init__(self):
        if self.radius < 0:
            raise ValidationError(f"radius must be >= 0, got {self.radius}.")
        if self.keep not in ("high", "low"):
            raise ValidationError(f"keep must be 'high' or 'low', got '{self.keep}'.")

    @property
    def center(self):
        return self.height // 2, self.width // 2

    def distances(self, device=None) -> torch.Tensor:
        """Euclidean distance of every centred bin index to the zero-frequency bin."""
        c1, c2 = self.center
        rows = torch.arange(self.height, device=device, dtype=torch.float64) - c1
        cols = torch.arange(self.width, device=device, dtype=torch.float64) - c2
        return torch.sqrt(rows[:, None] ** 2 + cols[None, :] ** 2)

    def build(self, device=None) -> torch.Tensor:
        """Binary mask over the shifted spectrum; the d == radius ring belongs to the high band."""
        d = self.distances(device)
        return d >= self.radius if self.keep == "high" else d < self.radius

    def covers_grid(self) -> bool:
        c1, c2 = self.center
        return self.radius >= math.sqrt(c1 ** 2 + c2 ** 2) + 1


class FrequencyViews(NamedTuple):
    high: torch.Tensor
    low: torch.Tensor


def fft_decompose(x: torch.Tensor, radius: float = 8.0, clamp: bool = False) -> FrequencyViews:
    """
    Splits every channel of ``x`` into its high- and low-frequency components.

    Bins at distance ``d < radius`` from the centred zero frequency are low, the rest high,
    so ``high + low`` reconstructs ``x``. Components are real parts of the inverse transforms
    and are not clamped unless ``clamp`` is set.

    Args:
        x (torch.Tensor): real tensor [..., H, W].
        radius (float): threshold r.
        clamp (bool): clamp both components into [0, 1].

    Returns:
        FrequencyViews: (high, low), each shaped like ``x``.
    """
    if not isinstance(x, torch.Tensor) or x.dim() < 2:
        raise ValidationError("x must be a tensor with at least 2 dimensions [..., H, W].")
    if torch.is_complex(x):
        raise ValidationError("x must be real-valued.")
    if not torch.isfinite(x).all():
        raise ValidationError("x contains NaN or Inf values.")
    height, width = x.shape[-2:]
    low_mask = FrequencyMask(radius, height, width, keep="low").build(device=x.device)

    spectrum = torch.fft.fftshift(torch.fft.fft2(x), dim=(-2, -1))
    low_spectrum = spectrum * low_mask.to(spectrum.real.dtype)
    high_spectrum = spectrum - low_spectrum
    low = torch.fft.ifft2(torch.fft.ifftshift(low_spectrum, dim=(-2, -1))).real
    high = torch.fft.ifft2(torch.fft.ifftshift(high_spectrum, dim=(-2, -1))).real
    if clamp:
        high, low = high.clamp(0.0, 1.0), low.clamp(0.0, 1.0)
    return FrequencyViews(high=high, low=low)
