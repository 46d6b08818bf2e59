"""Dataset ingestion, batching and the stochastic augmentation set.

Images travel as float tensors ``[B, C, H, W]`` with values in ``[0, 1]``.
Splits are held in memory (the datasets in scope are small) and batched
with a per-epoch seeded permutation so that a fixed seed gives a fixed
iteration order.
"""
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
import torch
import torchvision
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from .exceptions import ArtifactIOError, ConfigurationError, ValidationError
from .models import AugmentConfig, DatasetConfig
from .utils import array_fingerprint, derive_seed, make_generator, status

KNOWN_DATASETS = ("synthetic", "cifar10", "cifar100", "stl10")
SPLITS = ("train", "test")

ImageBatch = torch.Tensor


def validate_image_batch(x: torch.Tensor, name: str = "x", check_range: bool = True) -> torch.Tensor:
    """Checks the ImageBatch contract and returns ``x`` unchanged."""
    if not isinstance(x, torch.Tensor):
        raise ValidationError(f"{name} must be a torch.Tensor, got {type(x).__name__}.")
    if x.dim() != 4:
        raise ValidationError(f"{name} must have rank 4 [B, C, H, W], got shape {tuple(x.shape)}.")
    b, c, h, w = x.shape
    if b < 1:
        raise ValidationError(f"{name} must hold at least one image.")
    if c not in (1, 3):
        raise ValidationError(f"{name} must have 1 or 3 channels, got {c}.")
    if h != w:
        raise ValidationError(f"{name} must be square, got {h}x{w}.")
    if not torch.isfinite(x).all():
        raise ValidationError(f"{name} contains NaN or Inf values.")
    if check_range and (x.min() < 0 or x.max() > 1):
        raise ValidationError(f"{name} values must lie in [0, 1] (got min {x.min().item():.4g}, max {x.max().item():.4g}).")
    return x


@dataclass
class LabeledBatch:
    images: torch.Tensor
    labels: torch.Tensor
    indices: Optional[torch.Tensor] = None

    def __post_init__(self):
        validate_image_batch(self.images, name="images")
        if self.labels.dim() != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise ValidationError(
                f"labels must be a vector of length {self.images.shape[0]}, got shape {tuple(self.labels.shape)}."
            )
        if self.indices is not None and self.indices.shape != self.labels.shape:
            raise ValidationError("indices must align with labels.")

    def to(self, device) -> "LabeledBatch":
        return LabeledBatch(
            self.images.to(device),
            self.labels.to(device),
            None if self.indices is None else self.indices.to(device),
        )

    def __len__(self) -> int:
        return self.labels.shape[0]


class ImageDataset:
    """One in-memory split of a dataset."""

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, num_classes: int, name: str, split: str):
        validate_image_batch(images, name=f"{name}/{split} images")
        labels = labels.long()
        if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValidationError(f"{name}/{split}: labels outside [0, {num_classes}).")
        self.images = images
        self.labels = labels
        self.num_classes = num_classes
        self.name = name
        self.split = split

    def __len__(self) -> int:
        return self.images.shape[0]

    def __iter__(self) -> Iterator[LabeledBatch]:
        return self.batches(batch_size=256)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def fingerprint(self) -> str:
        return array_fingerprint(self.images)[:16] + array_fingerprint(self.labels)[:16]

    def batches(self, batch_size: int, shuffle: bool = False, seed: int = 0, epoch: int = 0,
                drop_last: bool = False) -> Iterator[LabeledBatch]:
        """Yields LabeledBatch objects; with ``shuffle`` the order is a function of (seed, epoch) only."""
        if batch_size < 1:
            raise ValidationError("batch_size must be >= 1.")
        n = len(self)
        if shuffle:
            order = torch.randperm(n, generator=make_generator(derive_seed(seed, epoch, "order")))
        else:
            order = torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if drop_last and idx.numel() < batch_size:
                break
            yield LabeledBatch(self.images[idx], self.labels[idx], idx)

    def subset(self, indices: Union[List[int], torch.Tensor]) -> "ImageDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ImageDataset(self.images[idx], self.labels[idx], self.num_classes, self.name, self.split)


# === Loading ===

def _render_blobs(points: np.ndarray, image_size: int, sigma: float = 0.15) -> np.ndarray:
    """Renders 2-D points as smooth Gaussian intensity maps of shape [n, S, S]."""
    grid = np.linspace(0.0, 1.0, image_size)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    dy = yy[None] - points[:, 1, None, None]
    dx = xx[None] - points[:, 0, None, None]
    return np.exp(-(dx ** 2 + dy ** 2) / (2 * sigma ** 2))


def make_synthetic(n: int, classes: int = 2, image_size: int = 16, seed: int = 0, channels: int = 1,
                   spread: float = 0.05) -> Tuple[torch.Tensor, torch.Tensor]:
    """Gaussian class blobs in the unit square rendered as intensity maps."""
    rng = np.random.default_rng(seed)
    angles = 2 * math.pi * np.arange(classes) / max(classes, 1)
    centers = 0.5 + 0.25 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    points = np.clip(centers[labels] + spread * rng.standard_normal((n, 2)), 0.0, 1.0)
    maps = _render_blobs(points, image_size)
    images = torch.from_numpy(maps).float().unsqueeze(1).clamp(0.0, 1.0)
    if channels == 3:
        images = images.repeat(1, 3, 1, 1)
    return images, torch.from_numpy(labels).long()


def _torchvision_split(name: str, split: str, root: Path, download: bool) -> Tuple[torch.Tensor, torch.Tensor, int]:
    try:
        if name in ("cifar10", "cifar100"):
            cls = torchvision.datasets.CIFAR10 if name == "cifar10" else torchvision.datasets.CIFAR100
            ds = cls(root=str(root), train=(split == "train"), download=download)
            images = torch.from_numpy(np.asarray(ds.data)).permute(0, 3, 1, 2).float() / 255.0
            labels = torch.as_tensor(ds.targets, dtype=torch.long)
            return images, labels, len(ds.classes)
        ds = torchvision.datasets.STL10(root=str(root), split=split, download=download)
        images = torch.from_numpy(np.asarray(ds.data)).float() / 255.0
        labels = torch.as_tensor(np.asarray(ds.labels), dtype=torch.long)
        return images, labels, 10
    except RuntimeError as e:
        raise ArtifactIOError(f"Dataset '{name}' ({split}) not found or corrupted under '{root}': {e}") from e


def load_dataset(name: str, split: str = "train", root: Optional[Union[str, Path]] = None,
                 config: Optional[DatasetConfig] = None, **overrides) -> ImageDataset:
    """
    Loads one split of a dataset into memory.

    Args:
        name (str): "synthetic", "cifar10", "cifar100" or "stl10".
        split (str): "train" or "test".
        root (Optional[str]): Directory with the torchvision dataset files. Ignored for "synthetic".
        config (Optional[DatasetConfig]): Synthetic parameters, class subset and truncation.
        **overrides: Individual DatasetConfig keys (e.g. n=64, classes=2).

    Returns:
        ImageDataset: images in [0, 1] and labels in [0, num_classes).

    Raises:
        ConfigurationError: unknown dataset name or split.
        ArtifactIOError: dataset files missing under ``root``.
    """
    cfg = (config or DatasetConfig()).copy(update=dict(name=name, **overrides))
    if root is not None:
        cfg = cfg.copy(update={"root": str(root)})
    if name not in KNOWN_DATASETS:
        raise ConfigurationError(f"Unknown dataset '{name}'. Known datasets: {', '.join(KNOWN_DATASETS)}.")
    if split not in SPLITS:
        raise ConfigurationError(f"Unknown split '{split}'. Expected one of {SPLITS}.")

    if name == "synthetic":
        seed = cfg.seed if split == "train" else derive_seed(cfg.seed, "test") % (2 ** 32)
        images, labels = make_synthetic(cfg.n, cfg.classes, cfg.image_size, seed, cfg.channels, cfg.blob_spread)
        num_classes = cfg.classes
    else:
        root_path = Path(cfg.root)
        if not root_path.exists():
            raise ArtifactIOError(f"Dataset root '{root_path}' does not exist (needed for '{name}' {split}).")
        images, labels, num_classes = _torchvision_split(name, split, root_path, cfg.download)

    if cfg.classes_subset:
        subset = list(cfg.classes_subset)
        if any(c < 0 or c >= num_classes for c in subset):
            raise ConfigurationError(f"classes_subset {subset} outside [0, {num_classes}).")
        remap = torch.full((num_classes,), -1, dtype=torch.long)
        remap[torch.as_tensor(subset)] = torch.arange(len(subset))
        keep = remap[labels] >= 0
        images, labels = images[keep], remap[labels[keep]]
        num_classes = len(subset)
    if cfg.max_samples is not None:
        images, labels = images[:cfg.max_samples], labels[:cfg.max_samples]

    status(f"Loaded {name}/{split}: {images.shape[0]} images of shape {tuple(images.shape[1:])}, {num_classes} classes.")
    return ImageDataset(images.contiguous(), labels, num_classes, name, split)


def match_resolution(dataset: ImageDataset, channels: int, image_size: int, resize: bool = True) -> ImageDataset:
    """
    Returns ``dataset`` at the given resolution, bilinearly resized when allowed.

    Raises:
        ConfigurationError: channel counts differ, or resolutions differ and ``resize`` is off.
    """
    if dataset.channels != channels:
        raise ConfigurationError(
            f"{dataset.name} has {dataset.channels}-channel images but the encoder expects {channels} channels."
        )
    if dataset.image_size == image_size:
        return dataset
    if not resize:
        raise ConfigurationError(
            f"{dataset.name} images are {dataset.image_size}px but the encoder expects {image_size}px; "
            f"enable resize_inputs to resize them."
        )
    status(f"Resizing {dataset.name}/{dataset.split} from {dataset.image_size}px to {image_size}px.")
    images = torch.nn.functional.interpolate(dataset.images, size=(image_size, image_size), mode="bilinear",
                                             align_corners=False, antialias=True).clamp(0.0, 1.0)
    return ImageDataset(images, dataset.labels, dataset.num_classes, dataset.name, dataset.split)


# === Augmentation ===

_LOG_RATIO = (math.log(3 / 4), math.log(4 / 3))


def _uniform(rng: torch.Generator, low: float = 0.0, high: float = 1.0) -> float:
    return low + (high - low) * torch.rand(1, generator=rng).item()


def _randint(rng: torch.Generator, low: int, high: int) -> int:
    return int(torch.randint(low, high, (1,), generator=rng).item())


def _sample_crop(height: int, width: int, cfg: AugmentConfig, rng: torch.Generator) -> Tuple[int, int, int, int]:
    area = height * width
    for _ in range(10):
        target_area = area * _uniform(rng, cfg.crop_scale_min, cfg.crop_scale_max)
        aspect = math.exp(_uniform(rng, *_LOG_RATIO))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            return _randint(rng, 0, height - h + 1), _randint(rng, 0, width - w + 1), h, w
    # fallback: central crop at the clamped aspect ratio
    in_ratio = width / height
    if in_ratio < 3 / 4:
        w, h = width, int(round(width / (3 / 4)))
    elif in_ratio > 4 / 3:
        h, w = height, int(round(height * (4 / 3)))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def _color_jitter(img: torch.Tensor, strengths, rng: torch.Generator) -> torch.Tensor:
    b, c, s, hue = strengths
    factors = (
        _uniform(rng, max(0.0, 1 - b), 1 + b),
        _uniform(rng, max(0.0, 1 - c), 1 + c),
        _uniform(rng, max(0.0, 1 - s), 1 + s),
        _uniform(rng, -hue, hue),
    )
    for op in torch.randperm(4, generator=rng).tolist():
        if op == 0 and b > 0:
            img = TF.adjust_brightness(img, factors[0])
        elif op == 1 and c > 0:
            img = TF.adjust_contrast(img, factors[1])
        elif op == 2 and s > 0 and img.shape[0] == 3:
            img = TF.adjust_saturation(img, factors[2])
        elif op == 3 and hue > 0 and img.shape[0] == 3:
            img = TF.adjust_hue(img, factors[3])
    return img


def _augment_one(img: torch.Tensor, cfg: AugmentConfig, rng: torch.Generator) -> torch.Tensor:
    _, height, width = img.shape
    top, left, h, w = _sample_crop(height, width, cfg, rng)
    if (h, w) != (height, width):
        img = TF.resized_crop(img, top, left, h, w, [height, width],
                              interpolation=InterpolationMode.BILINEAR, antialias=True)
    if _uniform(rng) < cfg.hflip_prob:
        img = TF.hflip(img)
    if _uniform(rng) < cfg.jitter_prob:
        img = _color_jitter(img, cfg.jitter_strengths, rng)
    if _uniform(rng) < cfg.grayscale_prob and img.shape[0] == 3:
        # luminance replicated over all channels keeps the shape
        img = TF.rgb_to_grayscale(img, num_output_channels=3)
    return img.clamp(0.0, 1.0)


def augment(x: ImageBatch, cfg: Optional[AugmentConfig] = None,
            rng: Optional[Union[torch.Generator, int]] = None) -> ImageBatch:
    """
    Applies random resized crop, horizontal flip, color jitter and grayscale, drawn per sample.

    Args:
        x (ImageBatch): images in [0, 1].
        cfg (Optional[AugmentConfig]): transform parameters. Defaults to AugmentConfig().
        rng (Optional[Union[torch.Generator, int]]): random state; an int seeds a fresh generator,
            None uses ``cfg.seed``. The generator is advanced.

    Returns:
        ImageBatch: same shape as ``x``, values in [0, 1].
    """
    cfg = cfg or AugmentConfig()
    validate_image_batch(x)
    if rng is None:
        rng = make_generator(cfg.seed)
    elif isinstance(rng, int):
        rng = make_generator(rng)
    out = torch.empty_like(x)
    with torch.no_grad():
        for i in range(x.shape[0]):
            out[i] = _augment_one(x[i], cfg, rng)
    return out
