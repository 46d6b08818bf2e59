"""Encoders with routed batch normalization, the projection head and the linear heads."""
import json
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ArtifactIOError, ConfigurationError, StateError, ValidationError
from .models import Architecture, BNRoute, EncoderConfig
from .utils import code_fingerprint, ensure_dir, json_fingerprint, status

CHECKPOINT_FORMAT = "advcl-checkpoint"
CHECKPOINT_VERSION = 1


def as_route(route: Union[BNRoute, str]) -> BNRoute:
    try:
        return BNRoute(route)
    except ValueError as e:
        raise ValidationError(f"Unknown BN route '{route}'. Expected one of {[r.value for r in BNRoute]}.") from e


class TriBatchNorm2d(nn.Module):
    """
    BatchNorm2d with one independent branch (statistics and affine parameters) per BNRoute.

    A forward pass under route R reads and updates only branch R. With ``shared=True`` a single
    branch serves every route, which gives the single-BN twin of the same network.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1, shared: bool = False):
        super().__init__()
        keys = ["shared"] if shared else [r.value for r in BNRoute]
        self.shared = shared
        self.branches = nn.ModuleDict({k: nn.BatchNorm2d(num_features, eps=eps, momentum=momentum) for k in keys})

    def branch(self, route: Union[BNRoute, str]) -> nn.BatchNorm2d:
        return self.branches["shared" if self.shared else as_route(route).value]

    def forward(self, x: torch.Tensor, route: Union[BNRoute, str]) -> torch.Tensor:
        return self.branch(route)(x)


class ConvBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, tri_bn: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=False)
        self.bn = TriBatchNorm2d(out_channels, shared=not tri_bn)
        self.pool = nn.MaxPool2d(2, ceil_mode=True)

    def forward(self, x, route):
        return self.pool(F.relu(self.bn(self.conv(x), route)))


class TinyCNN(nn.Module):
    """Three conv blocks with routed BN and max pooling, then global average pooling."""

    def __init__(self, in_channels: int, feature_dim: int = 128, tri_bn: bool = True):
        super().__init__()
        self.blocks = nn.ModuleList([
            ConvBlock(in_channels, 32, tri_bn),
            ConvBlock(32, 64, tri_bn),
            ConvBlock(64, feature_dim, tri_bn),
        ])
        self.out_dim = feature_dim

    def forward(self, x, route):
        for block in self.blocks:
            x = block(x, route)
        return F.adaptive_avg_pool2d(x, 1).flatten(1)


class BasicBlock(nn.Module):
    def __init__(self, in_planes: int, planes: int, stride: int = 1, tri_bn: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, kernel_size=3, stride=stride, padding=1, bias=False)
        self.bn1 = TriBatchNorm2d(planes, shared=not tri_bn)
        self.conv2 = nn.Conv2d(planes, planes, kernel_size=3, stride=1, padding=1, bias=False)
        self.bn2 = TriBatchNorm2d(planes, shared=not tri_bn)
        self.shortcut_conv = None
        self.shortcut_bn = None
        if stride != 1 or in_planes != planes:
            self.shortcut_conv = nn.Conv2d(in_planes, planes, kernel_size=1, stride=stride, bias=False)
            self.shortcut_bn = TriBatchNorm2d(planes, shared=not tri_bn)

    def forward(self, x, route):
        out = F.relu(self.bn1(self.conv1(x), route))
        out = self.bn2(self.conv2(out), route)
        shortcut = x if self.shortcut_conv is None else self.shortcut_bn(self.shortcut_conv(x), route)
        return F.relu(out + shortcut)


class ResNet18(nn.Module):
    """CIFAR-style ResNet-18 (3x3 stem, no initial max pool) with routed BN."""

    def __init__(self, in_channels: int, feature_dim: int = 512, tri_bn: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 64, kernel_size=3, stride=1, padding=1, bias=False)
        self.bn1 = TriBatchNorm2d(64, shared=not tri_bn)
        blocks: List[BasicBlock] = []
        in_planes = 64
        for planes, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
            for s in (stride, 1):
                blocks.append(BasicBlock(in_planes, planes, s, tri_bn))
                in_planes = planes
        self.blocks = nn.ModuleList(blocks)
        self.fc = None if feature_dim == 512 else nn.Linear(512, feature_dim)
        self.out_dim = feature_dim

    def forward(self, x, route):
        out = F.relu(self.bn1(self.conv1(x), route))
        for block in self.blocks:
            out = block(out, route)
        out = F.adaptive_avg_pool2d(out, 1).flatten(1)
        return out if self.fc is None else self.fc(out)


def build_encoder(config: EncoderConfig) -> nn.Module:
    if config.architecture == Architecture.TINY_CNN:
        return TinyCNN(config.input_channels, config.feature_dim, config.tri_bn)
    if config.architecture == Architecture.RESNET18:
        return ResNet18(config.input_channels, config.feature_dim, config.tri_bn)
    raise ConfigurationError(f"Unknown architecture '{config.architecture}'.")


class RobustModel(nn.Module):
    """
    Encoder f with routed BN, projection head g, one linear pseudo head per cluster count,
    and an optional downstream linear classifier.
    """

    def __init__(self, config: EncoderConfig, pseudo_head_sizes: Sequence[int] = (),
                 num_classes: Optional[int] = None):
        super().__init__()
        self.config = config
        self.encoder = build_encoder(config)
        hidden = config.projection_hidden_dim or config.feature_dim
        # linear -> normalization-free nonlinearity -> linear
        self.projection = nn.Sequential(
            nn.Linear(config.feature_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, config.projection_dim),
        )
        self.pseudo_heads = nn.ModuleList([nn.Linear(config.feature_dim, int(k)) for k in pseudo_head_sizes])
        self.classifier: Optional[nn.Linear] = None
        if num_classes is not None:
            self.attach_classifier(num_classes)

    # --- structure ---

    @property
    def pseudo_head_sizes(self) -> List[int]:
        return [head.out_features for head in self.pseudo_heads]

    @property
    def num_classes(self) -> Optional[int]:
        return None if self.classifier is None else self.classifier.out_features

    def attach_classifier(self, num_classes: int) -> nn.Linear:
        if num_classes < 1:
            raise ValidationError("num_classes must be >= 1.")
        device = next(self.encoder.parameters()).device
        dtype = next(self.encoder.parameters()).dtype
        self.classifier = nn.Linear(self.config.feature_dim, num_classes).to(device=device, dtype=dtype)
        return self.classifier

    def encoder_parameters(self) -> Iterator[nn.Parameter]:
        return self.encoder.parameters()

    def routed_norms(self) -> List[TriBatchNorm2d]:
        return [m for m in self.encoder.modules() if isinstance(m, TriBatchNorm2d)]

    def copy_bn_branch(self, source: Union[BNRoute, str], target: Union[BNRoute, str]) -> None:
        """Copies statistics and affine parameters of one BN branch onto another."""
        with torch.no_grad():
            for norm in self.routed_norms():
                norm.branch(target).load_state_dict(norm.branch(source).state_dict())

    # --- forward passes ---

    def _check_input(self, x: torch.Tensor) -> None:
        if not isinstance(x, torch.Tensor) or x.dim() != 4:
            raise ValidationError(f"expected an image batch [B, C, H, W], got {getattr(x, 'shape', type(x))}.")
        c, s = self.config.input_channels, self.config.image_size
        if x.shape[1] != c or x.shape[2] != s or x.shape[3] != s:
            raise ValidationError(f"expected images of shape [B, {c}, {s}, {s}], got {tuple(x.shape)}.")

    def forward_features(self, x: torch.Tensor, route: Union[BNRoute, str] = BNRoute.NORMAL) -> torch.Tensor:
        self._check_input(x)
        return self.encoder(x, as_route(route))

    def forward_projection(self, x: torch.Tensor, route: Union[BNRoute, str] = BNRoute.NORMAL) -> torch.Tensor:
        return self.projection(self.forward_features(x, route))

    def forward_pseudo_logits(self, x: torch.Tensor, route: Union[BNRoute, str], head_index: int) -> torch.Tensor:
        if not 0 <= head_index < len(self.pseudo_heads):
            raise ValidationError(f"head_index {head_index} out of range for {len(self.pseudo_heads)} pseudo heads.")
        return self.pseudo_heads[head_index](self.forward_features(x, route))

    def forward_classifier(self, x: torch.Tensor, route: Union[BNRoute, str] = BNRoute.NORMAL) -> torch.Tensor:
        if self.classifier is None:
            raise StateError("No downstream classifier attached; call attach_classifier() or finetune first.")
        return self.classifier(self.forward_features(x, route))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.classifier is not None:
            return self.forward_classifier(x)
        return self.forward_features(x)


# === Checkpoints ===

def save_checkpoint(model: RobustModel, path: Union[str, Path], config_hash: Optional[str] = None,
                    extra: Optional[Dict[str, Any]] = None, training_state: Optional[Dict[str, Any]] = None) -> Path:
    """
    Writes parameters plus EncoderConfig, code version and config hash.

    Layout (torch.save of a dict): format, format_version, code_version, encoder_config (JSON-compatible),
    config_hash, pseudo_head_sizes, num_classes, state_dict, extra, and optionally training_state.
    """
    path = Path(path)
    ensure_dir(path.parent)
    encoder_config = json.loads(model.config.json())
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "code_version": code_fingerprint(),
        "encoder_config": encoder_config,
        "config_hash": config_hash or json_fingerprint(encoder_config),
        "pseudo_head_sizes": model.pseudo_head_sizes,
        "num_classes": model.num_classes,
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    if training_state is not None:
        payload["training_state"] = training_state
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(payload, tmp)
        tmp.replace(path)
    except OSError as e:
        raise ArtifactIOError(f"Cannot write checkpoint '{path}': {e}") from e
    return path


def read_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(f"Checkpoint '{path}' does not exist.")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise ArtifactIOError(f"Cannot read checkpoint '{path}': {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"'{path}' is not an {CHECKPOINT_FORMAT} file.")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"'{path}' has format version {payload.get('format_version')}, expected {CHECKPOINT_VERSION}.")
    return payload


def load_checkpoint(path: Union[str, Path], device: Union[str, torch.device] = "cpu") -> Tuple[RobustModel, Dict[str, Any]]:
    """Rebuilds the RobustModel stored at ``path``; returns (model, payload)."""
    payload = read_checkpoint(path)
    try:
        config = EncoderConfig.parse_obj(payload["encoder_config"])
        model = RobustModel(config, payload.get("pseudo_head_sizes") or (), payload.get("num_classes"))
        model.load_state_dict(payload["state_dict"])
    except (KeyError, RuntimeError, ValueError) as e:
        raise ConfigurationError(f"Checkpoint '{path}' is incompatible with this code: {e}") from e
    status(f"Loaded checkpoint '{path}' ({config.architecture.value}, feature_dim={config.feature_dim}).")
    return model.to(device), payload
