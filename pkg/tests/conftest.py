import pytest
import torch
from torch import nn

from advcl_toolkit.data_pipeline import load_dataset
from advcl_toolkit.models import Architecture, EncoderConfig
from advcl_toolkit.network import RobustModel
from advcl_toolkit.utils import set_verbose


@pytest.fixture(autouse=True)
def quiet():
    set_verbose(False)
    yield
    set_verbose(True)


@pytest.fixture(autouse=True)
def artifact_root(tmp_path, monkeypatch):
    root = tmp_path / "artifacts"
    monkeypatch.setenv("ADVCL_ARTIFACT_ROOT", str(root))
    return root


@pytest.fixture
def encoder_cfg():
    return EncoderConfig(architecture=Architecture.TINY_CNN, feature_dim=8, projection_dim=4,
                         input_channels=1, image_size=16)


@pytest.fixture
def tiny_model(encoder_cfg):
    torch.manual_seed(0)
    return RobustModel(encoder_cfg)


@pytest.fixture
def synthetic():
    return load_dataset("synthetic", "train", n=32, classes=2, image_size=16)


@pytest.fixture
def synthetic_test():
    return load_dataset("synthetic", "test", n=32, classes=2, image_size=16)


class LinearClassifier(nn.Module):
    """Two-class linear model on flattened pixels: logits = [0, w.x + b]."""

    def __init__(self, w: torch.Tensor, b: float = 0.0):
        super().__init__()
        self.w = nn.Parameter(w.clone().double())
        self.b = nn.Parameter(torch.tensor(float(b), dtype=torch.float64))

    def margin(self, x: torch.Tensor) -> torch.Tensor:
        return x.double().flatten(1) @ self.w + self.b

    def forward_classifier(self, x, route="normal"):
        m = self.margin(x)
        return torch.stack([torch.zeros_like(m), m], dim=1)


class ConstantClassifier(nn.Module):
    """Ignores its input; the dummy parameter keeps ``parameters()`` non-empty."""

    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float64)
        self.dummy = nn.Parameter(torch.zeros(()))

    def forward_classifier(self, x, route="normal"):
        return self.logits.expand(x.shape[0], -1) + 0.0 * x.sum(dim=(1, 2, 3), keepdim=False)[:, None]


@pytest.fixture
def linear_classifier():
    return LinearClassifier


@pytest.fixture
def constant_classifier():
    return ConstantClassifier

