import hashlib
import json
import os
import random
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
from torch import nn

from .exceptions import ArtifactIOError

ARTIFACT_ROOT_ENV = "ADVCL_ARTIFACT_ROOT"
DEFAULT_ARTIFACT_ROOT = "./artifacts"

_VERBOSE = True


# === Status output ===

def set_verbose(flag: bool) -> None:
    global _VERBOSE
    _VERBOSE = bool(flag)

def status(message: str) -> None:
    """Prints a progress line unless status output is silenced."""
    if _VERBOSE:
        print(message)

def warn(message: str) -> None:
    print(f"Warning: {message}", file=sys.stderr)

def error(message: str) -> None:
    print(f"Error: {message}", file=sys.stderr)


# === Seeding ===

def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)

def make_generator(seed: int) -> torch.Generator:
    """CPU generator; tensors drawn from it are moved to the target device afterwards."""
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g

def derive_seed(*parts: Any) -> int:
    """Stable 63-bit seed from an arbitrary tuple of ints / strings."""
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


# === Fingerprints ===

def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()

def array_fingerprint(array: Union[np.ndarray, torch.Tensor]) -> str:
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    array = np.ascontiguousarray(array)
    h = hashlib.sha256()
    h.update(str(array.dtype).encode())
    h.update(str(array.shape).encode())
    h.update(array.tobytes())
    return h.hexdigest()

def parameter_hash(module: nn.Module) -> str:
    """Hash of every named parameter and buffer; equal hashes mean bit-identical weights."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(array_fingerprint(tensor).encode())
    return h.hexdigest()

def file_fingerprint(path: Union[str, Path]) -> str:
    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(f"Cannot fingerprint '{path}': file does not exist.")
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

def json_fingerprint(payload: Any) -> str:
    return sha256_bytes(json.dumps(payload, sort_keys=True, default=str).encode("utf-8"))

def code_fingerprint() -> str:
    """Package version plus a hash over the package sources."""
    from . import __version__
    package_dir = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for source in sorted(package_dir.glob("*.py")):
        h.update(source.name.encode())
        h.update(source.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


# === Artifacts ===

def artifact_root(override: Optional[Union[str, Path]] = None) -> Path:
    root = override or os.environ.get(ARTIFACT_ROOT_ENV) or DEFAULT_ARTIFACT_ROOT
    return Path(root)

def ensure_dir(path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ArtifactIOError(f"Cannot create directory '{path}': {e}") from e
    return path

def write_json(path: Union[str, Path], payload: Any) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    try:
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True, default=str)
    except OSError as e:
        raise ArtifactIOError(f"Cannot write '{path}': {e}") from e
    return path

def read_json(path: Union[str, Path]) -> Any:
    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(f"File '{path}' does not exist.")
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactIOError(f"Cannot read '{path}': {e}") from e

def append_jsonl(path: Union[str, Path], record: Dict[str, Any]) -> None:
    path = Path(path)
    ensure_dir(path.parent)
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True, default=str) + "\n")


# === Model state helpers ===

@contextmanager
def eval_mode(module: nn.Module, enabled: bool = True):
    """Temporarily switches a module to eval mode and restores the previous mode."""
    was_training = module.training
    if enabled:
        module.eval()
    try:
        yield module
    finally:
        module.train(was_training)

@contextmanager
def preserved_buffers(module: nn.Module):
    """Restores every buffer (e.g. BN running statistics) on exit."""
    saved = {name: buf.detach().clone() for name, buf in module.named_buffers()}
    try:
        yield module
    finally:
        with torch.no_grad():
            for name, buf in module.named_buffers():
                buf.copy_(saved[name])

def resolve_device(device: Union[str, torch.device, None]) -> torch.device:
    if device is None:
        return torch.device("cpu")
    if isinstance(device, torch.device):
        return device
    if device.startswith("cuda") and not torch.cuda.is_available():
        warn(f"Device '{device}' requested but CUDA is unavailable; using cpu.")
        return torch.device("cpu")
    return torch.device(device)
