"""Offline pseudo-label stimulus: feature extraction, k-means and per-K label tables."""
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .data_pipeline import ImageDataset, LabeledBatch
from .exceptions import ArtifactIOError, ClusteringError, ConfigurationError, StateError, ValidationError
from .models import BNRoute
from .network import RobustModel, load_checkpoint
from .utils import array_fingerprint, derive_seed, ensure_dir, file_fingerprint, status

TABLE_FORMAT = "advcl-pseudo-labels"
TABLE_VERSION = 1
_DISTANCE_CHUNK = 256


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    normalized: bool = True
    fingerprint: str = ""

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ValidationError(f"feature rows must be [n, d], got shape {self.rows.shape}.")
        if not np.isfinite(self.rows).all():
            raise ValidationError("feature rows contain NaN or Inf.")
        if self.normalized and self.rows.size:
            norms = np.linalg.norm(self.rows, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValidationError("rows flagged normalized must have unit l2 norm.")
        if not self.fingerprint:
            self.fingerprint = array_fingerprint(self.rows)

    def __len__(self) -> int:
        return self.rows.shape[0]


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: List[float] = field(default_factory=list)
    n_iter: int = 0


@dataclass
class PseudoLabelTable:
    k_list: List[int]
    assignments: Dict[int, np.ndarray]
    centroids: Dict[int, np.ndarray]
    inertia: Dict[int, float]
    fingerprint: str
    seed: int

    def __len__(self) -> int:
        return len(next(iter(self.assignments.values()))) if self.assignments else 0

    def labels_for(self, indices: torch.Tensor, k_list: Optional[Sequence[int]] = None) -> List[torch.Tensor]:
        """Pseudo labels of the given dataset rows, one tensor per K (table order unless ``k_list`` is given)."""
        k_list = self.k_list if k_list is None else [int(k) for k in k_list]
        missing = [k for k in k_list if k not in self.assignments]
        if missing:
            raise StateError(f"Pseudo-label table has no assignments for K={missing}; it holds K={self.k_list}.")
        idx = indices.detach().cpu().numpy()
        return [torch.from_numpy(self.assignments[k][idx]).long().to(indices.device) for k in k_list]


# === Feature extraction ===

def _image_batches(data, batch_size: int) -> Iterable[torch.Tensor]:
    if isinstance(data, ImageDataset):
        data = data.batches(batch_size=batch_size)
    for item in data:
        yield item.images if isinstance(item, LabeledBatch) else item


def extract_features(encoder: Union[str, Path, RobustModel], data, device: Union[str, torch.device] = "cpu",
                     batch_size: int = 256) -> FeatureMatrix:
    """
    Eval-mode, un-augmented features of every image in ``data``, l2-normalized.

    Args:
        encoder: a RobustModel or the path of a checkpoint holding one.
        data: an ImageDataset or any iterable of ImageBatch / LabeledBatch.

    Raises:
        ConfigurationError: the images do not match the encoder's channels or resolution.
    """
    if isinstance(encoder, (str, Path)):
        model, _ = load_checkpoint(encoder, device)
        source = file_fingerprint(encoder)
    else:
        model = encoder.to(device)
        source = "in-memory"
    cfg = model.config
    rows = []
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for images in _image_batches(data, batch_size):
                if images.shape[1] != cfg.input_channels or images.shape[-1] != cfg.image_size:
                    raise ConfigurationError(
                        f"Encoder expects [{cfg.input_channels}, {cfg.image_size}, {cfg.image_size}] images, "
                        f"got {tuple(images.shape[1:])}."
                    )
                z = model.forward_features(images.to(device), BNRoute.NORMAL)
                rows.append(F.normalize(z.double(), dim=1).cpu().numpy())
    finally:
        model.train(was_training)
    if not rows:
        raise ValidationError("no images to extract features from.")
    matrix = np.concatenate(rows, axis=0)
    status(f"Extracted {matrix.shape[0]} feature rows of width {matrix.shape[1]}.")
    return FeatureMatrix(matrix, normalized=True, fingerprint=f"{source[:16]}:{array_fingerprint(matrix)[:16]}")


# === k-means ===

def squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """[n, K] squared Euclidean distances, computed from explicit differences in row chunks."""
    out = np.empty((x.shape[0], centroids.shape[0]), dtype=np.float64)
    for start in range(0, x.shape[0], _DISTANCE_CHUNK):
        diff = x[start:start + _DISTANCE_CHUNK, None, :] - centroids[None, :, :]
        out[start:start + _DISTANCE_CHUNK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = squared_distances(x, x[chosen]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
        closest = np.minimum(closest, squared_distances(x, x[idx:idx + 1]).ravel())
    return x[chosen].copy()


def _assign(x: np.ndarray, centroids: np.ndarray):
    d2 = squared_distances(x, centroids)
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(x.shape[0]), labels]


def _repair_empty(labels: np.ndarray, point_d2: np.ndarray, centroids: np.ndarray, x: np.ndarray, k: int) -> None:
    """Moves the point farthest from its centroid into each empty cluster (in place)."""
    for j in range(k):
        if np.any(labels == j):
            continue
        far = int(point_d2.argmax())
        labels[far] = j
        centroids[j] = x[far]
        point_d2[far] = 0.0


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float) -> KMeansResult:
    centroids = _kmeans_plusplus(x, k, rng)
    labels, point_d2 = _assign(x, centroids)
    _repair_empty(labels, point_d2, centroids, x, k)
    history = [float(point_d2.sum())]
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new_centroids = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        labels, point_d2 = _assign(x, centroids)
        _repair_empty(labels, point_d2, centroids, x, k)
        inertia = float(point_d2.sum())
        if inertia > history[-1] * (1 + 1e-9) + 1e-12:
            raise ClusteringError(f"inertia increased at iteration {n_iter}: {history[-1]:.10g} -> {inertia:.10g}.")
        history.append(inertia)
        if shift < tol:
            break
    return KMeansResult(labels.astype(np.int64), centroids, history[-1], history, n_iter)


def kmeans(features: Union[FeatureMatrix, np.ndarray], k: int, seed: int = 0, max_iter: int = 300,
           tol: float = 1e-6) -> KMeansResult:
    """
    Lloyd's algorithm with k-means++ seeding.

    Rows are put in a canonical (lexicographic) order before seeding and the seed is mixed with
    a hash of that ordered content, so permuting the input rows permutes the assignments and
    nothing else.

    Raises:
        ValidationError: K <= 0 or K > n.
    """
    x = features.rows if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"features must be [n, d], got shape {x.shape}.")
    n = x.shape[0]
    if k <= 0:
        raise ValidationError(f"K must be >= 1, got {k}.")
    if k > n:
        raise ValidationError(f"K={k} exceeds the number of points n={n}.")
    order = np.lexsort(x.T[::-1])
    ordered = np.ascontiguousarray(x[order])
    rng = np.random.default_rng([int(seed) % (2 ** 32), derive_seed(array_fingerprint(ordered)) % (2 ** 32)])
    result = _lloyd(ordered, k, rng, max_iter, tol)
    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = result.assignments
    result.assignments = assignments
    return result


# === Pseudo-label tables ===

def build_pseudo_tables(features: FeatureMatrix, k_list: Sequence[int], seed: int = 0, max_iter: int = 300,
                        tol: float = 1e-6, max_workers: int = 1) -> PseudoLabelTable:
    """Independent k-means per K with seeds derived from (seed, K)."""
    k_list = [int(k) for k in k_list]
    if not k_list:
        raise ValidationError("k_list must not be empty.")
    for k in k_list:
        if k <= 0 or k > len(features):
            raise ValidationError(f"K={k} invalid for n={len(features)} points.")

    def fit(k):
        status(f"  k-means with K={k} on {len(features)} points...")
        return k, kmeans(features, k, seed=derive_seed(seed, k) % (2 ** 32), max_iter=max_iter, tol=tol)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = dict(pool.map(fit, k_list))
    return PseudoLabelTable(
        k_list=k_list,
        assignments={k: results[k].assignments for k in k_list},
        centroids={k: results[k].centroids for k in k_list},
        inertia={k: results[k].inertia for k in k_list},
        fingerprint=features.fingerprint,
        seed=seed,
    )


def save_pseudo_table(table: PseudoLabelTable, path: Union[str, Path]) -> Path:
    """
    Writes a NumPy .npz archive: ``header`` (JSON string with format, version, fingerprint, K_list,
    seed, inertia) plus ``assign_<K>`` int64 [n] and ``centroids_<K>`` float64 [K, d] per K.
    """
    path = Path(path)
    ensure_dir(path.parent)
    header = {
        "format": TABLE_FORMAT,
        "format_version": TABLE_VERSION,
        "fingerprint": table.fingerprint,
        "k_list": table.k_list,
        "seed": table.seed,
        "inertia": {str(k): table.inertia[k] for k in table.k_list},
    }
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    for k in table.k_list:
        arrays[f"assign_{k}"] = table.assignments[k]
        arrays[f"centroids_{k}"] = table.centroids[k]
    try:
        with open(path, "wb") as f:
            np.savez(f, **arrays)
    except OSError as e:
        raise ArtifactIOError(f"Cannot write pseudo-label table '{path}': {e}") from e
    return path


def load_pseudo_table(path: Union[str, Path]) -> PseudoLabelTable:
    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(f"Pseudo-label table '{path}' does not exist.")
    try:
        with np.load(path, allow_pickle=False) as archive:
            header = json.loads(str(archive["header"]))
            if header.get("format") != TABLE_FORMAT:
                raise ConfigurationError(f"'{path}' is not a {TABLE_FORMAT} file.")
            k_list = [int(k) for k in header["k_list"]]
            return PseudoLabelTable(
                k_list=k_list,
                assignments={k: archive[f"assign_{k}"].astype(np.int64) for k in k_list},
                centroids={k: archive[f"centroids_{k}"] for k in k_list},
                inertia={k: float(header["inertia"][str(k)]) for k in k_list},
                fingerprint=header["fingerprint"],
                seed=int(header["seed"]),
            )
    except (OSError, KeyError, ValueError) as e:
        raise ArtifactIOError(f"Cannot read pseudo-label table '{path}': {e}") from e
