"""Test-time pipeline: encode database images into flattened place
descriptors, answer queries by exhaustive cosine search, compute similarity
matrices, and score localization against pose-error thresholds.

The index is immutable after build; concurrent queries are safe.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch

from . import networks as N
from .errors import DataError, FingerprintMismatchError, ValidationError
from .geometry import Pose6DoF, pose_error
from .networks import ImageBatch
from .synthdata import FolderDataset
from .training import TrainConfig, model_fingerprint

# localization tolerance bands: (meters, degrees), tightest first
DEFAULT_THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))

UNIT_NORM_TOL = 1e-5


@dataclass
class DescriptorIndex:
    """Unit-norm descriptor matrix with poses, record ids, and the
    fingerprint of the encoder checkpoint that produced it."""

    descriptors: np.ndarray  # N x L, rows unit-norm
    poses: list[Pose6DoF]
    ids: list[str]
    fingerprint: str

    def __post_init__(self):
        n = self.descriptors.shape[0]
        if len(self.poses) != n or len(self.ids) != n:
            raise ValidationError("descriptors, poses, and ids must agree in length")
        if n:
            norms = np.linalg.norm(self.descriptors, axis=1)
            if np.abs(norms - 1.0).max() > UNIT_NORM_TOL:
                raise ValidationError("descriptor rows must be unit-norm")

    def __len__(self) -> int:
        return self.descriptors.shape[0]


@dataclass
class LocalizationResult:
    """Fraction of queries localized within each tolerance band."""

    thresholds: tuple
    accuracies: tuple

    def as_percent_row(self) -> str:
        return " / ".join(f"{100.0 * a:.1f}" for a in self.accuracies)


def encode_descriptor_batch(model, pixels: torch.Tensor) -> np.ndarray:
    """Place-encode a stack of test-resized images into unit descriptors."""
    batch = ImageBatch(
        pixels=pixels,
        appearance_domain=torch.zeros(pixels.shape[0], dtype=torch.long),
        occlusion_flag=torch.zeros(pixels.shape[0], dtype=torch.bool),
    )
    with torch.no_grad():
        code = N.encode_place(model, batch)
        descriptor = N.flatten_place_descriptor(code)
    return descriptor.numpy().astype(np.float32)


def encode_dataset(model, cfg: TrainConfig, dataset: FolderDataset,
                    batch_size: int = 16) -> np.ndarray:
    rows = []
    for start in range(0, len(dataset), batch_size):
        stack = torch.stack([
            dataset.load_pixels(i, cfg.crop_size)
            for i in range(start, min(start + batch_size, len(dataset)))
        ])
        rows.append(encode_descriptor_batch(model, stack))
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, 0), dtype=np.float32)


def build_index(model, cfg: TrainConfig, dataset: FolderDataset) -> DescriptorIndex:
    """Encode every database record; images are resized straight to the
    crop size at test time (no jitter)."""
    if len(dataset) == 0:
        raise DataError("database manifest is empty")
    descriptors = encode_dataset(model, cfg, dataset)
    return DescriptorIndex(
        descriptors=descriptors,
        poses=[r.spec.pose for r in dataset.records],
        ids=[r.path for r in dataset.records],
        fingerprint=model_fingerprint(model, cfg),
    )


def save_index(index: DescriptorIndex, path: str):
    pose_rows = np.array(
        [list(p.translation) + list(p.rotation) for p in index.poses], dtype=np.float64
    )
    np.savez_compressed(
        path,
        descriptors=index.descriptors,
        poses=pose_rows,
        ids=np.array(index.ids, dtype=np.str_),
        fingerprint=np.array(index.fingerprint),
    )


def load_index(path: str) -> DescriptorIndex:
    if not os.path.exists(path):
        raise DataError(f"index not found: {path}")
    try:
        data = np.load(path, allow_pickle=False)
        pose_rows = data["poses"]
        poses = [Pose6DoF(translation=row[:3], rotation=row[3:]) for row in pose_rows]
        return DescriptorIndex(
            descriptors=data["descriptors"],
            poses=poses,
            ids=[str(v) for v in data["ids"]],
            fingerprint=str(data["fingerprint"]),
        )
    except (KeyError, ValueError, OSError) as exc:
        raise DataError(f"unreadable index {path}: {exc}") from exc


def check_fingerprint(index: DescriptorIndex, model, cfg: TrainConfig):
    actual = model_fingerprint(model, cfg)
    if actual != index.fingerprint:
        raise FingerprintMismatchError(
            "index was built under a different checkpoint "
            f"({index.fingerprint[:12]}... vs {actual[:12]}...)"
        )


def query(index: DescriptorIndex, query_pixels: torch.Tensor, model,
          cfg: TrainConfig, top_k: int = 5) -> list[tuple[str, float]]:
    """Rank database entries by cosine similarity to one query image.

    Ties break by ascending id; the checkpoint fingerprint must match the
    one the index was built with.
    """
    if len(index) == 0:
        raise DataError("cannot query an empty index")
    check_fingerprint(index, model, cfg)
    descriptor = encode_descriptor_batch(model, query_pixels.unsqueeze(0))[0]
    sims = index.descriptors @ descriptor
    order = sorted(range(len(index)), key=lambda i: (-sims[i], index.ids[i]))
    return [(index.ids[i], float(sims[i])) for i in order[: min(top_k, len(index))]]


def rank_matrix(index: DescriptorIndex, queries: np.ndarray) -> np.ndarray:
    """Top-1 database row per query-descriptor row (vectorized helper)."""
    sims = queries @ index.descriptors.T
    return np.argmax(sims, axis=1)


def similarity_matrix(descriptors: np.ndarray) -> np.ndarray:
    """Pairwise cosine matrix of a unit-norm descriptor set; symmetric with
    unit diagonal, entries clipped into [-1, 1]."""
    d = np.asarray(descriptors)
    if d.ndim != 2:
        raise ValidationError("descriptor set must be an N x L matrix")
    return np.clip(d @ d.T, -1.0, 1.0)


def cross_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.asarray(a) @ np.asarray(b).T


def diagonal_dominance(matrix: np.ndarray) -> float:
    """mean(diagonal) - mean(off-diagonal); the orderable restatement of
    "the ground-truth similarity matrix is diagonal"."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape[0] != m.shape[1] or m.shape[0] < 2:
        raise ValidationError("need a square matrix of size >= 2")
    n = m.shape[0]
    diag = np.trace(m) / n
    off = (m.sum() - np.trace(m)) / (n * n - n)
    return float(diag - off)


def evaluate_localization(index: DescriptorIndex, query_dataset: FolderDataset,
                          model, cfg: TrainConfig,
                          thresholds=DEFAULT_THRESHOLDS) -> LocalizationResult:
    """Adopt each query's top-1 match pose and score it against the
    tolerance bands; a query counts at (d, theta) iff both the translation
    and rotation errors are within tolerance."""
    if len(query_dataset) == 0:
        raise DataError("query manifest is empty")
    check_fingerprint(index, model, cfg)
    descriptors = encode_dataset(model, cfg, query_dataset)
    top1 = rank_matrix(index, descriptors)
    hits = [0] * len(thresholds)
    for qi, db_row in enumerate(top1):
        meters, degrees = pose_error(query_dataset.records[qi].spec.pose,
                                     index.poses[db_row])
        for ti, (max_m, max_deg) in enumerate(thresholds):
            if meters <= max_m and degrees <= max_deg:
                hits[ti] += 1
    n = len(query_dataset)
    return LocalizationResult(
        thresholds=tuple(thresholds),
        accuracies=tuple(h / n for h in hits),
    )
