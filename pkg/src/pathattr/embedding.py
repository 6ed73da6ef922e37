"""Penultimate-layer embeddings and their PCA projection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .model import TinyCnnParams, embed_batch

log = logging.getLogger(__name__)


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2:
            raise ValueError("embedding rows must form a 2-D matrix")
        if len(self.rows) != len(self.labels):
            raise ValueError("one label per row required")


@dataclass
class PcaResult:
    coordinates: np.ndarray  # (N, k)
    components: np.ndarray  # (d, k), orthonormal columns
    explained_variance: np.ndarray  # (k,)
    mean: np.ndarray  # (d,)

    def reconstruct(self) -> np.ndarray:
        return self.mean + self.coordinates @ self.components.T


def extract_embeddings(params: TinyCnnParams, dataset: Dataset) -> EmbeddingMatrix:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return EmbeddingMatrix(embed_batch(params, dataset.images), dataset.labels.copy())


def pca_project(matrix, k: int = 2) -> PcaResult:
    """Project mean-centred rows onto the top-``k`` principal axes.

    Variances use the 1/(N-1) sample covariance. Each component is signed so
    its largest-magnitude entry is positive.
    """
    x = np.asarray(getattr(matrix, "rows", matrix), dtype=np.float64)
    n, d = x.shape
    achievable = min(n - 1, d)
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > achievable:
        raise ValueError(f"k={k} exceeds the achievable rank {achievable} for a {n}x{d} matrix")
    mean = x.mean(axis=0)
    centred = x - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:k].T.copy()
    variance = s[:k] ** 2 / (n - 1)
    for j in range(k):
        lead = np.argmax(np.abs(comps[:, j]))
        if comps[lead, j] < 0:
            comps[:, j] = -comps[:, j]
    return PcaResult(centred @ comps, comps, variance, mean)


def unit_rms(coordinates) -> np.ndarray:
    """Rescale centred coordinates so their RMS distance from the mean is 1.

    Spreads measured after this are relative to the layout's overall size, the
    way a scatter plot is read; an all-equal input is returned centred.
    """
    pts = np.asarray(coordinates, dtype=np.float64)
    centred = pts - pts.mean(axis=0)
    radius = math.sqrt(float((centred ** 2).sum(axis=1).mean()))
    return centred / radius if radius > 0 else centred


def cluster_spread(coordinates, labels) -> tuple[dict[int, float], float]:
    """Mean pairwise Euclidean distance inside each class, and their average.

    Classes with fewer than two samples are skipped with a warning.
    """
    pts = np.asarray(coordinates, dtype=np.float64)
    labels = np.asarray(labels)
    spread: dict[int, float] = {}
    for c in np.unique(labels):
        members = pts[labels == c]
        if len(members) < 2:
            log.warning("class %s has fewer than 2 samples; skipped", c)
            continue
        diff = members[:, None, :] - members[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=-1))
        iu = np.triu_indices(len(members), k=1)
        spread[int(c)] = float(dist[iu].mean())
    if not spread:
        raise ValueError("no class has at least two samples")
    return spread, float(np.mean(list(spread.values())))


def write_projection_csv(path, coordinates, labels, class_names=None) -> None:
    coords = np.asarray(coordinates)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "x", "y", "label"])
        for i, (row, lab) in enumerate(zip(coords, labels)):
            y = repr(float(row[1])) if coords.shape[1] > 1 else "0.0"
            name = class_names[lab] if class_names else int(lab)
            writer.writerow([i, repr(float(row[0])), y, name])
