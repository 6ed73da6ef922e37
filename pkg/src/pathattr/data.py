from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Dataset:
    """Images ``(N, H, W)`` or ``(N, C, H, W)`` in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray | None = None
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=bool)
            if self.masks.shape[0] != len(self.labels) or self.masks.shape[-2:] != self.images.shape[-2:]:
                raise ValueError("mask shape does not match images")
        if not self.class_names and len(self.labels):
            self.class_names = [str(i) for i in range(int(self.labels.max()) + 1)]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        masks = None if self.masks is None else self.masks[idx]
        return Dataset(self.images[idx], self.labels[idx], masks, list(self.class_names))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)
