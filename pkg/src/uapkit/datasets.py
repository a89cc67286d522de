"""In-memory labelled image collections."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Dataset:
    """Images with integer labels and class names.

    `images` is a single float64 array of shape (N, ...) holding pixel-domain
    values; `labels[i]` indexes into `class_names`.
    """

    images: np.ndarray
    labels: np.ndarray
    class_names: list
    split: str = "train"
    pixel_domain: tuple = (0.0, 255.0)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        k = len(self.class_names)
        if len(set(self.class_names)) != k:
            raise ValueError(f"class names must be unique, got {self.class_names}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k - 1}]")
        if self.images.size:
            if not np.all(np.isfinite(self.images)):
                raise ValueError("images contain non-finite values")
            lo, hi = self.pixel_domain
            if self.images.min() < lo or self.images.max() > hi:
                raise ValueError(f"pixel values outside domain [{lo}, {hi}]")

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self):
        return len(self.class_names)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, split=None):
        return Dataset(self.images[indices], self.labels[indices],
                       list(self.class_names), split or self.split,
                       self.pixel_domain)

    def with_images(self, images, split=None):
        """Same labels and classes, different pixels (e.g. perturbed copies)."""
        return Dataset(images, self.labels.copy(), list(self.class_names),
                       split or self.split, self.pixel_domain)


def concat(a, b, split="all"):
    """Pool two datasets with identical class layouts (e.g. train + test)."""
    if a.class_names != b.class_names:
        raise ValueError(f"class names differ: {a.class_names} vs {b.class_names}")
    if a.pixel_domain != b.pixel_domain:
        raise ValueError("pixel domains differ")
    return Dataset(np.concatenate([a.images, b.images]),
                   np.concatenate([a.labels, b.labels]),
                   list(a.class_names), split, a.pixel_domain)
