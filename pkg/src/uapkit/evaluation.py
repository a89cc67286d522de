"""Attack metrics: accuracy, fooling rate, targeted success rate, confusion.

All metrics are pure functions of (network, dataset, perturbation). Perturbed
images are clipped to the network's pixel domain before prediction, matching
the rule used during perturbation generation. The fooling rate is computed as
``1 - fraction correctly classified`` so that the zero perturbation
reproduces ``1 - accuracy`` exactly, bit for bit.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackBudget, lp_norm


def _predictions(net, data, pert=None):
    images = data.images
    if pert is not None:
        tensor = np.asarray(getattr(pert, "tensor", pert), dtype=float)
        if tensor.shape != images.shape[1:]:
            raise ValueError(f"perturbation shape {tensor.shape} does not match "
                             f"image shape {images.shape[1:]}")
        lo, hi = net.pixel_domain
        images = np.clip(images + tensor, lo, hi)
    return net.predict_batch(images)


def _require_nonempty(data):
    if len(data) == 0:
        raise ValueError("dataset is empty")


def accuracy(net, data):
    """Fraction of images predicted as their actual label."""
    _require_nonempty(data)
    return float(np.mean(_predictions(net, data) == data.labels))


def fooling_rate(net, data, pert):
    """Fraction of perturbed images not predicted as their actual label."""
    _require_nonempty(data)
    return 1.0 - float(np.mean(_predictions(net, data, pert) == data.labels))


def targeted_success_rate(net, data, pert, target):
    """Fraction of perturbed images predicted as the target class."""
    _require_nonempty(data)
    if not 0 <= target < net.num_classes:
        raise ValueError(f"target class {target} out of range "
                         f"[0, {net.num_classes - 1}]")
    return float(np.mean(_predictions(net, data, pert) == target))


def confusion_matrix(net, data, pert=None):
    """K x K counts; entry (i, j) = images of actual class i predicted as j."""
    _require_nonempty(data)
    preds = _predictions(net, data, pert)
    k = net.num_classes
    flat = data.labels * k + preds
    return np.bincount(flat, minlength=k * k).reshape(k, k)


def dataset_norm_stats(data, p):
    """Mean per-image Lp norm, in pixel units."""
    _require_nonempty(data)
    return float(np.mean([lp_norm(img, p) for img in data.images]))


def resolve_budget(zeta, data, p):
    """Budget whose radius is `zeta` times the mean image Lp norm."""
    if not 0 < zeta <= 1:
        raise ValueError(f"zeta must lie in (0, 1], got {zeta}")
    return AttackBudget(p, zeta * dataset_norm_stats(data, p), zeta=zeta)


@dataclass
class EvalReport:
    """Metrics for one (network, dataset, perturbation) evaluation."""

    accuracy: float
    metric_name: str            # fooling_rate | targeted_success_rate
    metric_value: float
    confusion: np.ndarray
    class_names: list
    per_class: dict             # name -> {recall, predicted_share}
    dominant_label: str         # class receiving the most predictions
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "metric_name": self.metric_name,
            "metric_value": self.metric_value,
            "confusion": self.confusion.tolist(),
            "class_names": list(self.class_names),
            "per_class": self.per_class,
            "dominant_label": self.dominant_label,
            "metadata": self.metadata,
        }


def evaluate(net, data, pert=None, target=None, metadata=None):
    """Build a full EvalReport; targeted metric when `target` is given."""
    _require_nonempty(data)
    confusion = confusion_matrix(net, data, pert)
    n = len(data)
    acc = float(np.trace(confusion) / n)
    if target is not None:
        metric_name = "targeted_success_rate"
        metric_value = targeted_success_rate(net, data, pert, target)
    else:
        metric_name = "fooling_rate"
        metric_value = fooling_rate(net, data, pert)
    col_mass = confusion.sum(axis=0)
    row_mass = confusion.sum(axis=1)
    per_class = {}
    for i, name in enumerate(data.class_names):
        per_class[name] = {
            "recall": float(confusion[i, i] / row_mass[i]) if row_mass[i] else 0.0,
            "predicted_share": float(col_mass[i] / n),
        }
    dominant = data.class_names[int(np.argmax(col_mass))]
    return EvalReport(acc, metric_name, metric_value, confusion,
                      list(data.class_names), per_class, dominant,
                      metadata or {})


def write_report_json(path, payload):
    """Serialize a report dict deterministically (sorted keys, fixed layout)."""
    if isinstance(payload, EvalReport):
        payload = payload.to_dict()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_confusion_csv(path, confusion, class_names):
    """Confusion matrix as CSV: header of class names, one row per actual class."""
    confusion = np.asarray(confusion)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["actual"] + list(class_names))
        for i, name in enumerate(class_names):
            writer.writerow([name] + [int(v) for v in confusion[i]])
