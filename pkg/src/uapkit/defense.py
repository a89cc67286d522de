"""Adversarial retraining: iterative fine-tuning with perturbed images.

One iteration: generate a pool of universal perturbations against the current
model, rebuild the training set with a random half kept clean and the other
half perturbed (each image by one perturbation picked at random from the
pool), fine-tune for a few epochs, then generate a fresh perturbation against
the hardened model and record its test-set attack metric together with clean
test accuracy.
"""

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .attacks import MODE_TARGETED, generate_uap
from .evaluation import accuracy, fooling_rate, targeted_success_rate
from .seeding import stream_rng


@dataclass(frozen=True)
class RetrainConfig:
    """Knobs for the retraining loop.

    The perturbation pool for iteration k uses seeds
    ``params.seed + k * (n_uaps + 1) + j`` for j in [0, n_uaps); the fresh
    post-iteration perturbation uses j = n_uaps. The clean/perturbed split
    draws from stream "retrain-mix" of `seed`, sub-stream k.
    """

    budget: object              # AttackBudget
    params: object              # AttackParams (mode decides R_f vs R_s)
    n_uaps: int = 10
    extra_epochs: int = 5
    iterations: int = 5
    mix_fraction: float = 0.5
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_uaps < 1 or self.extra_epochs < 1:
            raise ValueError("n_uaps and extra_epochs must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0 < self.mix_fraction < 1:
            raise ValueError(f"mix_fraction must lie in (0, 1), "
                             f"got {self.mix_fraction}")


@dataclass
class RetrainRecord:
    iteration: int
    metric_name: str
    metric_value: float
    clean_accuracy: float
    seconds: float


def build_mixed_training_set(data, uaps, mix_fraction, rng, pixel_domain):
    """Keep ceil(mix_fraction * N) images clean; perturb the rest.

    Each perturbed image is clip(original + chosen perturbation), the choice
    drawn uniformly from the pool. Returns (dataset, clean_index_array).
    """
    n = len(data)
    n_clean = math.ceil(mix_fraction * n)
    perm = rng.permutation(n)
    clean_idx, pert_idx = perm[:n_clean], perm[n_clean:]
    choices = rng.integers(0, len(uaps), size=len(pert_idx))
    lo, hi = pixel_domain
    mixed = data.images.copy()
    for j, uap in enumerate(uaps):
        sel = pert_idx[choices == j]
        if len(sel):
            mixed[sel] = np.clip(data.images[sel] + uap.tensor, lo, hi)
    return data.with_images(mixed), clean_idx


def adversarial_retrain(net, train_data, test_data, cfg):
    """Run the retraining loop; returns (net, list of RetrainRecord).

    The network is fine-tuned in place. With iterations=0 the network is
    untouched and the history is empty. Deterministic given cfg seeds.
    """
    if len(train_data) == 0 or len(test_data) == 0:
        raise ValueError("train and test datasets must be nonempty")
    targeted = cfg.params.mode == MODE_TARGETED
    history = []
    for k in range(cfg.iterations):
        t0 = time.perf_counter()
        base = cfg.params.seed + k * (cfg.n_uaps + 1)
        pool = [generate_uap(net, train_data, cfg.budget,
                             replace(cfg.params, seed=base + j))
                for j in range(cfg.n_uaps)]
        rng = stream_rng(cfg.seed, "retrain-mix", k)
        mixed, _ = build_mixed_training_set(train_data, pool, cfg.mix_fraction,
                                            rng, net.pixel_domain)
        net.train(mixed, cfg.extra_epochs, cfg.lr, cfg.batch_size,
                  seed=cfg.seed + k)
        fresh = generate_uap(net, train_data, cfg.budget,
                             replace(cfg.params, seed=base + cfg.n_uaps))
        if targeted:
            name = "targeted_success_rate"
            value = targeted_success_rate(net, test_data, fresh, cfg.params.target)
        else:
            name = "fooling_rate"
            value = fooling_rate(net, test_data, fresh)
        history.append(RetrainRecord(k + 1, name, value,
                                     accuracy(net, test_data),
                                     time.perf_counter() - t0))
    return net, history


def history_to_dicts(history):
    return [{"iteration": r.iteration, "metric_name": r.metric_name,
             "metric_value": r.metric_value, "clean_accuracy": r.clean_accuracy,
             "seconds": r.seconds} for r in history]


def write_history_csv(path, history):
    """CSV columns: iteration, metric, clean_accuracy, seconds."""
    with open(path, "w", newline="") as fh:
        fh.write("iteration,metric,clean_accuracy,seconds\n")
        for r in history:
            fh.write(f"{r.iteration},{r.metric_value!r},"
                     f"{r.clean_accuracy!r},{r.seconds!r}\n")
