"""Universal adversarial perturbations via iterative FGSM with Lp projection.

A universal perturbation rho starts at zero and is grown by visiting training
images in a seeded random order: wherever the current rho fails to change the
prediction (or fails to hit the target class), a one-step FGSM perturbation is
added and, if the step flips the prediction as intended, rho is replaced by
the projection of the accumulated offset back onto the Lp ball of radius xi.
Norm-matched random perturbations are provided as controls.

Step sizes are domain-relative: ``AttackParams.eps`` is a fraction of the
pixel-domain width, so eps=0.001 on a [0, 255] domain moves each pixel by at
most 0.255 per step.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .seeding import stream_rng

NORMS = (1.0, 2.0, math.inf)

MODE_NONTARGETED = "nontargeted"
MODE_TARGETED = "targeted"

# Relative slack on budget checks; covers rescaling round-off only.
BUDGET_SLACK = 1e-9


def lp_norm(v, p):
    """Lp norm of a tensor of any shape, flattened."""
    v = np.asarray(v, dtype=float).ravel()
    if p == math.inf:
        return float(np.max(np.abs(v))) if v.size else 0.0
    if p == 2.0:
        return float(np.linalg.norm(v))
    if p == 1.0:
        return float(np.sum(np.abs(v)))
    raise ValueError(f"unsupported norm p={p}; use 1, 2 or inf")


@dataclass(frozen=True)
class AttackBudget:
    """Lp-ball constraint: ``norm_p(rho) <= xi``.

    `zeta` records the ratio the budget was resolved from (xi = zeta * mean
    image norm) when applicable.
    """

    p: float
    xi: float
    zeta: float = None

    def __post_init__(self):
        if float(self.p) not in NORMS:
            raise ValueError(f"unsupported norm p={self.p}; use 1, 2 or inf")
        if not (self.xi > 0 and math.isfinite(self.xi)):
            raise ValueError(f"budget xi must be positive and finite, got {self.xi}")
        if self.zeta is not None and not 0 < self.zeta <= 1:
            raise ValueError(f"zeta must lie in (0, 1], got {self.zeta}")
        object.__setattr__(self, "p", float(self.p))
        object.__setattr__(self, "xi", float(self.xi))


@dataclass(frozen=True)
class AttackParams:
    """FGSM/UAP loop parameters. `i_max` counts full passes over the images."""

    eps: float = 0.001
    i_max: int = 15
    mode: str = MODE_NONTARGETED
    target: int = None
    seed: int = 0

    def __post_init__(self):
        if not (self.eps > 0 and math.isfinite(self.eps)):
            raise ValueError(f"eps must be positive and finite, got {self.eps}")
        if self.i_max < 0:
            raise ValueError(f"i_max must be >= 0, got {self.i_max}")
        if self.mode not in (MODE_NONTARGETED, MODE_TARGETED):
            raise ValueError(f"mode must be nontargeted or targeted, got {self.mode!r}")
        if self.mode == MODE_TARGETED and self.target is None:
            raise ValueError("targeted mode requires a target class")
        if self.mode == MODE_NONTARGETED and self.target is not None:
            raise ValueError("nontargeted mode must not set a target class")


@dataclass
class Perturbation:
    """A perturbation tensor with its budget and how it was produced."""

    tensor: np.ndarray
    budget: AttackBudget
    provenance: str  # uap_nontargeted | uap_targeted | random | file

    def norm(self):
        return lp_norm(self.tensor, self.budget.p)

    def within_budget(self):
        return self.norm() <= self.budget.xi * (1.0 + BUDGET_SLACK)


def fgsm_step(grad, eps, p, mode=MODE_NONTARGETED):
    """One fast-gradient step of Lp size eps.

    For p=inf the step is ``eps * sign(grad)`` (with sign(0) = 0); for p in
    {1, 2} the gradient is rescaled to Lp norm eps. Targeted mode negates the
    step, descending the loss toward the target class. A zero gradient yields
    a zero step.
    """
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient contains non-finite values")
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if p == math.inf:
        step = eps * np.sign(grad)
    elif p in (1.0, 2.0, 1, 2):
        n = lp_norm(grad, float(p))
        step = np.zeros_like(grad) if n == 0.0 else eps * grad / n
    else:
        raise ValueError(f"unsupported norm p={p}; use 1, 2 or inf")
    return -step if mode == MODE_TARGETED else step


def _project_l1(v, xi):
    """Euclidean projection onto the L1 ball, by sorting (Duchi et al.)."""
    u = np.sort(np.abs(v.ravel()))[::-1]
    css = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    rho_idx = np.nonzero(u * k > css - xi)[0][-1]
    theta = (css[rho_idx] - xi) / (rho_idx + 1.0)
    w = np.sign(v) * np.maximum(np.abs(v) - theta, 0.0)
    # The soft threshold cancels catastrophically when |v| >> xi; rescale the
    # residual error away so the budget bound holds at any dynamic range.
    n1 = np.abs(w).sum()
    if n1 > xi:
        w *= xi / n1
    return w


def project(v, p, xi):
    """Closest point (in L2 distance) to v inside the Lp ball of radius xi.

    Points already inside the ball (up to the budget slack) are returned
    unchanged, which makes the projection idempotent.
    """
    if not xi > 0:
        raise ValueError(f"xi must be positive, got {xi}")
    v = np.asarray(v, dtype=float)
    if lp_norm(v, p) <= xi * (1.0 + BUDGET_SLACK):
        return v.copy()
    if p == math.inf:
        return np.clip(v, -xi, xi)
    if p == 2.0 or p == 2:
        return v * (xi / lp_norm(v, 2.0))
    return _project_l1(v, xi)


def random_uap(shape, p, xi, seed=0):
    """Norm-matched random control: a random direction scaled to Lp norm xi.

    For p in {1, 2} the direction is an iid standard normal draw (uniform on
    the L2 sphere once normalized); for p=inf components are iid uniform on
    [-1, 1] and rescaled so the largest magnitude is xi. Stream "random-uap".
    """
    if not xi > 0:
        raise ValueError(f"xi must be positive, got {xi}")
    rng = stream_rng(seed, "random-uap")
    while True:
        if p == math.inf:
            v = rng.uniform(-1.0, 1.0, size=shape)
        else:
            v = rng.standard_normal(shape)
        n = lp_norm(v, p)
        if n > 0:
            break
    return Perturbation(v * (xi / n), AttackBudget(p, xi), "random")


def generate_uap(net, data, budget, params):
    """Grow a universal perturbation against `net` over `data`.

    Runs `params.i_max` passes; each pass visits every image once in a random
    order drawn from stream "uap-order" of `params.seed`. Per image x with
    clean prediction c and current perturbation rho:

    * nontargeted: if the model still predicts c on clip(x + rho), take an
      FGSM step on that input against label c; if the stepped image
      clip(x + rho + step) is no longer predicted c, accept
      rho <- project(stepped - x, p, xi).
    * targeted: same flow with "still predicts c" replaced by "does not yet
      predict the target" and acceptance on reaching the target.

    The model is only ever evaluated on images clipped to its pixel domain.
    Deterministic given the seed; an empty dataset or i_max=0 returns the
    zero perturbation.
    """
    provenance = ("uap_targeted" if params.mode == MODE_TARGETED
                  else "uap_nontargeted")
    rho = np.zeros(net.input_shape)
    images = np.asarray(data.images, dtype=float)
    if len(images) == 0 or params.i_max == 0:
        return Perturbation(rho, budget, provenance)

    target = params.target
    if target is not None and not 0 <= target < net.num_classes:
        raise ValueError(f"target class {target} out of range "
                         f"[0, {net.num_classes - 1}]")
    lo, hi = net.pixel_domain
    step_size = params.eps * (hi - lo)
    p, xi = budget.p, budget.xi
    nontargeted = params.mode == MODE_NONTARGETED

    # Clean predictions are fixed for the whole run (weights never change).
    clean = net.predict_batch(images)
    rng = stream_rng(params.seed, "uap-order")
    n = len(images)

    for _ in range(params.i_max):
        order = rng.permutation(n)
        pos = 0
        # Predictions under the current rho are precomputed in blocks purely
        # as a batching optimization; any accepted update invalidates the
        # remainder of the block, which is then recomputed. Semantics are
        # identical to the strictly sequential loop.
        block = 16
        while pos < n:
            take = order[pos:pos + block]
            perturbed = np.clip(images[take] + rho, lo, hi)
            preds = net.predict_batch(perturbed)
            updated_at = -1
            for k, idx in enumerate(take):
                if nontargeted:
                    if preds[k] != clean[idx]:
                        continue
                    label = clean[idx]
                else:
                    if preds[k] == target:
                        continue
                    label = target
                grad = net.input_gradient(perturbed[k], label)
                step = fgsm_step(grad, step_size, p, params.mode)
                x_adv = np.clip(images[idx] + rho + step, lo, hi)
                new_pred = net.predict(x_adv)
                flipped = (new_pred != clean[idx]) if nontargeted \
                    else (new_pred == target)
                if flipped:
                    rho = project(x_adv - images[idx], p, xi)
                    updated_at = k
                    break
            if updated_at >= 0:
                pos += updated_at + 1
                # Track the observed update spacing to limit wasted lookahead.
                block = min(256, max(8, 2 * (updated_at + 1)))
            else:
                pos += len(take)
                block = min(256, block * 2)

    return Perturbation(rho, budget, provenance)
