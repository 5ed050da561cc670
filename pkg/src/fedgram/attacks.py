"""Untargeted attacks run by the colluding malicious clients.

Model-poisoning crafts work on *updates* (local model minus global model), as
seen through a :class:`BenignView`; the simulator adds the global model back
before submission. Data-poisoning attacks only rewrite labels and then train
through the ordinary local-training path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .data import Dataset, flip_labels_static
from .mathcore import std_normal_inverse_cdf
from .model import MlpArch, MlpModel, init_model, forward_logits, sgd_local_train

MODEL_POISONING = ("lie", "fang", "minmax", "minsum", "mpaf")
DATA_POISONING = ("label_flip", "dynamic_label_flip")
ATTACK_KINDS = ("none", *MODEL_POISONING, *DATA_POISONING, "adaptive_uniformity")

ATTACK_DEFAULTS: dict[str, dict[str, Any]] = {
    "none": {},
    "lie": {"population": "global"},
    "fang": {"b": 2.0},
    "minmax": {"gamma_hi": 100.0, "tau": 1e-3, "perturbation": "inverse_unit"},
    "minsum": {"gamma_hi": 100.0, "tau": 1e-3, "perturbation": "inverse_unit"},
    "mpaf": {"lam": 10.0},
    "label_flip": {},
    "dynamic_label_flip": {"surrogate_epochs": 5, "lr": 0.05},
    "adaptive_uniformity": {},
}


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        allowed = ATTACK_DEFAULTS[self.kind]
        extra = set(self.params) - set(allowed)
        if extra:
            raise ValueError(f"attack {self.kind!r} does not take {sorted(extra)}")
        merged = {**allowed, **self.params}
        object.__setattr__(self, "params", merged)

    @property
    def is_model_poisoning(self) -> bool:
        return self.kind in MODEL_POISONING


@dataclass(frozen=True)
class BenignView:
    """What the coalition observes this round: benign updates and the global model."""

    updates: np.ndarray
    global_values: np.ndarray

    def __post_init__(self):
        upd = np.atleast_2d(np.asarray(self.updates, dtype=np.float64))
        object.__setattr__(self, "updates", upd)
        object.__setattr__(self, "global_values", np.asarray(self.global_values, dtype=np.float64))
        if upd.shape[0] == 0:
            raise ValueError("benign view is empty")


def lie_z_max(n: int, m: int) -> float:
    """Largest z with Phi(z) < (n - m - s) / (n - m), s = floor(n/2 + 1) - m."""
    if not n > m >= 1:
        raise ValueError("LIE needs n > m >= 1")
    s = math.floor(n / 2 + 1) - m
    frac = (n - m - s) / (n - m)
    if not 0.0 < frac < 1.0:
        raise ValueError("LIE fraction degenerate")
    return std_normal_inverse_cdf(frac)


def lie_craft(view: BenignView, n: int, m: int) -> np.ndarray:
    """Coordinate mean shifted by -z_max population standard deviations."""
    z = lie_z_max(n, m)
    upd = view.updates
    return upd.mean(axis=0) - z * upd.std(axis=0)


def fang_directions(view: BenignView) -> np.ndarray:
    """Estimated change direction per coordinate: sign of the mean benign update (0 -> +1)."""
    return np.where(view.updates.mean(axis=0) < 0, -1.0, 1.0)


def fang_intervals(view: BenignView, directions: np.ndarray, b: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate [low, high] sampling interval for the trimmed-mean Fang attack."""
    if not b > 1:
        raise ValueError("Fang scale b must exceed 1")
    s = np.asarray(directions, dtype=np.float64)
    if not np.all(np.isin(s, (-1.0, 1.0))):
        raise ValueError("directions must be +1 or -1")
    w_max = view.updates.max(axis=0)
    w_min = view.updates.min(axis=0)
    lo = np.empty_like(w_max)
    hi = np.empty_like(w_max)
    dec = s < 0
    pos_max = w_max > 0
    pos_min = w_min > 0
    # s=-1: push above the benign maximum
    m = dec & pos_max
    lo[m], hi[m] = w_max[m], b * w_max[m]
    m = dec & ~pos_max
    lo[m], hi[m] = w_max[m], w_max[m] / b
    # s=+1: push below the benign minimum
    m = ~dec & pos_min
    lo[m], hi[m] = w_min[m] / b, w_min[m]
    m = ~dec & ~pos_min
    lo[m], hi[m] = b * w_min[m], w_min[m]
    return lo, hi


def fang_craft(view: BenignView, b: float, rng: np.random.Generator, directions=None) -> np.ndarray:
    if directions is None:
        directions = fang_directions(view)
    lo, hi = fang_intervals(view, directions, b)
    return lo + (hi - lo) * rng.random(lo.shape[0])


def _max_pairwise_sq(upd: np.ndarray) -> np.ndarray:
    sq = np.sum(upd * upd, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * upd @ upd.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return d2


def minmax_minsum_feasible(view: BenignView, variant: str, candidate: np.ndarray) -> bool:
    """Check the MinMax / MinSum stealth constraint for a candidate malicious update.

    MinMax: max_i ||c - w_i|| <= max_{i,j} ||w_i - w_j||.
    MinSum: sum_i ||c - w_i||^2 <= max_i sum_j ||w_i - w_j||^2.
    """
    upd = view.updates
    d2 = _max_pairwise_sq(upd)
    dist2 = np.sum((upd - candidate) ** 2, axis=1)
    if variant == "minmax":
        return bool(dist2.max() <= d2.max())
    if variant == "minsum":
        return bool(dist2.sum() <= d2.sum(axis=1).max())
    raise ValueError(f"unknown variant {variant!r}")


def minmax_minsum_direction(view: BenignView, perturbation: str = "inverse_unit") -> tuple[np.ndarray, np.ndarray]:
    """Return (benign mean, unit step direction) for the gamma line search.

    ``inverse_unit`` steps against the benign mean; ``printed`` takes the
    opposite sign (w_b - gamma * w_p with w_p = -w_b/||w_b||), i.e. along it.
    """
    mean = view.updates.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise ValueError("undefined perturbation direction")
    unit = mean / norm
    if perturbation == "inverse_unit":
        return mean, -unit
    if perturbation == "printed":
        return mean, unit
    raise ValueError(f"unknown perturbation {perturbation!r}")


def minmax_minsum_craft(
    view: BenignView,
    variant: str,
    gamma_hi: float = 100.0,
    tau: float = 1e-3,
    perturbation: str = "inverse_unit",
) -> tuple[np.ndarray, float]:
    """Largest feasible step along the perturbation direction, by bisection.

    The constraint is convex in gamma and holds at gamma = 0, so the feasible
    set is an interval [0, gamma*]. Bisection stops once the bracket is no
    wider than ``tau * min(1, hi)``.
    """
    if view.updates.shape[0] < 2:
        raise ValueError("MinMax/MinSum need at least 2 benign updates")
    if gamma_hi <= 0 or tau <= 0:
        raise ValueError("gamma_hi and tau must be positive")
    mean, direction = minmax_minsum_direction(view, perturbation)

    def ok(g: float) -> bool:
        return minmax_minsum_feasible(view, variant, mean + g * direction)

    if ok(gamma_hi):
        gamma = gamma_hi
    elif not ok(0.0):
        gamma = 0.0
    else:
        lo, hi = 0.0, gamma_hi
        while hi - lo > tau * min(1.0, hi):
            mid = 0.5 * (lo + hi)
            if ok(mid):
                lo = mid
            else:
                hi = mid
        gamma = lo
    crafted = mean + gamma * direction
    if np.array_equal(crafted, mean):
        # a step too small to move any coordinate is no step at all
        gamma = 0.0
    return crafted, gamma


def mpaf_craft(global_values, baseline_values, lam: float) -> np.ndarray:
    """Fake-client model pulled toward a fixed baseline: global + lam * (baseline - global)."""
    g = np.asarray(global_values, dtype=np.float64)
    base = np.asarray(baseline_values, dtype=np.float64)
    if g.shape != base.shape:
        raise ValueError("baseline and global model differ in dimension")
    if not lam > 0:
        raise ValueError("lambda must be positive")
    return g + lam * (base - g)


def dynamic_flip(
    data: Dataset,
    arch: MlpArch,
    surrogate_epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 32,
) -> Dataset:
    """Relabel every sample to the class a locally trained surrogate finds least likely."""
    if len(data) == 0:
        raise ValueError("empty data")
    surrogate = init_model(arch, rng)
    steps = surrogate_epochs * max(1, len(data) // min(batch_size, len(data)))
    if steps:
        surrogate = sgd_local_train(surrogate, data.X, data.y, steps, lr, batch_size, rng)
    logits = forward_logits(surrogate, data.X)
    return Dataset(data.X, np.argmin(logits, axis=1), data.num_classes)


def label_flip(data: Dataset) -> Dataset:
    return flip_labels_static(data)


def adaptive_submit(
    global_model: MlpModel,
    data: Dataset,
    steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> MlpModel:
    """Honest local-training loop with the uniformity loss in place of cross-entropy."""
    return sgd_local_train(global_model, data.X, data.y, steps, lr, batch_size, rng, loss="uniformity")
