"""Server-side aggregation rules.

Every rule receives full local models and returns the next global parameter
vector with an :class:`AggregationAudit`. Submissions are processed in
ascending ``client_id`` order, so outputs are bit-identical under any
permutation of the input list and ties always favour the lower id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .data import AuxiliaryDataset, Dataset
from .mathcore import (
    coordinate_median,
    coordinate_trimmed_mean,
    frobenius_norm,
    geometric_median,
    normalize_rows,
)
from .model import MlpArch, MlpModel, forward_embed, predict, sgd_local_train


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    values: np.ndarray
    # ground truth for metrics only; no aggregator reads it
    is_malicious: bool = False

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))


@dataclass
class AggregationAudit:
    kept_ids: list[int]
    removed_ids: list[int] = field(default_factory=list)
    scores: dict[int, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class GramScore:
    client_id: int
    score: float
    degenerate: bool = False


DEFENSE_DEFAULTS: dict[str, dict[str, Any]] = {
    "fedavg": {},
    "fedgram": {"C": 0.3, "then": "avg"},
    "trimmed_mean": {"k": 2},
    "median": {},
    "norm_bound": {"p": 1.0},
    "crfl": {"rho": 15.0, "sigma": 0.002, "clip_target": "update"},
    "krum": {"f": 2},
    "multi_krum": {"f": 2, "m": 5},
    "bulyan": {"f": 1},
    "rfa": {"tol": 1e-8, "max_iter": 200, "smoothing": 1e-6},
    "rlr": {"theta": 4, "eta": 1.0},
    "bucket": {"size": 2, "k": 1},
    "fltrust": {},
    "roni": {"remove_r": None, "C": 0.3},
}
DEFENSE_KINDS = tuple(DEFENSE_DEFAULTS)


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "fedavg"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFENSE_DEFAULTS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        allowed = DEFENSE_DEFAULTS[self.kind]
        extra = set(self.params) - set(allowed)
        if extra:
            raise ValueError(f"defense {self.kind!r} does not take {sorted(extra)}")
        merged = {**allowed, **self.params}
        if "C" in merged and not 0 < merged["C"] < 1:
            raise ValueError("C must lie in (0, 1)")
        if self.kind == "fedgram" and merged["then"] not in ("avg", "trimmed_mean"):
            raise ValueError("fedgram 'then' must be 'avg' or 'trimmed_mean'")
        if self.kind == "crfl" and merged["clip_target"] not in ("update", "model"):
            raise ValueError("crfl clip_target must be 'update' or 'model'")
        object.__setattr__(self, "params", merged)


@dataclass
class ServerResources:
    """Everything the server may hold besides the submissions themselves."""

    arch: MlpArch | None = None
    aux: AuxiliaryDataset | None = None
    root_data: Dataset | None = None
    validation: Dataset | None = None
    local_steps: int = 10
    local_lr: float = 0.1
    batch_size: int = 32
    rng: np.random.Generator | None = None


def _ordered(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ValueError("no updates to aggregate")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids")
    return sorted(updates, key=lambda u: u.client_id)


def _matrix(updates: Sequence[ClientUpdate]) -> np.ndarray:
    return np.stack([u.values for u in updates])


def removal_count(C: float, n: int) -> int:
    # guard against 0.3 * 10 = 3.0000000000000004
    return math.ceil(C * n - 1e-9)


def fedavg(updates: Sequence[ClientUpdate]) -> np.ndarray:
    return _matrix(_ordered(updates)).mean(axis=0)


def gram_matrix(model: MlpModel, aux: AuxiliaryDataset) -> np.ndarray:
    P = normalize_rows(forward_embed(model, aux.matrix()))
    return P @ P.T


def gram_score(model: MlpModel, aux: AuxiliaryDataset, client_id: int = -1) -> GramScore:
    """Frobenius norm of the Gram matrix of row-normalised auxiliary embeddings.

    An all-zero embedding row gets the largest possible score, K_cov.
    """
    try:
        G = gram_matrix(model, aux)
    except ValueError:
        return GramScore(client_id, float(len(aux.entries)), degenerate=True)
    return GramScore(client_id, frobenius_norm(G))


def fedgram_aggregate(
    global_values: np.ndarray,
    updates: Sequence[ClientUpdate],
    aux: AuxiliaryDataset,
    arch: MlpArch,
    C: float = 0.3,
    then: str = "avg",
) -> tuple[np.ndarray, AggregationAudit]:
    """Drop the ceil(C*n) highest Gram scores, then average (or trimmed-mean) the rest."""
    ups = _ordered(updates)
    n = len(ups)
    if not 0 < C < 1:
        raise ValueError("C must lie in (0, 1)")
    r = removal_count(C, n)
    if r >= n:
        raise ValueError("filter removes everything")
    scores = [gram_score(MlpModel.from_values(arch, u.values), aux, u.client_id) for u in ups]
    order = sorted(range(n), key=lambda i: (-scores[i].score, ups[i].client_id))
    removed = set(order[:r])
    survivors = [ups[i] for i in range(n) if i not in removed]
    audit = AggregationAudit(
        kept_ids=[u.client_id for u in survivors],
        removed_ids=sorted(ups[i].client_id for i in removed),
        scores={s.client_id: s.score for s in scores},
    )
    for s in scores:
        if s.degenerate:
            audit.notes.append(f"client {s.client_id}: zero embedding, scored {s.score:g}")
    mat = _matrix(survivors)
    if then == "avg":
        return mat.mean(axis=0), audit
    if then == "trimmed_mean":
        k = removal_count(C, len(survivors)) // 2
        return coordinate_trimmed_mean(mat, k), audit
    raise ValueError(f"unknown post-filter rule {then!r}")


def trimmed_mean_aggregate(updates: Sequence[ClientUpdate], k: int) -> np.ndarray:
    return coordinate_trimmed_mean(_matrix(_ordered(updates)), k)


def median_aggregate(updates: Sequence[ClientUpdate]) -> np.ndarray:
    return coordinate_median(_matrix(_ordered(updates)))


def clip_to_norm(v: np.ndarray, bound: float) -> np.ndarray:
    """Scale ``v`` by min(1, bound / ||v||)."""
    norm = float(np.linalg.norm(v))
    if norm > bound:
        return v * (bound / norm)
    return v


def norm_bound_aggregate(global_values, updates: Sequence[ClientUpdate], p: float) -> np.ndarray:
    if not p > 0:
        raise ValueError("norm bound p must be positive")
    g = np.asarray(global_values, dtype=np.float64)
    deltas = [clip_to_norm(u.values - g, p) for u in _ordered(updates)]
    return g + np.mean(deltas, axis=0)


def crfl_aggregate(
    global_values,
    updates: Sequence[ClientUpdate],
    rho: float,
    sigma: float,
    rng: np.random.Generator,
    clip_target: str = "update",
) -> np.ndarray:
    """Average, clip to norm rho, then add N(0, sigma^2) noise to every coordinate.

    ``clip_target='update'`` clips the aggregate change from the current global
    model; ``'model'`` clips the averaged parameters themselves.
    """
    if not rho > 0 or sigma < 0:
        raise ValueError("rho must be > 0 and sigma >= 0")
    g = np.asarray(global_values, dtype=np.float64)
    w = fedavg(updates)
    if clip_target == "update":
        w = g + clip_to_norm(w - g, rho)
    elif clip_target == "model":
        w = clip_to_norm(w, rho)
    else:
        raise ValueError(f"unknown clip target {clip_target!r}")
    if sigma > 0:
        w = w + sigma * rng.standard_normal(w.shape[0])
    return w


def _pairwise_sq(mat: np.ndarray) -> np.ndarray:
    diff = mat[:, None, :] - mat[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def krum_scores(mat: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances to the n - f - 2 nearest other points.

    For pools too small for that count (Bulyan's last picks), at least one
    neighbour is used when another point exists.
    """
    n = mat.shape[0]
    if n == 1:
        return np.zeros(1)
    k = min(max(n - f - 2, 1), n - 1)
    d2 = _pairwise_sq(mat)
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(d2[i], i))
        scores[i] = others[:k].sum()
    return scores


def krum_select(
    updates: Sequence[ClientUpdate], f: int, m: int = 1
) -> tuple[np.ndarray, AggregationAudit]:
    ups = _ordered(updates)
    n = len(ups)
    if n < f + 3:
        raise ValueError(f"Krum needs n >= f + 3 (n={n}, f={f})")
    if m < 1:
        raise ValueError("Krum selection count must be >= 1")
    mat = _matrix(ups)
    scores = krum_scores(mat, f)
    # stable sort keeps lower ids first on equal scores
    chosen = sorted(np.argsort(scores, kind="stable")[: min(m, n)].tolist())
    audit = AggregationAudit(
        kept_ids=[ups[i].client_id for i in chosen],
        removed_ids=[ups[i].client_id for i in range(n) if i not in chosen],
        scores={u.client_id: float(s) for u, s in zip(ups, scores)},
    )
    return mat[chosen].mean(axis=0), audit


def bulyan_aggregate(updates: Sequence[ClientUpdate], f: int) -> tuple[np.ndarray, AggregationAudit]:
    """Krum-based selection of n - 2f updates, then per-coordinate averaging of
    the n - 4f values closest to the coordinate median."""
    ups = _ordered(updates)
    n = len(ups)
    if f < 0 or n < 4 * f + 3:
        raise ValueError("Bulyan infeasible")
    theta = n - 2 * f
    beta = theta - 2 * f
    mat = _matrix(ups)
    pool = list(range(n))
    picked = []
    while len(picked) < theta:
        scores = krum_scores(mat[pool], f)
        best = int(np.argmin(scores))
        picked.append(pool.pop(best))
    picked.sort()
    sel = mat[picked]
    med = np.median(sel, axis=0)
    closest = np.argsort(np.abs(sel - med), axis=0, kind="stable")[:beta]
    out = np.take_along_axis(sel, closest, axis=0).mean(axis=0)
    audit = AggregationAudit(
        kept_ids=[ups[i].client_id for i in picked],
        removed_ids=[ups[i].client_id for i in range(n) if i not in picked],
    )
    return out, audit


def rfa_aggregate(updates: Sequence[ClientUpdate], weights=None, **solver) -> np.ndarray:
    ups = _ordered(updates)
    if weights is not None:
        by_id = dict(zip([u.client_id for u in updates], weights))
        weights = [by_id[u.client_id] for u in ups]
    return geometric_median(_matrix(ups), weights, **solver)


def rlr_aggregate(global_values, updates: Sequence[ClientUpdate], theta: int, eta: float) -> np.ndarray:
    """Per coordinate, use +eta when |sum of update signs| >= theta, else -eta."""
    if theta < 0:
        raise ValueError("theta must be >= 0")
    g = np.asarray(global_values, dtype=np.float64)
    deltas = _matrix(_ordered(updates)) - g
    agreement = np.abs(np.sign(deltas).sum(axis=0))
    rate = np.where(agreement >= theta, eta, -eta)
    return g + rate * deltas.mean(axis=0)


def bucket_aggregate(
    updates: Sequence[ClientUpdate], size: int, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Shuffle, average within buckets of ``size``, trimmed-mean across buckets."""
    if size < 1:
        raise ValueError("bucket size must be >= 1")
    ups = _ordered(updates)
    mat = _matrix(ups)
    perm = rng.permutation(len(ups))
    means = [mat[perm[i:i + size]].mean(axis=0) for i in range(0, len(ups), size)]
    return coordinate_trimmed_mean(np.stack(means), k)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def fltrust_combine(global_values, updates: Sequence[ClientUpdate], server_delta) -> tuple[np.ndarray, AggregationAudit]:
    """Trust-weighted mean of updates rescaled to the server update's norm."""
    g = np.asarray(global_values, dtype=np.float64)
    d0 = np.asarray(server_delta, dtype=np.float64)
    ups = _ordered(updates)
    audit = AggregationAudit(kept_ids=[], removed_ids=[])
    n0 = float(np.linalg.norm(d0))
    if n0 == 0.0:
        audit.kept_ids = [u.client_id for u in ups]
        audit.notes.append("server update has zero norm; global unchanged")
        return g.copy(), audit
    total = np.zeros_like(g)
    weight = 0.0
    for u in ups:
        d = u.values - g
        ts = max(0.0, _cosine(d, d0))
        audit.scores[u.client_id] = ts
        nd = float(np.linalg.norm(d))
        if ts > 0 and nd > 0:
            total += ts * d * (n0 / nd)
            weight += ts
            audit.kept_ids.append(u.client_id)
        else:
            audit.removed_ids.append(u.client_id)
    if weight == 0.0:
        audit.notes.append("all trust scores zero; global unchanged")
        return g.copy(), audit
    return g + total / weight, audit


def fltrust_aggregate(
    global_values,
    updates: Sequence[ClientUpdate],
    root_data: Dataset,
    arch: MlpArch,
    steps: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, AggregationAudit]:
    if root_data is None or len(root_data) == 0:
        raise ValueError("FLTrust needs a non-empty root dataset")
    g = np.asarray(global_values, dtype=np.float64)
    server = sgd_local_train(MlpModel.from_values(arch, g), root_data.X, root_data.y, steps, lr, batch_size, rng)
    return fltrust_combine(g, updates, server.values - g)


def _accuracy(arch: MlpArch, values: np.ndarray, data: Dataset) -> float:
    return float(np.mean(predict(MlpModel.from_values(arch, values), data.X) == data.y))


def roni_aggregate(
    updates: Sequence[ClientUpdate],
    validation: Dataset,
    arch: MlpArch,
    remove_r: int,
) -> tuple[np.ndarray, AggregationAudit]:
    """Remove the ``remove_r`` clients whose inclusion costs the most validation accuracy.

    impact_i = acc(mean without i) - acc(mean with everyone); ties remove the
    lower id first.
    """
    ups = _ordered(updates)
    n = len(ups)
    if validation is None or len(validation) == 0:
        raise ValueError("RONI needs a non-empty validation set")
    if not 0 <= remove_r < n:
        raise ValueError("RONI remove_r must satisfy 0 <= r < n")
    mat = _matrix(ups)
    if remove_r == 0:
        return mat.mean(axis=0), AggregationAudit(kept_ids=[u.client_id for u in ups])
    base = _accuracy(arch, mat.mean(axis=0), validation)
    impacts = []
    for i in range(n):
        without = np.delete(mat, i, axis=0).mean(axis=0) if n > 1 else mat[0]
        impacts.append(_accuracy(arch, without, validation) - base)
    order = sorted(range(n), key=lambda i: (-impacts[i], ups[i].client_id))
    removed = set(order[:remove_r])
    kept = [i for i in range(n) if i not in removed]
    audit = AggregationAudit(
        kept_ids=[ups[i].client_id for i in kept],
        removed_ids=sorted(ups[i].client_id for i in removed),
        scores={u.client_id: float(v) for u, v in zip(ups, impacts)},
    )
    return mat[kept].mean(axis=0), audit


def aggregate(
    spec: DefenseSpec,
    global_values: np.ndarray,
    updates: Sequence[ClientUpdate],
    res: ServerResources,
) -> tuple[np.ndarray, AggregationAudit]:
    """Dispatch to the rule named by ``spec``; rules without a filter keep everyone."""
    p = spec.params
    kind = spec.kind
    everyone = AggregationAudit(kept_ids=sorted(u.client_id for u in updates))
    g = np.asarray(global_values, dtype=np.float64)
    if kind == "fedavg":
        return fedavg(updates), everyone
    if kind == "fedgram":
        return fedgram_aggregate(g, updates, res.aux, res.arch, p["C"], p["then"])
    if kind == "trimmed_mean":
        k = min(p["k"], (len(updates) - 1) // 2)
        return trimmed_mean_aggregate(updates, k), everyone
    if kind == "median":
        return median_aggregate(updates), everyone
    if kind == "norm_bound":
        return norm_bound_aggregate(g, updates, p["p"]), everyone
    if kind == "crfl":
        return crfl_aggregate(g, updates, p["rho"], p["sigma"], res.rng, p["clip_target"]), everyone
    if kind == "krum":
        return krum_select(updates, p["f"], 1)
    if kind == "multi_krum":
        return krum_select(updates, p["f"], p["m"])
    if kind == "bulyan":
        return bulyan_aggregate(updates, p["f"])
    if kind == "rfa":
        return rfa_aggregate(updates, None, tol=p["tol"], max_iter=p["max_iter"], smoothing=p["smoothing"]), everyone
    if kind == "rlr":
        return rlr_aggregate(g, updates, p["theta"], p["eta"]), everyone
    if kind == "bucket":
        n_buckets = math.ceil(len(updates) / p["size"])
        k = min(p["k"], (n_buckets - 1) // 2)
        return bucket_aggregate(updates, p["size"], k, res.rng), everyone
    if kind == "fltrust":
        return fltrust_aggregate(
            g, updates, res.root_data, res.arch, res.local_steps, res.local_lr, res.batch_size, res.rng
        )
    if kind == "roni":
        r = p["remove_r"]
        if r is None:
            r = removal_count(p["C"], len(updates))
        r = min(r, len(updates) - 1)
        return roni_aggregate(updates, res.validation, res.arch, r)
    raise ValueError(f"unknown defense kind {kind!r}")
