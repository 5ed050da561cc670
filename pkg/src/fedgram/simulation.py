"""Round engine: sample clients, run local work and attacks, aggregate, evaluate."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import attacks as atk
from .aggregation import (
    ClientUpdate,
    GramScore,
    ServerResources,
    aggregate,
)
from .config import ExperimentConfig
from .data import (
    AuxiliaryDataset,
    Dataset,
    PartitionConfig,
    balanced_sample,
    build_auxiliary,
    dirichlet_partition,
    load_csv,
    make_blobs,
)
from .mathcore import rng_stream
from .model import MlpModel, forward_logits, init_model, sgd_local_train

log = logging.getLogger(__name__)

# Rules whose audit removes clients; detection metrics are reported only for these.
FILTERING_DEFENSES = {"fedgram", "krum", "multi_krum", "bulyan", "roni", "fltrust"}


@dataclass
class RoundRecord:
    round: int
    test_acc: float
    best_acc: float
    n_sampled: int
    n_malicious_sampled: int
    n_removed: int | None = None
    detect_precision: float | None = None
    detect_recall: float | None = None
    mean_malicious_rank_fraction: float | None = None
    sampled_ids: list[int] = field(default_factory=list)
    removed_ids: list[int] = field(default_factory=list)
    gram_scores: dict[int, float] = field(default_factory=dict)
    malicious_rank_fractions: list[float] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


@dataclass
class Federation:
    """Everything fixed at experiment start."""

    train: Dataset
    test: Dataset
    aux: AuxiliaryDataset
    server_data: Dataset
    clients: list[Dataset]
    malicious: frozenset[int]
    initial: MlpModel
    mpaf_baseline: np.ndarray
    poisoned: dict[int, Dataset] = field(default_factory=dict)


def evaluate(model: MlpModel, test: Dataset) -> float:
    """Share of arg-max-correct predictions (ties go to the lowest class).

    A sample whose logits are not finite counts as a prediction of class 0.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    with np.errstate(all="ignore"):
        logits = forward_logits(model, test.X)
    pred = np.argmax(logits, axis=1)
    pred[~np.all(np.isfinite(logits), axis=1)] = 0
    return float(np.mean(pred == test.y))


def detection_metrics(removed_ids: Sequence[int], sampled: Sequence[ClientUpdate]) -> tuple[float, float]:
    """Precision and recall of the removed set against the ground-truth malicious flags."""
    removed = set(removed_ids)
    ids = {u.client_id for u in sampled}
    if not removed <= ids:
        raise ValueError("removed ids must be a subset of the sampled ids")
    malicious = {u.client_id for u in sampled if u.is_malicious}
    hit = len(removed & malicious)
    precision = hit / len(removed) if removed else 1.0
    recall = hit / len(malicious) if malicious else 1.0
    return precision, recall


def norm_rank_of_malicious(scores: Sequence[GramScore], malicious_ids) -> list[float]:
    """Descending-score rank / n for each malicious client (0.0 = highest score).

    Equal scores rank the lower client id first, matching the removal order.
    """
    mal = set(malicious_ids)
    n = len(scores)
    order = sorted(scores, key=lambda s: (-s.score, s.client_id))
    return [pos / n for pos, s in enumerate(order) if s.client_id in mal]


def sample_clients(seed: int, round_idx: int, num_clients: int, fraction: float) -> list[int]:
    """Clients for one round; depends only on (seed, round)."""
    k = min(num_clients, max(1, math.ceil(fraction * num_clients - 1e-9)))
    rng = rng_stream(seed, "sample", round_idx)
    return sorted(rng.choice(num_clients, size=k, replace=False).tolist())


def malicious_ids(seed: int, num_clients: int, fraction: float) -> frozenset[int]:
    count = math.ceil(fraction * num_clients - 1e-9)
    perm = rng_stream(seed, "malicious").permutation(num_clients)
    return frozenset(int(i) for i in perm[:count])


def setup(cfg: ExperimentConfig) -> Federation:
    arch = cfg.arch
    d = cfg.data
    if d.train_csv is not None:
        train = load_csv(d.train_csv, d.num_classes, d.feature_dim)
        test = load_csv(d.test_csv, d.num_classes, d.feature_dim)
    else:
        train, test = make_blobs(
            d.num_classes, d.feature_dim, d.n_per_class, d.radius, d.noise_sigma, rng_stream(cfg.seed, "data")
        )
    aux, rest = build_auxiliary(train, cfg.aux_coverage, rng_stream(cfg.seed, "aux"))
    # carved out for every defense so client data never depends on the defense
    server_data, rest = balanced_sample(rest, cfg.root_size, rng_stream(cfg.seed, "server-data"))
    part = PartitionConfig(cfg.num_clients, cfg.partition.beta, cfg.partition.min_samples_per_client)
    clients = dirichlet_partition(rest, part, rng_stream(cfg.seed, "partition"))
    bad = malicious_ids(cfg.seed, cfg.num_clients, cfg.malicious_fraction)
    initial = init_model(arch, rng_stream(cfg.seed, "init"))
    baseline = init_model(arch, rng_stream(cfg.seed + 1, "init")).values
    fed = Federation(train, test, aux, server_data, clients, bad, initial, baseline)
    kind = cfg.attack.kind
    for cid in sorted(bad):
        if kind == "label_flip":
            fed.poisoned[cid] = atk.label_flip(clients[cid])
        elif kind == "dynamic_label_flip":
            p = cfg.attack.params
            fed.poisoned[cid] = atk.dynamic_flip(
                clients[cid], arch, p["surrogate_epochs"], p["lr"],
                rng_stream(cfg.seed, "surrogate", cid), cfg.local.batch_size,
            )
    return fed


def _train(cfg: ExperimentConfig, model: MlpModel, data: Dataset, round_idx: int, cid: int, loss="cross_entropy") -> np.ndarray:
    lt = cfg.local
    rng = rng_stream(cfg.seed, "train", round_idx, cid)
    return sgd_local_train(model, data.X, data.y, lt.steps, lt.lr, lt.batch_size, rng, loss=loss).values


def _map(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _local_work(cfg: ExperimentConfig, fed: Federation, global_model: MlpModel, t: int, sampled: list[int]) -> dict[int, np.ndarray]:
    """Honest training for benign clients and data-poisoning / adaptive attackers."""
    kind = cfg.attack.kind

    def work(cid: int):
        if cid in fed.malicious:
            if kind in ("label_flip", "dynamic_label_flip"):
                return cid, _train(cfg, global_model, fed.poisoned[cid], t, cid)
            if kind == "adaptive_uniformity":
                return cid, _train(cfg, global_model, fed.clients[cid], t, cid, loss="uniformity")
            if cfg.attack.is_model_poisoning and cfg.attacker_view == "current_round":
                return cid, None
        return cid, _train(cfg, global_model, fed.clients[cid], t, cid)

    return dict(_map(work, sampled, cfg.workers))


def _craft(cfg: ExperimentConfig, fed: Federation, g: np.ndarray, t: int, mal: list[int], benign_vals: list[np.ndarray], own_vals: dict) -> dict[int, np.ndarray]:
    """Model-poisoning submissions for the malicious clients sampled this round."""
    kind = cfg.attack.kind
    p = cfg.attack.params
    if kind == "mpaf":
        vec = atk.mpaf_craft(g, fed.mpaf_baseline, p["lam"])
        return {cid: vec.copy() for cid in mal}
    if cfg.attacker_view == "current_round" and benign_vals:
        seen = benign_vals
    else:
        seen = [own_vals[cid] for cid in mal]
    view = atk.BenignView(np.stack(seen) - g, g)
    if kind == "lie":
        if p["population"] == "global":
            n, m = cfg.num_clients, len(fed.malicious)
        else:
            n, m = len(benign_vals) + len(mal), len(mal)
        upd = atk.lie_craft(view, n, m)
        return {cid: g + upd for cid in mal}
    if kind == "fang":
        return {cid: g + atk.fang_craft(view, p["b"], rng_stream(cfg.seed, "fang", t, cid)) for cid in mal}
    if kind in ("minmax", "minsum"):
        if view.updates.shape[0] < 2:
            # a lone observed update gives no spread to hide in
            return {cid: g + view.updates[0] for cid in mal}
        upd, _ = atk.minmax_minsum_craft(view, kind, p["gamma_hi"], p["tau"], p["perturbation"])
        return {cid: g + upd for cid in mal}
    raise ValueError(f"not a model-poisoning attack: {kind!r}")


def run_round(cfg: ExperimentConfig, fed: Federation, global_model: MlpModel, t: int, best: float) -> tuple[MlpModel, RoundRecord]:
    sampled = sample_clients(cfg.seed, t, cfg.num_clients, cfg.sample_fraction)
    g = global_model.values
    if not np.all(np.isfinite(g)):
        # a diverged global model stays diverged; skip the (meaningless) local work
        acc = evaluate(global_model, fed.test)
        n_mal = sum(1 for cid in sampled if cid in fed.malicious)
        rec = RoundRecord(t, acc, max(best, acc), len(sampled), n_mal, sampled_ids=list(sampled), notes=["diverged"])
        return global_model, rec
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _run_live_round(cfg, fed, global_model, t, best, sampled)


def _run_live_round(cfg, fed, global_model, t, best, sampled):
    g = global_model.values
    trained = _local_work(cfg, fed, global_model, t, sampled)
    mal = [cid for cid in sampled if cid in fed.malicious]
    submissions = dict(trained)
    if cfg.attack.is_model_poisoning and mal:
        benign_vals = [trained[cid] for cid in sampled if cid not in fed.malicious]
        own = {cid: trained[cid] for cid in mal if trained[cid] is not None}
        if cfg.attacker_view == "current_round" and not benign_vals:
            own = {cid: _train(cfg, global_model, fed.clients[cid], t, cid) for cid in mal}
        submissions.update(_craft(cfg, fed, g, t, mal, benign_vals, own))
    updates = [ClientUpdate(cid, submissions[cid], cid in fed.malicious) for cid in sampled]

    res = ServerResources(
        arch=cfg.arch,
        aux=fed.aux,
        root_data=fed.server_data,
        validation=fed.server_data,
        local_steps=cfg.local.steps,
        local_lr=cfg.local.lr,
        batch_size=cfg.local.batch_size,
        rng=rng_stream(cfg.seed, "server", t),
    )
    new_values, audit = aggregate(cfg.defense, g, updates, res)
    new_model = global_model.with_values(new_values)
    acc = evaluate(new_model, fed.test)
    rec = RoundRecord(
        round=t,
        test_acc=acc,
        best_acc=max(best, acc),
        n_sampled=len(sampled),
        n_malicious_sampled=len(mal),
        sampled_ids=list(sampled),
        notes=list(audit.notes),
    )
    if not np.all(np.isfinite(new_values)):
        rec.notes.append("diverged")
    if cfg.defense.kind in FILTERING_DEFENSES:
        rec.removed_ids = sorted(audit.removed_ids)
        rec.n_removed = len(audit.removed_ids)
        rec.detect_precision, rec.detect_recall = detection_metrics(audit.removed_ids, updates)
    if cfg.defense.kind == "fedgram":
        rec.gram_scores = dict(audit.scores)
        scores = [GramScore(cid, s) for cid, s in audit.scores.items()]
        rec.malicious_rank_fractions = norm_rank_of_malicious(scores, mal)
        if rec.malicious_rank_fractions:
            rec.mean_malicious_rank_fraction = float(np.mean(rec.malicious_rank_fractions))
    return new_model, rec


def run_experiment(cfg: ExperimentConfig, on_round: Callable[[RoundRecord], None] | None = None) -> list[RoundRecord]:
    """Run every round and return the per-round records (deterministic in ``cfg``)."""
    fed = setup(cfg)
    model = fed.initial
    records = []
    best = -math.inf
    for t in range(1, cfg.rounds + 1):
        try:
            model, rec = run_round(cfg, fed, model, t, best)
        except Exception as exc:
            raise RuntimeError(f"round {t}: {exc}") from exc
        best = rec.best_acc
        records.append(rec)
        log.debug("round %d acc=%.4f best=%.4f", t, rec.test_acc, rec.best_acc)
        if on_round is not None:
            on_round(rec)
    return records
