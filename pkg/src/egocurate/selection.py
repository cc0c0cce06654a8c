"""Likelihood-guided video selection, pruning and replacement.

The selection loop fits one KDE per weighted property on the current
source set, scores every pool video, turns the scores into sampling
probabilities (softmax of +/- log-likelihood over a temperature), mixes
the per-property probabilities with the configured weights and draws a
batch of ``k`` videos. The batch joins the source set, the models are
refitted, and the loop repeats until the source set reaches the target
size or the pool runs dry.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import DEFAULT_WEIGHTS, PROPERTIES, DataError, kde
from .manifest import Manifest, sample_class_balanced, underpopulated_classes
from .props import property_matrix

log = logging.getLogger(__name__)

MODES = ("performance", "balancedness")
SEMANTIC_COMPONENTS = 32


@dataclass(frozen=True)
class SelectionConfig:
    mode: str = "balancedness"
    tau: float = 1.0
    k: int = 1
    m: int = 1
    weights: tuple = DEFAULT_WEIGHTS
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise DataError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.tau > 0:
            raise DataError(f"tau must be > 0, got {self.tau}")
        if self.k < 1 or self.m < 1:
            raise DataError("k and m must be positive")
        if self.k > self.m:
            raise DataError(f"k ({self.k}) must not exceed m ({self.m})")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(PROPERTIES),) or np.any(w < 0) or not np.any(w > 0):
            raise DataError(f"weights must be {len(PROPERTIES)} non-negative values, not all zero")
        object.__setattr__(self, "weights", tuple(float(v) for v in w))

    def as_dict(self) -> dict:
        return {"mode": self.mode, "tau": self.tau, "k": self.k, "m": self.m,
                "weights": list(self.weights), "seed": self.seed}


@dataclass
class RoundAudit:
    index: int
    refit: bool
    picks: list  # (id, unified probability at draw time of the round)

    def to_dict(self) -> dict:
        return {"round": self.index, "refit": self.refit,
                "chosen": [{"id": i, "p": p} for i, p in self.picks]}


@dataclass
class SelectionResult:
    chosen: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    final_source_size: int = 0


def sampling_probabilities(log_liks, mode: str, tau: float) -> np.ndarray:
    """Softmax of ``+log_liks / tau`` (performance) or ``-log_liks / tau``."""
    if not tau > 0:
        raise DataError(f"tau must be > 0, got {tau}")
    if mode not in MODES:
        raise DataError(f"mode must be one of {MODES}, got {mode!r}")
    q = np.asarray(log_liks, dtype=np.float64)
    if q.size == 0:
        return q.copy()
    if not np.all(np.isfinite(q)):
        raise DataError("log-likelihoods must be finite")
    z = q / tau if mode == "performance" else -q / tau
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


# --------------------------------------------------------------------------
# Property encoding
# --------------------------------------------------------------------------

@dataclass
class _Encoder:
    """Per-property transform fitted on a reference table.

    Semantic vectors are first projected onto at most 32 principal axes;
    every property is then z-scored per dimension with the reference
    statistics.
    """

    name: str
    projection: kde.Projection | None
    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, name, values):
        if values.shape[0] < 2:
            raise DataError(f"property {name!r}: need at least 2 reference records, got {values.shape[0]}")
        proj = None
        if name == "semantic":
            ncomp = max(1, min(SEMANTIC_COMPONENTS, values.shape[1], values.shape[0] - 1))
            proj = kde.pca_projection(values, ncomp)
            values = proj.apply(values)
        center = values.mean(axis=0)
        sd = values.std(axis=0)
        scale = np.where(sd > kde.SIGMA_FLOOR, sd, 1.0)
        return cls(name, proj, center, scale)

    def encode(self, values, widths=None):
        if self.projection is not None:
            values = self.projection.apply(values)
        z = (values - self.center) / self.scale
        if widths is None:
            return z, None
        return z, np.asarray(widths) / self.scale[0]

    def model(self, values, widths=None):
        z, w = self.encode(values, widths)
        if self.name == "blur":
            return kde.fit_blurriness(z[:, 0], w)
        return kde.fit(z)


def _active(weights):
    return [(name, w) for name, w in zip(PROPERTIES, weights) if w > 0]


def _unified_probabilities(models, pool, tau, mode, weights, workers):
    """Weighted mix of per-property probability vectors over ``pool``.

    Pool records lacking a property get the uniform share ``1/|pool|`` for
    that property so the vector still sums to one.
    """
    n = len(pool)
    active = _active(weights)
    total_w = sum(w for _, w in active)
    unified = np.zeros(n)
    for name, w in active:
        enc, model = models[name]
        mask, values, widths = property_matrix(pool, name)
        probs = np.full(n, 1.0 / n)
        if mask.any():
            z, _ = enc.encode(values, widths)
            ll = kde.log_density_many(model, z, workers)
            probs[mask] = sampling_probabilities(ll, mode, tau) * (mask.sum() / n)
        unified += (w / total_w) * probs
    return unified


def _fit_models(encoders, source, weights):
    models = {}
    for name, _ in _active(weights):
        mask, values, widths = property_matrix(source, name)
        if mask.sum() < (1 if name == "blur" else 2):
            raise DataError(f"property {name!r}: too few source records carry it to fit a KDE")
        models[name] = (encoders[name], encoders[name].model(values, widths))
    return models


def _fit_encoders(table, weights):
    encoders = {}
    for name, _ in _active(weights):
        mask, values, _ = property_matrix(table, name)
        if not mask.any():
            raise DataError(f"property {name!r} is weighted but absent from the data")
        encoders[name] = _Encoder.fit(name, values)
    return encoders


def _draw(rng, probs, count):
    w = np.asarray(probs, dtype=np.float64).copy()
    picks = []
    for _ in range(count):
        total = w.sum()
        if total > 0:
            cdf = np.cumsum(w)
            idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            idx = min(idx, w.size - 1)
            while w[idx] <= 0:
                idx -= 1
        else:
            # every remaining weight underflowed: fall back to uniform
            live = np.setdiff1d(np.arange(w.size), picks)
            idx = int(live[int(rng.integers(live.size))])
        picks.append(idx)
        w[idx] = 0.0
    return picks


def _sorted_table(table):
    out = sorted(table, key=lambda ps: ps.id)
    for a, b in zip(out, out[1:]):
        if a.id == b.id:
            raise DataError(f"duplicate id {a.id!r}")
    return out


def select(source, pool, config: SelectionConfig, workers: int = 1) -> SelectionResult:
    """Grow ``source`` towards ``config.m`` records with draws from ``pool``.

    Both tables are processed in id order, so the result depends only on
    their contents and the seed. Per-property transforms (semantic PCA and
    z-scoring) are fitted once on the initial source set.
    """
    source = _sorted_table(source)
    pool = _sorted_table(pool)
    overlap = {p.id for p in source} & {p.id for p in pool}
    if overlap:
        raise DataError(f"pool overlaps source on ids {sorted(overlap)[:5]}")
    rng = np.random.default_rng(config.seed)
    result = SelectionResult(final_source_size=len(source))
    if not pool or len(source) >= config.m:
        return result

    encoders = _fit_encoders(source, config.weights)
    current = list(source)
    remaining = list(pool)
    rnd = 0
    while len(current) < config.m and remaining:
        models = _fit_models(encoders, current, config.weights)
        probs = _unified_probabilities(models, remaining, config.tau, config.mode,
                                       config.weights, workers)
        count = min(config.k, config.m - len(current), len(remaining))
        idx = _draw(rng, probs, count)
        picked = [remaining[i] for i in idx]
        result.rounds.append(RoundAudit(rnd, rnd > 0, [(p.id, float(probs[i])) for p, i in zip(picked, idx)]))
        result.chosen.extend(p.id for p in picked)
        taken = set(idx)
        current.extend(picked)
        remaining = [p for i, p in enumerate(remaining) if i not in taken]
        log.info("round %d: drew %d, source size %d, pool left %d", rnd, count, len(current), len(remaining))
        rnd += 1
    result.final_source_size = len(current)
    return result


def round_probabilities(source, pool, config: SelectionConfig, workers: int = 1) -> dict:
    """First-round unified probabilities keyed by pool id (no drawing)."""
    source = _sorted_table(source)
    pool = _sorted_table(pool)
    encoders = _fit_encoders(source, config.weights)
    models = _fit_models(encoders, source, config.weights)
    probs = _unified_probabilities(models, pool, config.tau, config.mode, config.weights, workers)
    return {p.id: float(v) for p, v in zip(pool, probs)}


def removal_count(fraction: float, n: int) -> int:
    # tolerance keeps e.g. 0.7 * 10 = 7.000000000000001 from rounding up to 8
    return int(math.ceil(fraction * n - 1e-9))


def prune_scores(table, weights=DEFAULT_WEIGHTS, tau: float = 1.0, workers: int = 1) -> dict:
    """Redundancy score per id: weighted softmax of leave-one-out log-likelihood."""
    table = _sorted_table(table)
    encoders = _fit_encoders(table, weights)
    n = len(table)
    active = _active(weights)
    total_w = sum(w for _, w in active)
    score = np.zeros(n)
    for name, w in active:
        mask, values, widths = property_matrix(table, name)
        probs = np.full(n, 1.0 / n)
        if mask.sum() >= 3 or (name == "blur" and mask.sum() >= 2):
            model = encoders[name].model(values, widths)
            ll = kde.loo_log_density(model, workers)
            probs[mask] = sampling_probabilities(ll, "performance", tau) * (mask.sum() / n)
        elif mask.any():
            raise DataError(f"property {name!r}: too few records for leave-one-out scoring")
        score += (w / total_w) * probs
    return {ps.id: float(s) for ps, s in zip(table, score)}


def prune(table, fraction: float, weights=DEFAULT_WEIGHTS, seed: int = 0,
          tau: float = 1.0, workers: int = 1) -> list:
    """Ids of the ``ceil(fraction * n)`` most redundant records.

    Redundancy is high leave-one-out likelihood. Ties go to the smaller id.
    ``seed`` is accepted for interface symmetry; pruning draws nothing.
    """
    if not 0.0 < fraction < 1.0:
        raise DataError(f"fraction must be in (0, 1), got {fraction}")
    scores = prune_scores(table, weights, tau, workers)
    count = removal_count(fraction, len(scores))
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [i for i, _ in ranked[:count]]


def replace(table, pool, fraction: float, config: SelectionConfig, workers: int = 1):
    """Prune ``fraction`` of ``table`` and refill the same count from ``pool``.

    Returns ``(removed_ids, added_ids)``.
    """
    if not pool:
        raise DataError("replacement pool is empty")
    removed = prune(table, fraction, config.weights, config.seed, config.tau, workers)
    if len(pool) < len(removed):
        raise DataError(f"pool has {len(pool)} records but {len(removed)} must be replaced")
    gone = set(removed)
    kept = [ps for ps in table if ps.id not in gone]
    cfg = SelectionConfig(config.mode, config.tau, min(config.k, len(removed)),
                          len(kept) + len(removed), config.weights, config.seed)
    added = select(kept, pool, cfg, workers).chosen
    return removed, added


def build_dataset(manifest: Manifest, props, role: str, target_size: int, per_class_base: int,
                  config: SelectionConfig, base_ids=None, workers: int = 1) -> Manifest:
    """Class-balanced base plus balancedness-mode selection up to ``target_size``.

    ``base_ids`` extends an existing (smaller) set instead of drawing a new
    base, so larger sets nest around smaller ones.
    """
    if role not in ("pretrain", "test"):
        raise DataError(f"role must be 'pretrain' or 'test', got {role!r}")
    if not manifest.classes.entries:
        raise DataError("a merged class table is required")
    if base_ids is None:
        base = sample_class_balanced(manifest, per_class_base, config.seed)
    else:
        base = list(base_ids)
    if target_size < len(base):
        raise DataError(f"target size {target_size} is below the base size {len(base)}")
    records = manifest.by_id()
    missing = [i for i in base if i not in records]
    if missing:
        raise DataError(f"base ids not in manifest: {missing[:5]}")

    cfg = SelectionConfig("balancedness", config.tau, min(config.k, target_size), target_size,
                          config.weights, config.seed)
    chosen = []
    if target_size > len(base):
        by_id = {ps.id: ps for ps in props}
        base_set = set(base)
        absent = [r.id for r in manifest.records if r.id not in by_id]
        if absent:
            raise DataError(f"{len(absent)} manifest records have no property set, e.g. {absent[:3]}")
        source = [by_id[i] for i in base]
        pool = [by_id[r.id] for r in manifest.records if r.id not in base_set]
        chosen = select(source, pool, cfg, workers).chosen

    prov = {
        "role": role,
        "target_size": target_size,
        "per_class_base": per_class_base,
        "base_size": len(base),
        "extended_from_existing": base_ids is not None,
        "selection": cfg.as_dict(),
        "underpopulated_classes": {str(k): v for k, v in underpopulated_classes(manifest, per_class_base).items()}
        if base_ids is None else {},
        "semantic_pca_components": SEMANTIC_COMPONENTS,
        "zscore": "per-dimension, initial source statistics",
    }
    out = [records[i] for i in base] + [records[i] for i in chosen]
    return Manifest(out, manifest.classes, prov)
