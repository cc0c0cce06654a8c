"""Diagonal-Gaussian kernel density estimation.

Two flavours are supported:

* ``shared``: one bandwidth per dimension, chosen with the multivariate
  Silverman rule ``h_i = sigma_i * (4 / ((d + 2) n)) ** (1 / (d + 4))``.
* ``per_point``: one isotropic bandwidth per data point. Used for
  blurriness, where each video contributes its frame-level standard
  deviation as the kernel width.

All evaluation happens in log space with a max-shifted log-sum-exp so the
density never underflows to ``-inf`` for finite inputs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import DataError
from ._parallel import ordered_map

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6
_LOG_2PI = math.log(2.0 * math.pi)
# Upper bound on the (queries x points) block materialised per chunk.
_BLOCK_ELEMENTS = 1 << 18  # ~2 MB of float64 per block; stays in cache


@dataclass(frozen=True)
class Projection:
    """Affine map applied to raw vectors before density evaluation."""

    mean: np.ndarray
    components: np.ndarray  # (d_out, d_in)

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (x - self.mean) @ self.components.T


@dataclass(frozen=True)
class DensityModel:
    points: np.ndarray
    bandwidths: np.ndarray
    mode: str = "shared"
    warnings: tuple = ()
    projection: Projection | None = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def silverman_factor(n: int, d: int) -> float:
    return (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def _as_matrix(points):
    pts = np.array(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise DataError(f"expected an n x d matrix, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise DataError("points contain non-finite values")
    return pts


def fit(points, projection: Projection | None = None) -> DensityModel:
    """Fit a shared-bandwidth model with the Silverman rule.

    Population standard deviations are used; dimensions whose spread falls
    below ``SIGMA_FLOOR`` are floored and reported in ``model.warnings``.
    """
    pts = _as_matrix(points)
    n, d = pts.shape
    if n < 2:
        raise DataError(f"shared-bandwidth KDE needs at least 2 points, got {n}")
    sigma = pts.std(axis=0)
    notes = []
    low = sigma < SIGMA_FLOOR
    if np.any(low):
        dims = np.flatnonzero(low).tolist()
        notes.append(f"sigma floor {SIGMA_FLOOR:g} applied to dimensions {dims}")
        log.warning(notes[-1])
        sigma = np.where(low, SIGMA_FLOOR, sigma)
    h = sigma * silverman_factor(n, d)
    pts.setflags(write=False)
    h.setflags(write=False)
    return DensityModel(pts, h, "shared", tuple(notes), projection)


def fit_blurriness(means, stds) -> DensityModel:
    """Per-point model: kernel ``j`` sits at ``means[j]`` with width ``stds[j]``."""
    mu = np.asarray(means, dtype=np.float64).reshape(-1)
    sd = np.asarray(stds, dtype=np.float64).reshape(-1)
    if mu.shape != sd.shape:
        raise DataError(f"means/stds length mismatch: {mu.size} vs {sd.size}")
    if mu.size < 1:
        raise DataError("per-point KDE needs at least 1 point")
    if np.any(sd < 0) or not np.all(np.isfinite(sd)) or not np.all(np.isfinite(mu)):
        raise DataError("stds must be finite and non-negative")
    notes = []
    low = sd < SIGMA_FLOOR
    if np.any(low):
        notes.append(f"sigma floor {SIGMA_FLOOR:g} applied to {int(low.sum())} points")
        log.warning(notes[-1])
        sd = np.where(low, SIGMA_FLOOR, sd)
    pts = mu[:, None]
    pts.setflags(write=False)
    sd.setflags(write=False)
    return DensityModel(pts, sd, "per_point", tuple(notes))


def _chunk_rows(n_points, dim):
    return max(1, _BLOCK_ELEMENTS // max(1, n_points * max(1, dim)))


def _block_log_density(model, xq, exclude=None):
    """Log density for a block of already-projected queries ``xq`` (q, d).

    ``exclude`` holds, per query row, the index of a kernel to drop
    (leave-one-out); the normaliser then uses ``n - 1``.
    """
    pts = model.points
    n, d = pts.shape
    q = xq.shape[0]
    # sq holds the positive half squared distance; the exponent is -sq
    if model.mode == "shared":
        scale = math.sqrt(0.5) / model.bandwidths
        sq = None
        for i in range(d):
            diff = np.subtract.outer(xq[:, i] * scale[i], pts[:, i] * scale[i])
            diff *= diff
            sq = diff if sq is None else np.add(sq, diff, out=sq)
        const = -float(np.sum(np.log(model.bandwidths))) - 0.5 * d * _LOG_2PI
    else:
        h = model.bandwidths
        sq = None
        for i in range(d):
            diff = np.subtract.outer(xq[:, i], pts[:, i])
            diff *= diff
            sq = diff if sq is None else np.add(sq, diff, out=sq)
        sq *= 0.5 / (h * h)
        sq += d * np.log(h)
        const = -0.5 * d * _LOG_2PI
    count = n
    if exclude is not None:
        sq[np.arange(q), exclude] = np.inf
        count = n - 1
    low = sq.min(axis=1)
    np.subtract(low[:, None], sq, out=sq)
    np.exp(sq, out=sq)
    return np.log(sq.sum(axis=1)) - low + const - math.log(count)


def _queries(model, x):
    if model.projection is not None:
        x = model.projection.apply(x)
    xq = np.array(x, dtype=np.float64)
    if xq.ndim == 1:
        xq = xq[None, :] if model.dim > 1 or xq.size == 1 else xq[:, None]
    if xq.ndim != 2 or xq.shape[1] != model.dim:
        raise DataError(f"query dimension {xq.shape[-1]} does not match model dimension {model.dim}")
    return xq


def log_density_many(model: DensityModel, x, workers: int = 1) -> np.ndarray:
    """Log density at every row of ``x``.

    Chunk boundaries depend only on the model size, so the result is
    bit-identical for any ``workers``.
    """
    xq = _queries(model, x)
    if xq.shape[0] == 0:
        return np.zeros(0)
    step = _chunk_rows(model.n, model.dim)
    starts = range(0, xq.shape[0], step)
    parts = ordered_map(lambda s: _block_log_density(model, xq[s:s + step]), starts, workers)
    return np.concatenate(parts)


def log_density(model: DensityModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    raw_dim = model.projection.mean.size if model.projection is not None else model.dim
    if x.reshape(-1).size != raw_dim:
        raise DataError(f"query dimension {x.size} does not match model dimension {raw_dim}")
    return float(log_density_many(model, x.reshape(1, -1))[0])


def loo_log_density(model: DensityModel, workers: int = 1) -> np.ndarray:
    """Leave-one-out log density of each model point (own kernel excluded)."""
    if model.n < 2:
        raise DataError("leave-one-out evaluation needs at least 2 points")
    pts = np.asarray(model.points)
    step = _chunk_rows(model.n, model.dim)

    def block(s):
        rows = np.arange(s, min(s + step, model.n))
        return _block_log_density(model, pts[rows], exclude=rows)

    return np.concatenate(ordered_map(block, range(0, model.n, step), workers))


def ego_similarity(model_a: DensityModel, set_b, workers: int = 1) -> float:
    """Log of the likelihood of every member of ``set_b`` under ``model_a``.

    The product over members becomes a sum of log densities; an empty set
    has similarity 0 (log of the empty product).
    """
    b = np.asarray(set_b, dtype=np.float64)
    if b.size == 0:
        return 0.0
    values = log_density_many(model_a, b, workers)
    return float(math.fsum(values.tolist()))


def pca_projection(x, n_components: int) -> Projection:
    """Projection onto the leading principal axes of ``x``.

    Component signs are fixed so the largest-magnitude loading is positive.
    """
    x = _as_matrix(x)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:n_components]
    comps = vecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return Projection(mean, comps)
