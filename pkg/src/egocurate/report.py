"""Figures and their numeric CSV twins for dataset-level property analysis.

Every figure is an SVG written next to a CSV carrying the numbers drawn in
it. Output layout for :func:`emit_report`::

    out/polar/<dataset>.{svg,csv}
    out/heatmap/<dataset>_hand.{svg,csv}, <dataset>_object.{svg,csv}
    out/blur/<dataset>.{svg,csv}
    out/pose/<dataset>.{svg,csv}
    out/similarity/similarity.{svg,csv}, unified.csv
    out/pca/semantic.{svg,csv}, semantic_summary.csv
    out/manifest.json
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import PROPERTIES, DataError, kde
from .plotting import new_figure, save, style
from .props import (
    HEATMAP_SIZE,
    MOTION_BINS,
    CameraMotionSummary,
    LocationSummary,
    heatmap_cell,
    property_matrix,
)
from .selection import SEMANTIC_COMPONENTS

POSE_KEYPOINTS = (0, 9, 10, 11, 12)  # wrist, then middle-finger joints to the tip
BLUR_BINS = 30


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return repr(float(x))


def _twin(path):
    path = Path(path)
    return path.with_suffix(".svg"), path.with_suffix(".csv")


def _check_dir(path):
    parent = Path(path).parent
    if not parent.is_dir():
        raise OSError(f"output directory does not exist: {parent}")


# --------------------------------------------------------------------------
# Single-summary figures
# --------------------------------------------------------------------------

def emit_polar_histogram(summary: CameraMotionSummary, path) -> list[Path]:
    """Polar bar chart of a 90-bin motion histogram, scaled to the largest bin."""
    hist = np.asarray(summary.histogram, dtype=np.float64)
    if hist.shape != (MOTION_BINS,):
        raise DataError(f"expected {MOTION_BINS} bins, got {hist.shape}")
    svg, csv_path = _twin(path)
    _check_dir(svg)
    width = 2.0 * math.pi / MOTION_BINS
    starts = np.arange(MOTION_BINS) * width
    top = hist.max()
    radius = hist / top if top > 0 else np.zeros_like(hist)
    _write_csv(csv_path, ["bin_start_angle", "weight", "radius"],
               [(_fmt(a), _fmt(w), _fmt(r)) for a, w, r in zip(starts, hist, radius)])
    with style():
        fig, ax = new_figure(4.0, 4.0, polar=True)
        ax.bar(starts, radius, width=width, align="edge", color="tab:blue", edgecolor="none")
        ax.set_ylim(0, 1)
        ax.set_yticklabels([])
        ax.set_title("camera motion")
        save(fig, svg)
    return [svg, csv_path]


def emit_heatmap(summary: LocationSummary, path, title="location") -> list[Path]:
    """16x16 count grid; the CSV carries raw counts and the drawn intensity."""
    heat = np.asarray(summary.heatmap, dtype=np.float64)
    if heat.shape != (HEATMAP_SIZE, HEATMAP_SIZE):
        raise DataError(f"expected a {HEATMAP_SIZE}x{HEATMAP_SIZE} heatmap")
    svg, csv_path = _twin(path)
    _check_dir(svg)
    top = heat.max()
    intensity = heat / top if top > 0 else np.zeros_like(heat)
    rows = [(r, c, int(heat[r, c]), _fmt(intensity[r, c]))
            for r in range(HEATMAP_SIZE) for c in range(HEATMAP_SIZE)]
    _write_csv(csv_path, ["row", "col", "count", "intensity"], rows)
    with style():
        fig, ax = new_figure(3.2, 3.2)
        ax.imshow(intensity, vmin=0.0, vmax=1.0, extent=(0, 1, 1, 0), interpolation="nearest")
        ax.set_title(title)
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        save(fig, svg)
    return [svg, csv_path]


def emit_blur_distribution(means, path) -> list[Path]:
    """Histogram of per-video mean blurriness with the overall mean marked."""
    v = np.asarray(means, dtype=np.float64)
    if v.size == 0:
        raise DataError("no blurriness values")
    svg, csv_path = _twin(path)
    _check_dir(svg)
    counts, edges = np.histogram(v, bins=BLUR_BINS)
    mu = float(v.mean())
    rows = [(_fmt(lo), _fmt(hi), int(c)) for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    rows.append(("mean", _fmt(mu), int(v.size)))
    _write_csv(csv_path, ["bin_low", "bin_high", "count"], rows)
    with style():
        fig, ax = new_figure()
        ax.stairs(counts, edges, fill=True, color="tab:gray")
        ax.axvline(mu, color="tab:red", lw=1)
        ax.set_xlabel("variance of Laplacian")
        ax.set_ylabel("videos")
        ax.set_title(f"blurriness, mean {mu:.1f}")
        save(fig, svg)
    return [svg, csv_path]


def emit_pose_contours(table, path) -> list[Path]:
    """Per-keypoint location heatmaps for the wrist-to-middle-fingertip chain."""
    _, kp, _ = property_matrix(table, "pose")
    svg, csv_path = _twin(path)
    _check_dir(svg)
    grids = np.zeros((len(POSE_KEYPOINTS), HEATMAP_SIZE, HEATMAP_SIZE))
    for row in kp:
        for g, k in enumerate(POSE_KEYPOINTS):
            r, c = heatmap_cell(row[2 * k], row[2 * k + 1])
            grids[g, r, c] += 1
    rows = [(k, r, c, int(grids[g, r, c]))
            for g, k in enumerate(POSE_KEYPOINTS)
            for r in range(HEATMAP_SIZE) for c in range(HEATMAP_SIZE)]
    _write_csv(csv_path, ["keypoint", "row", "col", "count"], rows)
    centers = (np.arange(HEATMAP_SIZE) + 0.5) / HEATMAP_SIZE
    with style():
        fig, ax = new_figure(3.2, 3.2)
        for g, k in enumerate(POSE_KEYPOINTS):
            top = grids[g].max()
            if top > 0 and np.count_nonzero(grids[g]) > 1:
                ax.contour(centers, centers, grids[g] / top, levels=[0.5], colors=[f"C{g}"])
        ax.set_xlim(0, 1)
        ax.set_ylim(1, 0)
        ax.set_title("hand pose, high-density areas")
        save(fig, svg)
    return [svg, csv_path]


# --------------------------------------------------------------------------
# Dataset aggregates
# --------------------------------------------------------------------------

def aggregate_motion(table) -> CameraMotionSummary:
    hist = np.zeros(MOTION_BINS)
    vectors = []
    sx = sy = 0.0
    pairs = 0
    for ps in table:
        hist += ps.motion.histogram
        vectors.extend(ps.motion.frame_vectors)
        sx += ps.motion.resultant[0] * ps.motion.frame_pair_count
        sy += ps.motion.resultant[1] * ps.motion.frame_pair_count
        pairs += ps.motion.frame_pair_count
    res = (sx / pairs, sy / pairs) if pairs else (0.0, 0.0)
    return CameraMotionSummary(vectors, hist, res, pairs)


def aggregate_locations(table, name) -> LocationSummary:
    heat = np.zeros((HEATMAP_SIZE, HEATMAP_SIZE), dtype=np.int64)
    weighted = np.zeros(4)
    count = 0
    for ps in table:
        loc = getattr(ps, name)
        if loc is None:
            continue
        heat += loc.heatmap
        weighted += loc.kde_vector * loc.detection_count
        count += loc.detection_count
    return LocationSummary(heat, weighted / count if count else weighted, count)


# --------------------------------------------------------------------------
# Cross-dataset similarity
# --------------------------------------------------------------------------

@dataclass
class SimilarityMatrix:
    names: list
    raw: dict  # property -> (N, N) log-similarity, row = fitted dataset
    zscored: dict
    unified: np.ndarray
    most_similar: list = field(default_factory=list)


def _fit_property(name, values, widths):
    if name == "blur":
        return kde.fit_blurriness(values[:, 0], widths)
    return kde.fit(values)


def similarity_matrix(datasets: dict, weights, workers: int = 1) -> SimilarityMatrix:
    """Pairwise log-similarity per property, z-scored and mixed by ``weights``.

    Entry ``[a, b]`` is the log-likelihood of dataset ``b`` under the KDE
    fitted on dataset ``a``. Semantic vectors are first projected onto the
    principal axes of the union of all datasets.
    """
    names = list(datasets)
    if len(names) < 2:
        raise DataError("similarity needs at least two datasets")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(PROPERTIES),) or np.any(w < 0) or not np.any(w > 0):
        raise DataError(f"weights must be {len(PROPERTIES)} non-negative values, not all zero")
    N = len(names)
    raw, zs = {}, {}
    unified = np.zeros((N, N))
    for prop, weight in zip(PROPERTIES, w):
        if weight == 0:
            continue
        data = {}
        for ds in names:
            mask, values, widths = property_matrix(datasets[ds], prop)
            if mask.sum() < (1 if prop == "blur" else 2):
                raise DataError(f"dataset {ds!r} has no usable {prop!r} data for a model")
            data[ds] = (values, widths)
        if prop == "semantic":
            union = np.vstack([v for v, _ in data.values()])
            proj = kde.pca_projection(union, max(1, min(SEMANTIC_COMPONENTS, union.shape[1], union.shape[0] - 1)))
            data = {ds: (proj.apply(v), wd) for ds, (v, wd) in data.items()}
        mat = np.zeros((N, N))
        for a, da in enumerate(names):
            model = _fit_property(prop, *data[da])
            for b, db in enumerate(names):
                mat[a, b] = kde.ego_similarity(model, data[db][0], workers)
        sd = mat.std()
        z = (mat - mat.mean()) / sd if sd > 0 else np.zeros_like(mat)
        raw[prop], zs[prop] = mat, z
        unified += (weight / w.sum()) * z
    best = []
    for a in range(N):
        others = [b for b in range(N) if b != a]
        # max over others; ties resolved by dataset order
        best.append(names[max(others, key=lambda b: (unified[a, b], -b))])
    return SimilarityMatrix(names, raw, zs, unified, best)


def emit_similarity_matrix(sim: SimilarityMatrix, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise OSError(f"output directory does not exist: {out_dir}")
    props = list(sim.raw)
    long_rows = []
    for a, na in enumerate(sim.names):
        for b, nb in enumerate(sim.names):
            row = [na, nb]
            row += [_fmt(sim.raw[p][a, b]) for p in props]
            row += [_fmt(sim.zscored[p][a, b]) for p in props]
            row += [_fmt(sim.unified[a, b]), int(sim.most_similar[a] == nb)]
            long_rows.append(row)
    header = ["dataset_a", "dataset_b"] + [f"raw_{p}" for p in props] + [f"z_{p}" for p in props]
    header += ["unified", "most_similar"]
    long_csv = out_dir / "similarity.csv"
    _write_csv(long_csv, header, long_rows)
    grid_csv = out_dir / "unified.csv"
    _write_csv(grid_csv, ["dataset"] + sim.names,
               [[n] + [_fmt(v) for v in sim.unified[a]] for a, n in enumerate(sim.names)])
    svg = out_dir / "similarity.svg"
    with style():
        n = len(sim.names)
        fig, ax = new_figure(1.0 + 0.8 * n, 1.0 + 0.8 * n)
        ax.imshow(sim.unified, interpolation="nearest")
        ax.set_xticks(range(n), sim.names, rotation=45, ha="right")
        ax.set_yticks(range(n), sim.names)
        for a, best in enumerate(sim.most_similar):
            ax.text(sim.names.index(best), a, "*", ha="center", va="center", color="w")
        ax.set_title("unified similarity")
        fig.tight_layout()
        save(fig, svg)
    return [svg, long_csv, grid_csv]


# --------------------------------------------------------------------------
# PCA export
# --------------------------------------------------------------------------

def pca_2d(x):
    """Project rows of ``x`` onto the two leading covariance eigenvectors."""
    proj = kde.pca_projection(x, min(2, x.shape[1]))
    coords = proj.apply(x)
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 1))])
    return coords


def _hull_area(pts):
    if pts.shape[0] < 3:
        return 0.0
    try:
        return float(ConvexHull(pts).volume)  # "volume" is the area in 2-D
    except QhullError:
        return 0.0


def emit_pca_scatter(table, highlight_ids, path, prop: str = "semantic") -> list[Path]:
    """Scatter of a property projected to two principal components.

    Highlighted ids are drawn as a second layer. A summary CSV reports the
    convex-hull area of all points and of the highlighted subset.
    """
    mask, values, _ = property_matrix(table, prop)
    ids = [ps.id for ps, keep in zip(table, mask) if keep]
    if len(ids) < 3:
        raise DataError(f"PCA scatter needs at least 3 points, got {len(ids)}")
    svg, csv_path = _twin(path)
    _check_dir(svg)
    coords = pca_2d(values)
    marked = set(highlight_ids)
    hi = np.array([i in marked for i in ids], dtype=bool)
    _write_csv(csv_path, ["id", "pc1", "pc2", "highlighted"],
               [(i, _fmt(a), _fmt(b), int(h)) for i, (a, b), h in zip(ids, coords, hi)])
    summary = csv_path.with_name(csv_path.stem + "_summary.csv")
    _write_csv(summary, ["subset", "points", "hull_area"],
               [("all", len(ids), _fmt(_hull_area(coords))),
                ("highlighted", int(hi.sum()), _fmt(_hull_area(coords[hi])))])
    with style():
        fig, ax = new_figure()
        ax.scatter(coords[:, 0], coords[:, 1], s=4, c="tab:gray", linewidths=0)
        if hi.any():
            ax.scatter(coords[hi, 0], coords[hi, 1], s=6, c="tab:red", linewidths=0)
        ax.set_xlabel("PC1")
        ax.set_ylabel("PC2")
        ax.set_title(prop)
        save(fig, svg)
    return [svg, csv_path, summary]


# --------------------------------------------------------------------------
# Whole report
# --------------------------------------------------------------------------

@dataclass
class ReportBundle:
    names: list
    similarity: SimilarityMatrix | None
    files: list


def emit_report(datasets: dict, weights, out_dir, highlight_ids=(), workers: int = 1) -> ReportBundle:
    out = Path(out_dir)
    for sub in ("polar", "heatmap", "blur", "pose", "similarity", "pca"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    files = []
    for name, table in datasets.items():
        files += emit_polar_histogram(aggregate_motion(table), out / "polar" / f"{name}.svg")
        for attr, label in (("hand_loc", "hand"), ("obj_loc", "object")):
            files += emit_heatmap(aggregate_locations(table, attr), out / "heatmap" / f"{name}_{label}.svg",
                                  title=f"{name} {label}")
        files += emit_blur_distribution([ps.blur.mean for ps in table], out / "blur" / f"{name}.svg")
        files += emit_pose_contours(table, out / "pose" / f"{name}.svg")
    sim = None
    if len(datasets) >= 2:
        sim = similarity_matrix(datasets, weights, workers)
        files += emit_similarity_matrix(sim, out / "similarity")
    everything = [ps for table in datasets.values() for ps in table]
    if len(everything) >= 3:
        files += emit_pca_scatter(everything, highlight_ids, out / "pca" / "semantic.svg")
    entries = {str(Path(f).relative_to(out)): hashlib.sha256(Path(f).read_bytes()).hexdigest() for f in files}
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"datasets": list(datasets), "files": entries}, indent=2) + "\n",
                        encoding="utf-8")
    return ReportBundle(list(datasets), sim, files + [manifest])
