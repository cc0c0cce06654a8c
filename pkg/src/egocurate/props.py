"""Per-video property extraction and the property-table file format.

Frame-level measurements (variance of Laplacian, dense-flow camera
motion) are computed here from pre-extracted frames; hand, object and
pose detections and label embeddings arrive precomputed and are only
validated and summarised.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from . import PROPERTIES, DataError
from ._parallel import ordered_map

log = logging.getLogger(__name__)

SEMANTIC_DIM = 768
POSE_DIM = 42
MOTION_BINS = 90
HEATMAP_SIZE = 16
BLUR_PIXELS = 65536
FLOW_EPS = 0.1
FARNEBACK = dict(pyr_scale=0.5, levels=3, winsize=15, iterations=3, poly_n=5, poly_sigma=1.2, flags=0)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

_BIN_WIDTH = 2.0 * math.pi / MOTION_BINS


# --------------------------------------------------------------------------
# Frame-level measurements
# --------------------------------------------------------------------------

def to_gray(frame) -> np.ndarray:
    """Return a float64 single-channel image; RGB uses 0.299/0.587/0.114."""
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 3:
        if img.shape[2] != 3:
            raise DataError(f"expected 1 or 3 channels, got {img.shape[2]}")
        img = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    if img.ndim != 2 or img.size < 1:
        raise DataError(f"not an image: shape {img.shape}")
    return img


def resize_to_pixels(gray, pixels: int = BLUR_PIXELS) -> np.ndarray:
    """Bilinear resize to about ``pixels`` total, keeping the aspect ratio."""
    h, w = gray.shape
    scale = math.sqrt(pixels / (h * w))
    new_w, new_h = max(1, round(w * scale)), max(1, round(h * scale))
    if (new_w, new_h) == (w, h):
        return gray
    return cv2.resize(gray, (new_w, new_h), interpolation=cv2.INTER_LINEAR)


def laplacian_variance(frame) -> float:
    """Population variance of the 4-neighbour Laplacian over interior pixels.

    The frame is used as given; :func:`frame_blurriness` applies the
    grayscale conversion and the fixed-pixel-count resize first.
    """
    g = to_gray(frame)
    if g.shape[0] < 3 or g.shape[1] < 3:
        raise DataError(f"frame {g.shape} is smaller than 3x3")
    c = g[1:-1, 1:-1]
    lap = 4.0 * c - g[:-2, 1:-1] - g[2:, 1:-1] - g[1:-1, :-2] - g[1:-1, 2:]
    return float(lap.var())


def frame_blurriness(frame) -> float:
    return laplacian_variance(resize_to_pixels(to_gray(frame)))


def _flow_vectors(prev, nxt):
    a = to_gray(prev)
    b = to_gray(nxt)
    if a.shape != b.shape:
        raise DataError(f"frame size mismatch: {a.shape} vs {b.shape}")
    if np.array_equal(a, b):
        # Farneback leaves sub-pixel noise near the borders even here
        zero = np.zeros(a.size)
        return zero, zero.copy()
    flow = cv2.calcOpticalFlowFarneback(
        (a * 255.0).astype(np.float32), (b * 255.0).astype(np.float32), None, **FARNEBACK
    )
    fx = flow[..., 0].astype(np.float64).ravel()
    fy = -flow[..., 1].astype(np.float64).ravel()  # image y grows downwards
    return fx, fy


def _angle_bins(angles):
    return np.minimum((angles / _BIN_WIDTH).astype(np.int64), MOTION_BINS - 1)


def frame_camera_motion(prev, nxt) -> tuple[float, float]:
    """Dominant shift between two frames as ``(angle, magnitude)``.

    Dense Farneback flow is binned by angle (90 bins, weighted by
    magnitude); the result is the magnitude-weighted mean vector of the
    heaviest bin. Angles follow the usual math convention with y pointing
    up, so content moving right is 0 and moving up is pi/2. Pixels that
    move less than ``FLOW_EPS`` are ignored; with none left the motion
    is ``(0.0, 0.0)``.
    """
    fx, fy = _flow_vectors(prev, nxt)
    mag = np.hypot(fx, fy)
    keep = mag >= FLOW_EPS
    if not np.any(keep):
        return 0.0, 0.0
    fx, fy, mag = fx[keep], fy[keep], mag[keep]
    bins = _angle_bins(np.mod(np.arctan2(fy, fx), 2.0 * math.pi))
    weights = np.bincount(bins, weights=mag, minlength=MOTION_BINS)
    top = int(np.argmax(weights))  # argmax returns the smallest index on ties
    sel = bins == top
    total = mag[sel].sum()
    vx = float(np.dot(mag[sel], fx[sel]) / total)
    vy = float(np.dot(mag[sel], fy[sel]) / total)
    return math.atan2(vy, vx) % (2.0 * math.pi), math.hypot(vx, vy)


# --------------------------------------------------------------------------
# Per-video summaries
# --------------------------------------------------------------------------

@dataclass
class CameraMotionSummary:
    frame_vectors: list = field(default_factory=list)
    histogram: np.ndarray = field(default_factory=lambda: np.zeros(MOTION_BINS))
    resultant: tuple = (0.0, 0.0)
    frame_pair_count: int = 0


@dataclass
class BlurrinessSummary:
    mean: float
    std: float


@dataclass
class LocationSummary:
    heatmap: np.ndarray
    kde_vector: np.ndarray
    detection_count: int


@dataclass
class HandPoseVector:
    keypoints: np.ndarray
    confidence: float


def video_motion_summary(frame_vectors) -> CameraMotionSummary:
    """Histogram the per-frame dominant vectors and average them."""
    vecs = [(float(a), float(m)) for a, m in frame_vectors]
    hist = np.zeros(MOTION_BINS)
    if not vecs:
        return CameraMotionSummary([], hist, (0.0, 0.0), 0)
    ang = np.mod(np.array([a for a, _ in vecs]), 2.0 * math.pi)
    mag = np.array([m for _, m in vecs])
    if np.any(mag < 0):
        raise DataError("negative motion magnitude")
    hist = np.bincount(_angle_bins(ang), weights=mag, minlength=MOTION_BINS).astype(np.float64)
    x = float(np.mean(mag * np.cos(ang)))
    y = float(np.mean(mag * np.sin(ang)))
    return CameraMotionSummary(vecs, hist, (x, y), len(vecs))


def blurriness_summary(values) -> BlurrinessSummary:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise DataError("no frames to measure blurriness on")
    return BlurrinessSummary(float(v.mean()), float(v.std()))


def _box_center_size(box):
    x1, y1, x2, y2 = (float(b) for b in box[:4])
    return (x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1


def heatmap_cell(cx: float, cy: float) -> tuple[int, int]:
    """``(row, col)`` of a normalised point on the location grid."""
    col = min(max(int(math.floor(cx * HEATMAP_SIZE)), 0), HEATMAP_SIZE - 1)
    row = min(max(int(math.floor(cy * HEATMAP_SIZE)), 0), HEATMAP_SIZE - 1)
    return row, col


def summarize_locations(frames) -> LocationSummary | None:
    """Aggregate per-frame boxes into a centre heatmap and a mean box.

    ``frames`` is a sequence of per-frame box lists with boxes given as
    normalised ``(x1, y1, x2, y2, ...)``. Returns ``None`` when there is
    not a single detection.
    """
    heat = np.zeros((HEATMAP_SIZE, HEATMAP_SIZE), dtype=np.int64)
    rows = []
    for boxes in frames:
        for box in boxes:
            cx, cy, w, h = _box_center_size(box)
            r, c = heatmap_cell(cx, cy)
            heat[r, c] += 1
            rows.append((cx, cy, w, h))
    if not rows:
        return None
    vec = np.clip(np.mean(np.array(rows), axis=0), 0.0, 1.0)
    return LocationSummary(heat, vec, len(rows))


def summarize_pose(frames) -> HandPoseVector | None:
    """Confidence-weighted mean of the most confident hand in each frame.

    ``frames`` is a sequence of per-frame lists of ``(keypoints, confidence)``.
    """
    best = []
    for poses in frames:
        cands = [(np.asarray(k, dtype=np.float64), float(c)) for k, c in poses]
        if not cands:
            continue
        for k, _ in cands:
            if k.shape != (POSE_DIM,):
                raise DataError(f"pose vector must have {POSE_DIM} values, got {k.size}")
        # first index wins ties, keeping the choice deterministic
        best.append(max(cands, key=lambda kc: kc[1]))
    if not best:
        return None
    kp = np.stack([k for k, _ in best])
    conf = np.array([c for _, c in best])
    if conf.sum() > 0:
        mean = (conf[:, None] * kp).sum(axis=0) / conf.sum()
    else:
        mean = kp.mean(axis=0)
    return HandPoseVector(mean, float(conf.mean()))


# --------------------------------------------------------------------------
# Property sets and the property-table file
# --------------------------------------------------------------------------

@dataclass
class PropertySet:
    id: str
    semantic: np.ndarray
    motion: CameraMotionSummary
    blur: BlurrinessSummary
    hand_loc: LocationSummary | None = None
    obj_loc: LocationSummary | None = None
    pose: HandPoseVector | None = None

    def to_dict(self) -> dict:
        def loc(s):
            if s is None:
                return None
            return {
                "heatmap": s.heatmap.tolist(),
                "kde_vector": [float(v) for v in s.kde_vector],
                "detection_count": int(s.detection_count),
            }

        return {
            "id": self.id,
            "semantic": [float(v) for v in self.semantic],
            "motion": {
                "frame_vectors": [[a, m] for a, m in self.motion.frame_vectors],
                "histogram": [float(v) for v in self.motion.histogram],
                "resultant": [float(v) for v in self.motion.resultant],
                "frame_pair_count": int(self.motion.frame_pair_count),
            },
            "blur": {"mean": float(self.blur.mean), "std": float(self.blur.std)},
            "hand_loc": loc(self.hand_loc),
            "obj_loc": loc(self.obj_loc),
            "pose": None if self.pose is None else {
                "keypoints": [float(v) for v in self.pose.keypoints],
                "confidence": float(self.pose.confidence),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PropertySet":
        def loc(s):
            if s is None:
                return None
            heat = np.asarray(s["heatmap"], dtype=np.int64)
            if heat.shape != (HEATMAP_SIZE, HEATMAP_SIZE):
                raise DataError(f"heatmap must be {HEATMAP_SIZE}x{HEATMAP_SIZE}")
            return LocationSummary(heat, np.asarray(s["kde_vector"], dtype=np.float64),
                                   int(s["detection_count"]))

        m = d["motion"]
        hist = np.asarray(m["histogram"], dtype=np.float64)
        if hist.shape != (MOTION_BINS,):
            raise DataError(f"motion histogram must have {MOTION_BINS} bins")
        motion = CameraMotionSummary(
            [(float(a), float(b)) for a, b in m.get("frame_vectors", [])],
            hist,
            tuple(float(v) for v in m["resultant"]),
            int(m["frame_pair_count"]),
        )
        pose = d.get("pose")
        if pose is not None:
            kp = np.asarray(pose["keypoints"], dtype=np.float64)
            if kp.shape != (POSE_DIM,):
                raise DataError(f"pose vector must have {POSE_DIM} values")
            pose = HandPoseVector(kp, float(pose["confidence"]))
        return cls(
            id=str(d["id"]),
            semantic=np.asarray(d["semantic"], dtype=np.float64),
            motion=motion,
            blur=BlurrinessSummary(float(d["blur"]["mean"]), float(d["blur"]["std"])),
            hand_loc=loc(d.get("hand_loc")),
            obj_loc=loc(d.get("obj_loc")),
            pose=pose,
        )


def write_props(table, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ps in table:
            fh.write(json.dumps(ps.to_dict()) + "\n")


def read_props(path) -> list[PropertySet]:
    out = []
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                ps = PropertySet.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad property record: {exc}") from exc
            if ps.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {ps.id!r} (first on line {seen[ps.id]})")
            seen[ps.id] = lineno
            out.append(ps)
    return out


def property_matrix(table, name: str):
    """Raw KDE representation of one property over a table.

    Returns ``(present, values, widths)``: a boolean mask of records that
    carry the property, the stacked vectors of those records and, for
    blurriness only, the per-record kernel widths (``None`` otherwise).
    """
    if name not in PROPERTIES:
        raise DataError(f"unknown property {name!r}")
    present, rows, widths = [], [], []
    for ps in table:
        if name == "semantic":
            val = ps.semantic
        elif name == "motion":
            val = ps.motion.resultant
        elif name == "blur":
            val = (ps.blur.mean,)
            widths.append(ps.blur.std)
        elif name == "pose":
            val = None if ps.pose is None else ps.pose.keypoints
        else:
            loc = getattr(ps, name)
            val = None if loc is None else loc.kde_vector
        present.append(val is not None)
        if val is not None:
            rows.append(np.asarray(val, dtype=np.float64))
    mask = np.array(present, dtype=bool)
    if rows:
        values = np.stack(rows)
    else:
        values = np.zeros((0, 0))
    return mask, values, (np.array(widths) if name == "blur" else None)


# --------------------------------------------------------------------------
# Detection and semantic files
# --------------------------------------------------------------------------

@dataclass
class FrameDetections:
    hands: list = field(default_factory=list)
    objects: list = field(default_factory=list)
    poses: list = field(default_factory=list)  # (keypoints, confidence)


def _check_box(box, width, where):
    if len(box) != width:
        raise DataError(f"{where}: box must have {width} fields, got {len(box)}")
    x1, y1, x2, y2 = (float(v) for v in box[:4])
    if x2 < x1 or y2 < y1:
        raise DataError(f"{where}: malformed box {list(box[:4])} (x2<x1 or y2<y1)")
    if min(x1, y1) < 0.0 or max(x2, y2) > 1.0:
        raise DataError(f"{where}: box {list(box[:4])} is not in normalised coordinates")
    return [float(v) for v in box[:5]] + list(box[5:])


def ingest_detections(path, manifest) -> dict:
    """Read a detection file into ``{id: {frame_index: FrameDetections}}``."""
    known = {r.id for r in manifest.records}
    out: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                vid = str(row["id"])
                fidx = int(row["frame_index"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad detection record: {exc}") from exc
            where = f"{path}:{lineno} (id {vid!r}, frame {fidx})"
            if vid not in known:
                raise DataError(f"{where}: unknown id")
            det = out.setdefault(vid, {}).setdefault(fidx, FrameDetections())
            det.hands.extend(_check_box(b, 5, where) for b in row.get("hands", []))
            det.objects.extend(_check_box(b, 6, where) for b in row.get("objects", []))
            for p in row.get("poses", []):
                if len(p) != POSE_DIM + 1:
                    raise DataError(f"{where}: pose must have {POSE_DIM} values plus confidence")
                det.poses.append((np.asarray(p[:POSE_DIM], dtype=np.float64), float(p[POSE_DIM])))
    return out


def read_semantics(path, dim: int = SEMANTIC_DIM) -> dict:
    """``{label_text: embedding}`` from a semantic-vector file."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                vec = np.asarray(row["embedding"], dtype=np.float64)
                text = str(row["label_text"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad semantic record: {exc}") from exc
            if vec.shape != (dim,) or not np.all(np.isfinite(vec)):
                raise DataError(f"{path}:{lineno}: embedding must be {dim} finite values")
            out[text] = vec
    return out


def apply_detections(table, detections) -> list[PropertySet]:
    """Fill hand/object/pose summaries from ingested detections."""
    out = []
    for ps in table:
        frames = [detections[ps.id][k] for k in sorted(detections.get(ps.id, {}))]
        out.append(PropertySet(
            ps.id, ps.semantic, ps.motion, ps.blur,
            hand_loc=summarize_locations([f.hands for f in frames]),
            obj_loc=summarize_locations([f.objects for f in frames]),
            pose=summarize_pose([f.poses for f in frames]),
        ))
    return out


# --------------------------------------------------------------------------
# Frame directories
# --------------------------------------------------------------------------

def list_frames(directory) -> list[Path]:
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def read_frame(path) -> np.ndarray:
    """Load an image as float RGB (or gray) in ``[0, 1]``."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise OSError(f"cannot read image {path}")
    if img.ndim == 3:
        img = cv2.cvtColor(img[..., :3], cv2.COLOR_BGR2RGB)
    scale = 65535.0 if img.dtype == np.uint16 else 255.0
    return img.astype(np.float64) / scale


def sample_step(fps_native: float, fps_target: float) -> int:
    if fps_native <= 0 or fps_target <= 0:
        return 1
    return max(1, int(round(fps_native / fps_target)))


def extract_video(record, semantic, fps_motion: float = 8.0) -> PropertySet:
    """Motion and blurriness for one record whose frames are on disk."""
    if not record.frames_path:
        raise DataError(f"record {record.id!r} has no frames_path")
    paths = list_frames(record.frames_path)[:: sample_step(record.fps_native, fps_motion)]
    if len(paths) < 2:
        raise DataError(f"record {record.id!r}: need at least 2 frames, found {len(paths)}")
    frames = [read_frame(p) for p in paths]
    vectors = [frame_camera_motion(a, b) for a, b in zip(frames[:-1], frames[1:])]
    blur = blurriness_summary(frame_blurriness(f) for f in frames)
    return PropertySet(record.id, np.asarray(semantic, dtype=np.float64),
                       video_motion_summary(vectors), blur)


def extract_all(manifest, fps_motion: float = 8.0, workers: int = 1) -> list[PropertySet]:
    """Extract every record in manifest order; worker count never changes output."""
    cv2.setNumThreads(1)
    sem = {e.label_id: e.semantic_vector for e in manifest.classes.entries}

    def one(rec):
        return extract_video(rec, sem[rec.label_id], fps_motion)

    return ordered_map(one, manifest.records, workers)
