"""Counterfactual clips: swap hand evidence between frames of one video.

A fraction of the frames is chosen at random. Each chosen frame gets its
hand region overwritten by the hand region of another frame of the same
clip with a dissimilar pose or a different label; when either frame lacks
a usable hand box the whole donor frame is copied in instead. Frames that
are not listed in the modification log are returned untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np

from . import DataError


@dataclass(frozen=True)
class CFConfig:
    alpha: float = 0.25
    gamma: float = 0.5
    pose_dissimilarity_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DataError(f"alpha must be in (0, 1), got {self.alpha}")
        if not -1.0 < self.gamma < 1.0:
            raise DataError(f"gamma must be in (-1, 1), got {self.gamma}")


@dataclass(frozen=True)
class Modification:
    index: int
    strategy: str  # "patch", "frame" or "skipped"
    donor: int | None

    def to_dict(self) -> dict:
        return {"index": self.index, "strategy": self.strategy, "donor": self.donor}


def _pixel_box(box, shape):
    if box is None:
        return None
    h, w = shape[:2]
    x1, y1, x2, y2 = (float(v) for v in box[:4])
    c1, r1 = int(round(x1 * w)), int(round(y1 * h))
    c2, r2 = int(round(x2 * w)), int(round(y2 * h))
    c1, c2 = max(0, c1), min(w, c2)
    r1, r2 = max(0, r1), min(h, r2)
    if c2 - c1 < 1 or r2 - r1 < 1:
        return None
    return r1, r2, c1, c2


def pose_dissimilarity(a, b) -> float:
    """``1 - cos(a, b)``; 0 for identical directions, 2 for opposite."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return 1.0 - float(np.dot(a, b) / (na * nb))


def _eligible(t, j, poses, labels, threshold):
    if labels is not None and labels[t] is not None and labels[j] is not None and labels[t] != labels[j]:
        return True
    if poses is not None and poses[t] is not None and poses[j] is not None:
        return pose_dissimilarity(poses[t], poses[j]) > threshold
    return False


def build_counterfactual(frames, hand_boxes=None, poses=None, labels_per_frame=None,
                         cfg: CFConfig = CFConfig()):
    """Return ``(new_frames, log)`` for one clip.

    ``hand_boxes``, ``poses`` and ``labels_per_frame`` are per-frame lists
    whose entries may be ``None``. Boxes are normalised ``(x1, y1, x2, y2)``.
    """
    frames = [np.asarray(f) for f in frames]
    L = len(frames)
    if L < 2:
        raise DataError(f"need at least 2 frames, got {L}")
    shape = frames[0].shape
    if any(f.shape != shape for f in frames):
        raise DataError("all frames must share one shape")
    for name, seq in (("hand_boxes", hand_boxes), ("poses", poses), ("labels_per_frame", labels_per_frame)):
        if seq is not None and len(seq) != L:
            raise DataError(f"{name} has {len(seq)} entries for {L} frames")

    rng = np.random.default_rng(cfg.seed)
    count = min(L, int(math.ceil(cfg.alpha * L - 1e-9)))
    targets = sorted(int(i) for i in rng.choice(L, size=count, replace=False))
    boxes = [None] * L if hand_boxes is None else [_pixel_box(b, shape) for b in hand_boxes]

    out = [f.copy() for f in frames]
    log = []
    for t in targets:
        donors = [j for j in range(L) if j != t and _eligible(t, j, poses, labels_per_frame,
                                                              cfg.pose_dissimilarity_threshold)]
        if not donors:
            log.append(Modification(t, "skipped", None))
            continue
        patchable = [j for j in donors if boxes[t] is not None and boxes[j] is not None]
        if patchable:
            j = patchable[int(rng.integers(len(patchable)))]
            r1, r2, c1, c2 = boxes[t]
            d1, d2, e1, e2 = boxes[j]
            src = frames[j][d1:d2, e1:e2]
            patch = cv2.resize(src, (c2 - c1, r2 - r1), interpolation=cv2.INTER_LINEAR)
            out[t][r1:r2, c1:c2] = patch.reshape(out[t][r1:r2, c1:c2].shape)
            log.append(Modification(t, "patch", j))
        else:
            j = donors[int(rng.integers(len(donors)))]
            out[t] = frames[j].copy()
            log.append(Modification(t, "frame", j))
    return out, log
