import json
import math

import cv2
import numpy as np
import pytest
from scipy import ndimage, signal, stats

from egocurate import DataError
from egocurate.manifest import ClassEntry, ClassTable, Manifest, VideoRecord
from egocurate.props import (
    BLUR_PIXELS,
    HEATMAP_SIZE,
    MOTION_BINS,
    PropertySet,
    extract_all,
    frame_blurriness,
    frame_camera_motion,
    ingest_detections,
    laplacian_variance,
    property_matrix,
    read_props,
    resize_to_pixels,
    summarize_locations,
    summarize_pose,
    to_gray,
    video_motion_summary,
    write_props,
)

from _synth import random_table

BIN = 2 * math.pi / MOTION_BINS


def angle_gap(a, b):
    return abs((a - b + math.pi) % (2 * math.pi) - math.pi)


def texture(seed, size=300, sigma=3.0):
    rng = np.random.default_rng(seed)
    t = ndimage.gaussian_filter(rng.random((size, size)), sigma)
    return (t - t.min()) / (t.max() - t.min())


def translated_pair(seed, dx, dy_up, crop=200):
    """Two crops of one texture; the second shows content moved by (dx, up)."""
    big = texture(seed)
    moved = ndimage.shift(big, (-dy_up, dx), order=3, mode="nearest")
    o = (big.shape[0] - crop) // 2
    return big[o:o + crop, o:o + crop], moved[o:o + crop, o:o + crop]


class TestLaplacian:
    def test_constant_frame(self):
        assert laplacian_variance(np.full((64, 64), 0.4)) == 0.0

    def test_checkerboard_matches_convolution(self):
        cells = (np.indices((256, 256)) // 32).sum(axis=0) % 2
        img = cells.astype(float)
        kernel = np.array([[0, -1, 0], [-1, 4, -1], [0, -1, 0]], dtype=float)
        ref = signal.convolve2d(img, kernel, mode="valid").var()
        assert laplacian_variance(img) == pytest.approx(ref, abs=1e-9)
        assert frame_blurriness(img) == pytest.approx(ref, abs=1e-9)

    def test_matches_explicit_loops(self):
        img = np.random.default_rng(1).random((9, 7))
        vals = []
        for r in range(1, 8):
            for c in range(1, 6):
                vals.append(4 * img[r, c] - img[r - 1, c] - img[r + 1, c] - img[r, c - 1] - img[r, c + 1])
        assert laplacian_variance(img) == pytest.approx(np.var(vals), abs=1e-12)

    def test_blur_lowers_variance(self):
        for seed in range(5):
            img = np.random.default_rng(seed).random((128, 128))
            blurred = cv2.blur(img, (5, 5))
            assert laplacian_variance(img) > laplacian_variance(blurred)

    def test_constant_offset_invariant(self):
        img = np.random.default_rng(2).random((50, 60))
        assert laplacian_variance(img + 0.25) == pytest.approx(laplacian_variance(img), rel=1e-10)

    def test_too_small(self):
        with pytest.raises(DataError):
            laplacian_variance(np.zeros((2, 5)))

    def test_gray_conversion(self):
        rgb = np.zeros((4, 4, 3))
        rgb[..., 0], rgb[..., 1], rgb[..., 2] = 1.0, 0.5, 0.25
        assert to_gray(rgb)[0, 0] == pytest.approx(0.299 + 0.587 * 0.5 + 0.114 * 0.25)

    def test_resize_pixel_count(self):
        out = resize_to_pixels(np.zeros((480, 640)))
        assert abs(out.shape[0] * out.shape[1] - BLUR_PIXELS) < 600
        assert out.shape[1] / out.shape[0] == pytest.approx(640 / 480, rel=0.01)


class TestCameraMotion:
    def test_identical_frames(self):
        f = texture(0, 120)
        assert frame_camera_motion(f, f) == (0.0, 0.0)

    def test_rightward(self):
        a, b = translated_pair(1, 5.0, 0.0)
        ang, mag = frame_camera_motion(a, b)
        assert angle_gap(ang, 0.0) <= BIN
        assert mag == pytest.approx(5.0, rel=0.1)

    def test_upward(self):
        a, b = translated_pair(2, 0.0, 5.0)
        ang, mag = frame_camera_motion(a, b)
        assert angle_gap(ang, math.pi / 2) <= BIN
        assert mag == pytest.approx(5.0, rel=0.1)

    def test_opposite_directions(self):
        a, b = translated_pair(3, 3.0, 2.0)
        c, d = translated_pair(3, -3.0, -2.0)
        ang1, _ = frame_camera_motion(a, b)
        ang2, _ = frame_camera_motion(c, d)
        assert angle_gap(ang1 + math.pi, ang2) <= BIN

    def test_size_mismatch(self):
        with pytest.raises(DataError):
            frame_camera_motion(np.zeros((10, 10)), np.zeros((10, 12)))


class TestMotionSummary:
    def test_empty(self):
        s = video_motion_summary([])
        assert not s.histogram.any() and s.resultant == (0.0, 0.0) and s.frame_pair_count == 0

    def test_cancellation(self):
        s = video_motion_summary([(0.0, 1.0), (math.pi, 1.0)])
        assert s.resultant == pytest.approx((0.0, 0.0), abs=1e-15)
        assert np.count_nonzero(s.histogram) == 2

    def test_single_direction(self):
        s = video_motion_summary([(0.0, 2.0)] * 10)
        assert s.resultant == pytest.approx((2.0, 0.0))
        assert s.histogram[0] == 20.0 and np.count_nonzero(s.histogram) == 1

    def test_mass_conserved(self):
        rng = np.random.default_rng(0)
        vecs = list(zip(rng.uniform(0, 2 * math.pi, 500), rng.exponential(3.0, 500)))
        s = video_motion_summary(vecs)
        assert s.histogram.shape == (MOTION_BINS,)
        assert s.histogram.sum() == pytest.approx(sum(m for _, m in vecs), rel=1e-9)


def _manifest(ids):
    classes = ClassTable([ClassEntry(0, "x", ("x",), np.ones(3))])
    return Manifest([VideoRecord(i, "s", "train", "x", 0, 30.0) for i in ids], classes)


class TestDetections:
    def _file(self, tmp_path, rows):
        p = tmp_path / "d.jsonl"
        p.write_text("".join(json.dumps(r) + "\n" for r in rows))
        return p

    def test_single_box(self, tmp_path):
        p = self._file(tmp_path, [{"id": "a", "frame_index": 0, "hands": [[0.1, 0.1, 0.3, 0.4, 0.9]],
                                   "objects": [], "poses": []}])
        out = ingest_detections(p, _manifest(["a"]))
        assert len(out) == 1 and out["a"][0].hands[0][:4] == [0.1, 0.1, 0.3, 0.4]

    def test_malformed_box(self, tmp_path):
        p = self._file(tmp_path, [{"id": "a", "frame_index": 3, "hands": [[0.5, 0.1, 0.3, 0.4, 0.9]]}])
        with pytest.raises(DataError, match="'a'"):
            ingest_detections(p, _manifest(["a"]))

    def test_unknown_id(self, tmp_path):
        p = self._file(tmp_path, [{"id": "zz", "frame_index": 0, "hands": []}])
        with pytest.raises(DataError, match="unknown id"):
            ingest_detections(p, _manifest(["a"]))

    def test_pose_length(self, tmp_path):
        p = self._file(tmp_path, [{"id": "a", "frame_index": 0, "poses": [[0.1] * 10]}])
        with pytest.raises(DataError):
            ingest_detections(p, _manifest(["a"]))


class TestLocations:
    def test_single_box(self):
        s = summarize_locations([[[0.4, 0.4, 0.6, 0.6, 1.0]]])
        assert s.heatmap[8, 8] == 1 and s.heatmap.sum() == 1
        np.testing.assert_allclose(s.kde_vector, [0.5, 0.5, 0.2, 0.2])
        assert s.detection_count == 1

    def test_mean_center(self):
        s = summarize_locations([[[0.2, 0.2, 0.3, 0.3, 1.0]], [[0.7, 0.7, 0.8, 0.8, 1.0]]])
        np.testing.assert_allclose(s.kde_vector[:2], [0.5, 0.5])

    def test_none_when_empty(self):
        assert summarize_locations([[], []]) is None

    def test_uniform_chi_square(self):
        rng = np.random.default_rng(2024)
        centers = rng.uniform(0, 1, size=(1000, 2))
        half = np.minimum(np.minimum(centers, 1 - centers), 0.05)
        boxes = [[c[0] - h[0], c[1] - h[1], c[0] + h[0], c[1] + h[1], 1.0] for c, h in zip(centers, half)]
        s = summarize_locations([boxes])
        assert s.heatmap.sum() == s.detection_count == 1000
        expected = 1000 / HEATMAP_SIZE ** 2
        chi2 = ((s.heatmap - expected) ** 2 / expected).sum()
        assert chi2 < stats.chi2.ppf(0.99, HEATMAP_SIZE ** 2 - 1)


class TestPose:
    def test_single(self):
        p = np.linspace(0, 1, 42)
        out = summarize_pose([[(p, 0.9)]])
        np.testing.assert_allclose(out.keypoints, p)
        assert out.confidence == pytest.approx(0.9)

    def test_identical(self):
        p = np.linspace(0, 1, 42)
        out = summarize_pose([[(p, 0.5)], [(p, 0.7)]])
        np.testing.assert_allclose(out.keypoints, p)

    def test_zero_weight_excluded(self):
        p, q = np.full(42, 0.2), np.full(42, 0.8)
        out = summarize_pose([[(p, 1.0)], [(q, 0.0)]])
        np.testing.assert_allclose(out.keypoints, p)

    def test_best_hand_per_frame(self):
        p, q = np.full(42, 0.2), np.full(42, 0.8)
        out = summarize_pose([[(q, 0.3), (p, 0.9)]])
        np.testing.assert_allclose(out.keypoints, p)

    def test_empty(self):
        assert summarize_pose([[], []]) is None


def test_props_file_round_trip(tmp_path):
    table = random_table(np.random.default_rng(0), 5)
    table[2].hand_loc = None
    table[3].pose = None
    p = tmp_path / "p.jsonl"
    write_props(table, p)
    back = read_props(p)
    assert [ps.id for ps in back] == [ps.id for ps in table]
    q = tmp_path / "q.jsonl"
    write_props(back, q)
    assert p.read_bytes() == q.read_bytes()
    mask, vals, _ = property_matrix(back, "hand_loc")
    assert mask.tolist() == [True, True, False, True, True] and vals.shape == (4, 4)
    _, blur, widths = property_matrix(back, "blur")
    assert blur.shape == (5, 1) and widths.shape == (5,)


def test_extract_from_frames(tmp_path):
    frames = tmp_path / "v1"
    frames.mkdir()
    big = texture(7)
    for i in range(4):
        img = ndimage.shift(big, (0, 3.0 * i), order=3, mode="nearest")[50:250, 50:250]
        cv2.imwrite(str(frames / f"{i:04d}.png"), np.round(img * 255).astype(np.uint8))
    classes = ClassTable([ClassEntry(0, "x", ("x",), np.arange(5.0))])
    man = Manifest([VideoRecord("v1", "s", "train", "x", 0, 8.0, str(frames))], classes)
    a = extract_all(man, 8.0, workers=1)
    b = extract_all(man, 8.0, workers=3)
    assert isinstance(a[0], PropertySet)
    assert a[0].motion.frame_pair_count == 3
    assert angle_gap(math.atan2(a[0].motion.resultant[1], a[0].motion.resultant[0]), 0.0) <= BIN
    assert a[0].to_dict() == b[0].to_dict()
