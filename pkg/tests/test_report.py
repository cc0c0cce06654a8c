import csv
import math

import numpy as np
import pytest

from egocurate import DataError
from egocurate.props import MOTION_BINS, CameraMotionSummary, summarize_locations, video_motion_summary
from egocurate.report import (
    emit_blur_distribution,
    emit_heatmap,
    emit_pca_scatter,
    emit_polar_histogram,
    emit_report,
    emit_similarity_matrix,
    pca_2d,
    similarity_matrix,
)

from _synth import one_d_table, one_hot_weights, props, random_table


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestPolar:
    def test_zero(self, tmp_path):
        svg, c = emit_polar_histogram(video_motion_summary([]), tmp_path / "p.svg")
        rows = read_csv(c)
        assert svg.exists() and len(rows) == MOTION_BINS
        assert all(float(r["weight"]) == 0 and float(r["radius"]) == 0 for r in rows)

    def test_single_bin_full_radius(self, tmp_path):
        _, c = emit_polar_histogram(video_motion_summary([(math.pi, 3.0)]), tmp_path / "p.svg")
        radii = [float(r["radius"]) for r in read_csv(c)]
        assert radii[45] == 1.0 and sum(radii) == 1.0
        assert float(read_csv(c)[45]["bin_start_angle"]) == pytest.approx(math.pi)

    def test_mass(self, tmp_path):
        rng = np.random.default_rng(0)
        s = video_motion_summary(list(zip(rng.uniform(0, 6.28, 300), rng.exponential(2, 300))))
        _, c = emit_polar_histogram(s, tmp_path / "p.svg")
        assert sum(float(r["weight"]) for r in read_csv(c)) == pytest.approx(s.histogram.sum(), abs=1e-9)

    def test_bad_bins(self, tmp_path):
        with pytest.raises(DataError):
            emit_polar_histogram(CameraMotionSummary([], np.zeros(10)), tmp_path / "p.svg")

    def test_missing_dir(self, tmp_path):
        with pytest.raises(OSError):
            emit_polar_histogram(video_motion_summary([]), tmp_path / "nope" / "p.svg")


class TestHeatmap:
    def test_single_count(self, tmp_path):
        s = summarize_locations([[[0.0, 0.0, 0.1, 0.1, 1.0]]])
        _, c = emit_heatmap(s, tmp_path / "h.svg")
        rows = read_csv(c)
        assert len(rows) == 256
        shaded = [r for r in rows if float(r["intensity"]) > 0]
        assert len(shaded) == 1 and (shaded[0]["row"], shaded[0]["col"]) == ("0", "0")
        assert sum(int(r["count"]) for r in rows) == s.detection_count

    def test_uniform(self, tmp_path):
        boxes = [[(c + 0.5) / 16 - 0.01, (r + 0.5) / 16 - 0.01, (c + 0.5) / 16 + 0.01, (r + 0.5) / 16 + 0.01, 1.0]
                 for r in range(16) for c in range(16)]
        _, c = emit_heatmap(summarize_locations([boxes]), tmp_path / "h.svg")
        assert {float(r["intensity"]) for r in read_csv(c)} == {1.0}


def test_blur_csv(tmp_path):
    _, c = emit_blur_distribution([1.0, 2.0, 3.0, 10.0], tmp_path / "b.svg")
    rows = read_csv(c)
    assert sum(int(r["count"]) for r in rows[:-1]) == 4
    assert rows[-1]["bin_low"] == "mean" and float(rows[-1]["bin_high"]) == 4.0


class TestSimilarity:
    def test_identical_twin_is_most_similar(self, tmp_path):
        rng = np.random.default_rng(0)
        a = random_table(rng, 40, "a", sem_dim=8)
        a2 = [props("c" + p.id, p.semantic, p.motion.resultant, (p.blur.mean, p.blur.std)) for p in a]
        for p, q in zip(a2, a):
            p.hand_loc, p.obj_loc, p.pose = q.hand_loc, q.obj_loc, q.pose
        b = random_table(rng, 40, "b", sem_dim=8)
        for p in b:
            p.blur.mean += 2000.0
            p.motion.resultant = (p.motion.resultant[0] + 30.0, p.motion.resultant[1])
        sim = similarity_matrix({"A": a, "B": b, "A2": a2}, (5, 10, 8, 8, 10, 5))
        assert sim.most_similar[0] == "A2" and sim.most_similar[2] == "A"
        files = emit_similarity_matrix(sim, tmp_path)
        grid = read_csv(tmp_path / "unified.csv")
        assert [r["dataset"] for r in grid] == ["A", "B", "A2"]
        assert list(grid[0]) == ["dataset", "A", "B", "A2"]
        long = read_csv(tmp_path / "similarity.csv")
        assert len(long) == 9
        assert [r["dataset_b"] for r in long if r["most_similar"] == "1"] == ["A2", "A", "A"]
        assert all(f.exists() for f in files)

    def test_asymmetric(self):
        rng = np.random.default_rng(4)
        conc = one_d_table("c", rng.normal(0, 0.1, 60))
        disp = one_d_table("d", rng.normal(0, 5.0, 60))
        sim = similarity_matrix({"C": conc, "D": disp}, one_hot_weights("motion"))
        raw = sim.raw["motion"]
        assert raw[0, 1] != raw[1, 0] and raw[0, 1] < raw[1, 0]

    def test_missing_property(self):
        rng = np.random.default_rng(1)
        a = random_table(rng, 5, "a")
        b = random_table(rng, 5, "b", with_detections=False)
        with pytest.raises(DataError, match="'b'.*hand_loc|hand_loc"):
            similarity_matrix({"a": a, "b": b}, (5, 10, 8, 8, 10, 5))


class TestPCA:
    def test_matches_eigendecomposition(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(50, 6)) * np.array([5, 3, 1, 1, 0.5, 0.2])
        got = pca_2d(x)
        xc = x - x.mean(0)
        _, vecs = np.linalg.eigh(np.cov(xc.T, bias=True))
        ref = xc @ vecs[:, ::-1][:, :2]
        for k in range(2):
            sign = np.sign(got[:, k] @ ref[:, k])
            np.testing.assert_allclose(got[:, k], sign * ref[:, k], atol=1e-6)

    def test_rank_one(self):
        t = np.linspace(-1, 1, 20)[:, None]
        x = t * np.array([[1.0, 2.0, -0.5]]) + np.array([3.0, 1.0, 0.0])
        c = pca_2d(x)
        assert np.abs(c[:, 1]).max() <= 1e-9 * np.abs(c[:, 0]).max()

    def test_scatter_csv(self, tmp_path):
        table = random_table(np.random.default_rng(2), 12, sem_dim=5)
        svg, c, summary = emit_pca_scatter(table, [table[0].id, table[3].id], tmp_path / "s.svg")
        rows = read_csv(c)
        assert len(rows) == 12 and sum(int(r["highlighted"]) for r in rows) == 2
        s = read_csv(summary)
        assert s[0]["subset"] == "all" and float(s[0]["hull_area"]) > 0
        assert float(s[1]["hull_area"]) == 0.0

    def test_too_few(self, tmp_path):
        with pytest.raises(DataError):
            emit_pca_scatter(random_table(np.random.default_rng(2), 2), [], tmp_path / "s.svg")


def test_report_byte_stable(tmp_path):
    rng = np.random.default_rng(3)
    data = {"x": random_table(rng, 25, "x", sem_dim=6), "y": random_table(rng, 25, "y", sem_dim=6)}
    a = emit_report(data, (5, 10, 8, 8, 10, 5), tmp_path / "a", highlight_ids=["x00001"], workers=1)
    b = emit_report(data, (5, 10, 8, 8, 10, 5), tmp_path / "b", highlight_ids=["x00001"], workers=4)
    rel_a = sorted(str(f.relative_to(tmp_path / "a")) for f in a.files)
    rel_b = sorted(str(f.relative_to(tmp_path / "b")) for f in b.files)
    assert rel_a == rel_b
    for r in rel_a:
        assert (tmp_path / "a" / r).read_bytes() == (tmp_path / "b" / r).read_bytes(), r
    assert {r.split("/")[0] for r in rel_a} == {"polar", "heatmap", "blur", "pose", "similarity", "pca", "manifest.json"}
    assert a.similarity.unified.shape == (2, 2)
