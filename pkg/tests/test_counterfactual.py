import numpy as np
import pytest

from egocurate import DataError
from egocurate.counterfactual import CFConfig, build_counterfactual, pose_dissimilarity


def clip(n=4, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8) for _ in range(n)]


def changed(a, b):
    return [i for i, (x, y) in enumerate(zip(a, b)) if not np.array_equal(x, y)]


BOX = (0.25, 0.25, 0.75, 0.75)


def test_one_patch_with_dissimilar_pose():
    frames = clip()
    up = np.zeros(42)
    up[0] = 1.0
    side = np.zeros(42)
    side[1] = 1.0
    poses = [up, side, side, side]
    out, log = build_counterfactual(frames, [BOX] * 4, poses, cfg=CFConfig(alpha=0.25, seed=3))
    assert len(log) == 1 and log[0].strategy in ("patch", "skipped")
    t = log[0].index
    if log[0].strategy == "skipped":
        pytest.fail(f"frame {t} had eligible donors")
    assert changed(frames, out) == [t]
    # outside the box the target frame is untouched
    np.testing.assert_array_equal(out[t][:8], frames[t][:8])
    d = log[0].donor
    np.testing.assert_array_equal(out[t][8:24, 8:24], frames[d][8:24, 8:24])


def test_whole_frame_without_boxes():
    frames = clip()
    out, log = build_counterfactual(frames, None, None, labels_per_frame=[0, 1, 2, 3],
                                    cfg=CFConfig(alpha=0.5, seed=1))
    assert len(log) == 2 and all(m.strategy == "frame" for m in log)
    assert changed(frames, out) == sorted(m.index for m in log)
    for m in log:
        np.testing.assert_array_equal(out[m.index], frames[m.donor])


def test_no_eligible_donor():
    frames = clip()
    pose = np.linspace(0, 1, 42)
    out, log = build_counterfactual(frames, [BOX] * 4, [pose] * 4, [7] * 4, CFConfig(alpha=0.5, seed=2))
    assert len(log) == 2 and all(m.strategy == "skipped" and m.donor is None for m in log)
    assert changed(frames, out) == []


def test_deterministic():
    frames = clip(8)
    labels = [0, 0, 1, 1, 2, 2, 3, 3]
    a = build_counterfactual(frames, [BOX] * 8, None, labels, CFConfig(alpha=0.4, seed=9))[1]
    b = build_counterfactual(frames, [BOX] * 8, None, labels, CFConfig(alpha=0.4, seed=9))[1]
    assert [m.to_dict() for m in a] == [m.to_dict() for m in b]


def test_only_logged_frames_change():
    rng = np.random.default_rng(4)
    for seed in range(10):
        frames = clip(10, seed=seed)
        labels = list(rng.integers(0, 3, 10))
        out, log = build_counterfactual(frames, [BOX] * 10, None, labels, CFConfig(alpha=0.3, seed=seed))
        assert len(log) == 3
        modified = {m.index for m in log if m.strategy != "skipped"}
        assert set(changed(frames, out)) <= modified


def test_pose_dissimilarity():
    assert pose_dissimilarity([1, 0], [1, 0]) == 0.0
    assert pose_dissimilarity([1, 0], [-1, 0]) == 2.0


def test_errors():
    with pytest.raises(DataError):
        build_counterfactual(clip(1))
    with pytest.raises(DataError):
        CFConfig(alpha=0.0)
    with pytest.raises(DataError):
        build_counterfactual(clip(3), hand_boxes=[BOX])
