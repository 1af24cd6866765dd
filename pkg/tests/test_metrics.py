import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from conftest import random_pose
from stereopose.errors import EmptyModel, NoValidPoints
from stereopose.fusion import Keypoints3D
from stereopose.geometry import Pose, compose
from stereopose.metrics import (
    add_metric,
    adds_metric,
    evaluate_pose,
    keypoint_error,
    recall_curve,
    success,
)

seeds = st.integers(0, 2**32 - 1)
SQUARE = np.array([[1.0, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]])


def test_add_examples(models):
    p = random_pose(np.random.default_rng(0))
    for m in models.values():
        assert add_metric(m, p, p) == 0.0
        assert adds_metric(m, p, p) == 0.0
        shifted = Pose(p.rotation, p.translation + [0.01, 0.0, 0.0])
        assert add_metric(m, shifted, p) == pytest.approx(0.01, abs=1e-12)


def test_empty_model():
    with pytest.raises(EmptyModel):
        add_metric(np.zeros((0, 3)), Pose.identity(), Pose.identity())
    with pytest.raises(EmptyModel):
        adds_metric(np.zeros((0, 3)), Pose.identity(), Pose.identity())


def test_square_symmetry_is_absorbed_by_adds():
    quarter = Pose(Rotation.from_euler("z", 90, degrees=True).as_matrix())
    gt = random_pose(np.random.default_rng(1))
    pred = compose(gt, quarter)
    assert adds_metric(SQUARE, pred, gt) == pytest.approx(0.0, abs=1e-12)
    # each corner lands on its neighbour, sqrt(2) away
    assert add_metric(SQUARE, pred, gt) == pytest.approx(np.sqrt(2), abs=1e-12)


@settings(max_examples=30)
@given(seeds)
def test_add_metric_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 0.05, (50, 3))
    a, b = random_pose(rng), random_pose(rng)
    add = sum(np.linalg.norm(b.rotation @ p + b.translation - a.rotation @ p - a.translation) for p in pts) / 50
    adds = sum(
        min(np.linalg.norm(b.rotation @ q + b.translation - a.rotation @ p - a.translation) for q in pts) for p in pts
    ) / 50
    assert add_metric(pts, a, b) == pytest.approx(add, abs=1e-12)
    assert adds_metric(pts, a, b) == pytest.approx(adds, abs=1e-12)
    assert adds_metric(pts, a, b) <= add_metric(pts, a, b) + 1e-12


@settings(max_examples=30)
@given(seeds)
def test_add_invariant_under_common_left_transform(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 0.05, (40, 3))
    a, b, g = random_pose(rng), random_pose(rng), random_pose(rng)
    assert add_metric(pts, compose(g, a), compose(g, b)) == pytest.approx(add_metric(pts, a, b), abs=1e-9)


def test_success_rule():
    assert success(0.009, 0.1)
    assert not success(0.010, 0.1)
    assert success(0.0, 0.02)
    assert success(0.0099999, 0.1) and not success(0.0100001, 0.1)
    with pytest.raises(ValueError):
        success(0.0, 0.0)


def test_keypoint_error_examples():
    gt = np.zeros((3, 3))
    per, mean = keypoint_error(gt, gt)
    assert np.all(per == 0) and mean == 0
    pred = gt.copy()
    pred[1] = [0.003, 0.004, 0.0]
    per, mean = keypoint_error(pred, gt)
    assert per[1] == pytest.approx(0.005, abs=1e-15)
    assert mean == pytest.approx(0.005 / 3, abs=1e-15)


def test_keypoint_error_excludes_invalid(rng):
    gt = rng.normal(size=(9, 3))
    pts = rng.normal(size=(9, 3))
    valid = rng.random(9) < 0.6
    valid[0] = True
    per, mean = keypoint_error(Keypoints3D(pts, valid), gt)
    direct = [np.sqrt(np.sum((pts[i] - gt[i]) ** 2)) for i in range(9) if valid[i]]
    assert mean == pytest.approx(np.mean(direct), abs=1e-14)
    assert np.all(np.isnan(per[~valid]))
    with pytest.raises(NoValidPoints):
        keypoint_error(Keypoints3D(pts, np.zeros(9, bool)), gt)
    with pytest.raises(ValueError):
        keypoint_error(pts[:4], gt)


def test_recall_trivial_cases():
    samples = [(0.01, np.zeros(9)), (0.05, np.zeros(9)), (0.19, np.zeros(9))]
    curve = recall_curve(samples)
    assert [b.recall for b in curve.bins] == [1.0, 1.0, 1.0]
    curve = recall_curve([(b, np.ones(9)) for b, _ in samples])
    assert [b.recall for b in curve.bins] == [0.0, 0.0, 0.0]


def test_recall_hand_counted():
    samples = [
        (0.005, [0.01, 0.02, 0.05]),
        (0.015, [0.03, 0.029]),
        (0.019, [np.nan]),
        (0.02, [0.0]),
        (0.031, [0.1, 0.2]),
        (0.039, [0.001]),
        (0.07, [0.04, 0.02, 0.02]),
        (0.075, [0.5]),
        (0.079, [0.0299]),
        (0.061, []),
    ]
    curve = recall_curve(samples, bin_width=0.02)
    # bin 0: hits 0.01, 0.02, 0.029 of 6; bin 1: 0.0, 0.001 of 4; bin 3: 0.02, 0.02, 0.0299 of 5
    assert [(b.low, b.count) for b in curve.bins] == [(0.0, 6), (0.02, 4), (0.06, 5)]
    assert [b.recall for b in curve.bins] == pytest.approx([3 / 6, 2 / 4, 3 / 5])
    assert curve.threshold == 0.03


@settings(max_examples=30)
@given(seeds)
def test_recall_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    samples = [(rng.uniform(0, 0.2), rng.exponential(0.03, 9)) for _ in range(30)]
    lo, hi = sorted(rng.uniform(0, 0.1, 2))
    a, b = recall_curve(samples, threshold=lo), recall_curve(samples, threshold=hi)
    for x, y in zip(a.bins, b.bins):
        assert x.low == y.low and x.recall <= y.recall
        assert 0.0 <= x.recall <= 1.0


def test_recall_rejects_bad_bin_width():
    with pytest.raises(ValueError):
        recall_curve([(0.1, [0.0])], bin_width=0.0)


def test_evaluate_pose_uses_adds_for_symmetric(models):
    cyl = models["cylinder"]
    assert cyl.symmetric
    gt = random_pose(np.random.default_rng(3), 0.2)
    # spin about the cylinder's z axis: large ADD, tiny ADD-S
    spin = compose(gt, Pose(Rotation.from_rotvec([0.0, 0.0, 0.7]).as_matrix()))
    res = evaluate_pose(cyl, spin, gt, [0.001] * 9, 0.1)
    assert res.add > 0.1 * cyl.diameter
    assert res.add_s < 0.1 * cyl.diameter
    assert res.success and res.baseline == 0.1
    box = models["box"]
    res = evaluate_pose(box, compose(gt, Pose(Rotation.from_rotvec([0, 0, 0.7]).as_matrix())), gt, [0.0], 0.2)
    assert not res.success
    assert res.add_s <= res.add + 1e-12
