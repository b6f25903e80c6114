"""Tests for MSSD/MSPD, recall curves, visibility bins and report aggregation."""

import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poselab.errors import ConfigError, EmptyInput
from poselab.models.dataset import ObjectModel, max_pairwise_distance
from poselab.models.geometry import BoundingBox, CameraIntrinsics, Pose
from poselab.models.results import EvalRecord, ThresholdGrid, pixel_scale
from poselab.services.evaluation import (
    aggregate_report,
    bbox_jitter,
    box_stats,
    compare_methods,
    mspd,
    mssd,
    recall_curve,
    rotation_error_deg,
    subsample_model,
    visibility_bin,
    write_report,
)
from poselab.services.geometry import axis_angle_rotation, project_points, random_rotation

Z_SYMMETRIES = [axis_angle_rotation([0, 0, 1], k * np.pi / 2) for k in range(4)]


@pytest.fixture
def symmetric_model() -> ObjectModel:
    vertices = np.random.default_rng(0).uniform(-0.05, 0.05, size=(20, 3))
    return ObjectModel(
        object_id=1, vertices=vertices, diameter=max_pairwise_distance(vertices),
        symmetries=Z_SYMMETRIES,
    )


def _pose(seed: int) -> Pose:
    rng = np.random.default_rng(seed)
    t = [rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.6, 1.2)]
    return Pose.from_arrays(random_rotation(seed), t)


def _record(est: Pose | None, gt: Pose, K: CameraIntrinsics, object_id: int = 1,
            image_id: int = 0, visibility: float = 1.0) -> EvalRecord:
    return EvalRecord(
        scene_id=0, image_id=image_id, object_id=object_id, est_pose=est, gt_pose=gt,
        intrinsics=K, visibility=visibility, image_width=K.width,
    )


def test_mssd_matches_brute_force(symmetric_model):
    for seed in range(200):
        est, gt = _pose(2 * seed), _pose(2 * seed + 1)
        expected = min(
            max(
                np.linalg.norm((est.R @ x + est.t) - (gt.R @ S @ x + gt.t))
                for x in symmetric_model.vertices
            )
            for S in symmetric_model.symmetries
        )
        assert mssd(est, gt, symmetric_model) == pytest.approx(expected, abs=1e-12)


def test_mspd_matches_brute_force(symmetric_model, intrinsics):
    K = CameraIntrinsics(fx=572.4, fy=573.6, px=325.3, py=242.0, width=640, height=480)
    for seed in range(50):
        est, gt = _pose(2 * seed), _pose(2 * seed + 1)
        v = symmetric_model.vertices
        est_px = project_points(v, est.R, est.t, K)
        expected = min(
            np.linalg.norm(est_px - project_points(v, gt.R @ S, gt.t, K), axis=1).max()
            for S in symmetric_model.symmetries
        )
        assert mspd(est, gt, symmetric_model, K) == pytest.approx(expected, abs=1e-9)


def test_errors_vanish_for_symmetric_equivalents(symmetric_model, intrinsics):
    gt = Pose.from_arrays(random_rotation(3), [0.0, 0.0, 1.0])
    for S in Z_SYMMETRIES:
        est = Pose.from_arrays(gt.R @ S, gt.t)
        assert mssd(est, gt, symmetric_model) == pytest.approx(0.0, abs=1e-12)
        assert mspd(est, gt, symmetric_model, intrinsics) == pytest.approx(0.0, abs=1e-9)
        assert rotation_error_deg(est.R, gt.R, Z_SYMMETRIES) == pytest.approx(0.0, abs=1e-5)


def test_mssd_of_a_pure_translation_offset(cube_model):
    gt = Pose.from_arrays(np.eye(3), [0.0, 0.0, 1.0])
    est = Pose.from_arrays(np.eye(3), [0.03, 0.0, 1.04])
    assert mssd(est, gt, cube_model) == pytest.approx(0.05, abs=1e-12)


def test_mspd_of_a_lateral_shift_on_a_planar_model(intrinsics):
    plane = np.array([[-0.05, -0.05, 0.0], [0.05, -0.05, 0.0], [0.0, 0.05, 0.0]])
    model = ObjectModel(
        object_id=1, vertices=plane, diameter=max_pairwise_distance(plane), symmetries=[np.eye(3)]
    )
    gt = Pose.from_arrays(np.eye(3), [0.0, 0.0, 1.0])
    est = Pose.from_arrays(np.eye(3), [0.002, 0.0, 1.0])
    assert mspd(est, gt, model, intrinsics) == pytest.approx(intrinsics.fx * 0.002)


def test_recall_curve_hand_computed():
    errors = [0.01, 0.04, 0.05, 0.07, 0.12, 0.2, 0.26, 0.33, 0.5, 0.9]
    curve = recall_curve(errors, ThresholdGrid().mssd)
    assert curve.recalls == pytest.approx([0.2, 0.4, 0.5, 0.5, 0.6, 0.7, 0.8, 0.8, 0.8, 0.8])
    assert curve.average == pytest.approx(0.61)


def test_recall_curve_extremes():
    grid = ThresholdGrid()
    assert recall_curve([0.0] * 5, grid.mssd).average == 1.0
    assert recall_curve([1.0] * 5, grid.mssd).average == 0.0
    assert recall_curve([np.inf], grid.mspd).average == 0.0
    with pytest.raises(EmptyInput):
        recall_curve([], grid.mssd)


@given(
    st.lists(st.floats(0, 2), min_size=1, max_size=30),
    st.floats(1, 5),
)
def test_larger_errors_never_raise_recall(errors, factor):
    grid = ThresholdGrid().mssd
    base = recall_curve(errors, grid).average
    assert recall_curve([e * factor for e in errors], grid).average <= base


def test_threshold_grid_rejects_unsorted_values():
    with pytest.raises(ValueError):
        ThresholdGrid(mssd=(0.2, 0.1))


def test_pixel_scale():
    assert pixel_scale(640) == 1.0
    assert pixel_scale(1280) == 2.0


@pytest.mark.parametrize(
    "visibility, expected", [(0.0, 0), (0.1, 1), (0.55, 5), (0.99, 9), (1.0, 9)]
)
def test_visibility_bins(visibility, expected):
    assert visibility_bin(visibility) == expected


def test_box_stats():
    stats = box_stats([1.0, 2.0, 3.0, 4.0, 100.0, np.nan], 0.0, 0.1)
    assert stats.count == 5
    assert (stats.q1, stats.median, stats.q3) == (2.0, 3.0, 4.0)
    assert (stats.whisker_low, stats.whisker_high) == (1.0, 4.0)
    assert box_stats([], 0.0, 0.1).median is None


def test_bbox_jitter_bounds_and_determinism():
    box = BoundingBox(bx=100, by=50, w=40, h=20)
    assert bbox_jitter(box, 0.0, 1) == box
    assert bbox_jitter(box, 0.1, [1, 2]) == bbox_jitter(box, 0.1, [1, 2])
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        j = bbox_jitter(box, 0.1, rng)
        assert abs(j.bx - box.bx) <= 0.1 * box.w + 1e-9
        assert abs(j.by - box.by) <= 0.1 * box.h + 1e-9
        assert 0.9 * box.w - 1e-9 <= j.w <= 1.1 * box.w + 1e-9
        assert 0.9 * box.h - 1e-9 <= j.h <= 1.1 * box.h + 1e-9
    with pytest.raises(ConfigError):
        bbox_jitter(box, 0.6, 0)


def test_subsample_model_is_seeded(symmetric_model):
    a = subsample_model(symmetric_model, 5, seed=1)
    b = subsample_model(symmetric_model, 5, seed=1)
    assert a.vertices.shape == (5, 3)
    assert np.array_equal(a.vertices, b.vertices)
    assert subsample_model(symmetric_model, 100) is symmetric_model


def test_perfect_estimates_score_one(cube_model, intrinsics):
    gt = Pose.from_arrays(random_rotation(0), [0.0, 0.0, 1.0])
    report = aggregate_report([_record(gt, gt, intrinsics)], {1: cube_model})
    assert report.overall.ar == 1.0
    assert report.overall.ar_mssd == report.overall.ar_mspd == 1.0
    assert report.overall.mae_centre_px == 0.0
    assert report.overall.mae_distance_mm == 0.0
    assert report.ar_label == "AR (no-VSD)"
    assert report.failures == []


def test_missing_estimate_counts_as_failure(cube_model, intrinsics):
    gt = Pose.from_arrays(np.eye(3), [0.0, 0.0, 1.0])
    records = [_record(gt, gt, intrinsics), _record(None, gt, intrinsics, image_id=1)]
    report = aggregate_report(records, {1: cube_model})
    assert report.overall.ar == 0.5
    assert report.overall.count == 2
    assert [f.image_id for f in report.failures] == [1]
    assert report.overall.mae_centre_px == 0.0


def test_distance_and_centre_errors(cube_model, intrinsics):
    gt = Pose.from_arrays(np.eye(3), [0.0, 0.0, 1.0])
    est = Pose.from_arrays(np.eye(3), [0.01, 0.0, 1.02])
    report = aggregate_report([_record(est, gt, intrinsics)], {1: cube_model})
    assert report.overall.mae_distance_mm == pytest.approx(20.0)
    # x shifts by fx * 0.01 / 1.02 pixels, y does not move
    assert report.overall.mae_centre_px == pytest.approx(0.5 * intrinsics.fx * 0.01 / 1.02)


def test_report_is_order_independent(symmetric_model, cube_model, intrinsics):
    records = [
        _record(_pose(i), _pose(i + 100), intrinsics, object_id=1 + i % 2, image_id=i,
                visibility=(i % 10) / 10)
        for i in range(20)
    ]
    models = {1: symmetric_model, 2: cube_model.model_copy(update={"object_id": 2})}
    shuffled = list(records)
    random.Random(0).shuffle(shuffled)
    a = aggregate_report(records, models).model_dump(mode="json")
    b = aggregate_report(shuffled, models).model_dump(mode="json")
    assert a == b
    assert sorted(str(k) for k in a["per_object"]) == ["1", "2"]
    assert len(a["visibility_bins_mspd_error"]) == 10


def test_empty_records():
    with pytest.raises(EmptyInput):
        aggregate_report([], {})


def test_write_report_and_compare(tmp_path, cube_model, intrinsics):
    gt = Pose.from_arrays(np.eye(3), [0.0, 0.0, 1.0])
    good = aggregate_report([_record(gt, gt, intrinsics)], {1: cube_model})
    est = Pose.from_arrays(np.eye(3), [0.05, 0.0, 1.0])
    bad = aggregate_report([_record(est, gt, intrinsics)], {1: cube_model})
    written = write_report(good, tmp_path / "report.json")
    assert [p.name for p in written] == [
        "report.json", "report.objects.csv", "report.boxplots.csv"
    ]
    table = compare_methods({"lut": bad, "regression": good})
    row = table[(table["metric"] == "AR_MSPD") & (table["object_id"] == "all")].iloc[0]
    assert row["regression"] == 1.0
    assert row["lut"] < 1.0
