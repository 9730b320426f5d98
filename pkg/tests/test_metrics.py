import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from socs.errors import EmptyEval
from socs.geom import AnisoSimilarity, OrientedBox, RigidTransform, axis_angle, random_rotation
from socs.metrics import (
    EvalRecord,
    box_from_pose,
    box_iou_3d,
    compile_report,
    rotation_error,
    write_residuals_csv,
)

Z = [0.0, 0.0, 1.0]


def unit_cube(center=(0, 0, 0), R=None):
    return OrientedBox(np.asarray(center, float), [0.5, 0.5, 0.5], np.eye(3) if R is None else R)


def record(rot_deg, shift, rid=""):
    """Unit-cube record whose prediction is off by ``rot_deg`` about z and ``shift`` along x."""
    gt = AnisoSimilarity(RigidTransform(), 1.0)
    pred = AnisoSimilarity(RigidTransform(axis_angle(Z, np.radians(rot_deg)), [shift, 0, 0]), 1.0)
    return EvalRecord(gt, unit_cube(), pred, unit_cube([shift, 0, 0]), "box", record_id=rid)


# --- rotation error ---------------------------------------------------------

def test_rotation_error_zero_and_ten_degrees():
    R = random_rotation(np.random.default_rng(0))
    assert rotation_error(R, R) == pytest.approx(0.0, abs=1e-9)
    assert rotation_error(R, R @ axis_angle(Z, np.radians(10))) == pytest.approx(10.0, abs=1e-9)


def test_rotation_error_range():
    rng = np.random.default_rng(1)
    for _ in range(200):
        e = rotation_error(random_rotation(rng), random_rotation(rng))
        assert 0.0 <= e <= 180.0
    assert rotation_error(np.eye(3), axis_angle([1, 1, 0], np.pi)) == pytest.approx(180.0, abs=1e-9)


def test_symmetry_sweep_every_yaw_is_free():
    R_gt = random_rotation(np.random.default_rng(2))
    yaws = np.linspace(0.0, 2 * np.pi, 3600, endpoint=False)
    worst = max(rotation_error(R_gt, R_gt @ axis_angle(Z, y), symmetry_axis=Z) for y in yaws)
    assert worst <= 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_symmetry_closed_form_matches_brute_force(seed):
    from scipy.optimize import minimize_scalar

    rng = np.random.default_rng(seed)
    R_gt, R_pred = random_rotation(rng), random_rotation(rng)
    yaws = np.linspace(0.0, 2 * np.pi, 3600, endpoint=False)

    def err(y):
        return rotation_error(R_gt, R_pred @ axis_angle(Z, y))

    coarse = yaws[np.argmin([err(y) for y in yaws])]
    step = yaws[1]
    fine = minimize_scalar(err, bounds=(coarse - step, coarse + step), method="bounded",
                           options={"xatol": 1e-12})
    assert rotation_error(R_gt, R_pred, symmetry_axis=Z) == pytest.approx(fine.fun, abs=1e-6)


# --- box IoU ----------------------------------------------------------------

def test_iou_identical_boxes():
    b = OrientedBox([1, 2, 3], [0.2, 0.4, 0.1], random_rotation(np.random.default_rng(0)))
    assert box_iou_3d(b, b) == pytest.approx(1.0, abs=0.01)


def test_iou_disjoint_is_exactly_zero():
    assert box_iou_3d(unit_cube(), unit_cube([3, 0, 0])) == 0.0
    # touching corners but no overlap, inside the bounding-sphere test
    assert box_iou_3d(unit_cube(), unit_cube([1.2, 0.4, 0])) == 0.0


def test_iou_half_offset_cubes_is_one_third():
    assert box_iou_3d(unit_cube(), unit_cube([0.5, 0, 0])) == pytest.approx(1 / 3, abs=0.01)


def test_iou_is_seeded():
    a, b = unit_cube(), unit_cube([0.3, 0.1, 0], axis_angle(Z, 0.4))
    assert box_iou_3d(a, b, seed=4) == box_iou_3d(a, b, seed=4)


@given(st.floats(0.0, 0.9), st.floats(0.0, 0.9), st.floats(0.0, np.pi))
def test_iou_symmetric(dx, dy, yaw):
    a = OrientedBox([0, 0, 0], [0.5, 0.3, 0.2])
    b = OrientedBox([dx, dy, 0.05], [0.4, 0.4, 0.25], axis_angle(Z, yaw))
    assert abs(box_iou_3d(a, b, 100_000) - box_iou_3d(b, a, 100_000)) <= 0.01


def test_box_from_pose():
    pose = AnisoSimilarity(RigidTransform(axis_angle(Z, 0.3), [1, 0, 0]), [2, 1, 0.5])
    box = box_from_pose(pose, [-1, -1, -1], [1, 1, 1])
    np.testing.assert_allclose(box.center, [1, 0, 0])
    np.testing.assert_allclose(box.half_extents, [2, 1, 0.5])
    np.testing.assert_allclose(box.rotation, pose.rotation)


# --- report -----------------------------------------------------------------

def test_report_all_exact():
    rep = compile_report([record(0, 0) for _ in range(4)], iou_samples=20_000)
    assert all(v == 1.0 for v in rep.precision.values())
    assert all(v == 1.0 for v in rep.iou.values())
    assert rep.rotation_mean == pytest.approx(0.0, abs=1e-9)
    assert rep.translation_mean == 0.0


def test_threshold_logic_single_record():
    rep = compile_report([record(6, 0.01)], iou_samples=20_000)
    assert rep.precision["10deg2cm"] == 1.0
    assert rep.precision["5deg2cm"] == 0.0


# (rotation degrees, translation meters) per record, and the table worked out by hand
HAND_RECORDS = [(0, 0), (3, 0.01), (4.9, 0.049), (6, 0.01), (9, 0.03),
                (12, 0.001), (2, 0.06), (5.5, 0.01), (1, 0.3), (20, 0.2)]
HAND_TABLE = {
    "5deg2cm": 0.2, "5deg5cm": 0.3, "10deg2cm": 0.4, "10deg5cm": 0.6,
    "5deg0.05": 0.4,                       # translation over the cube diagonal sqrt(3)
    "IoU50": 1.0, "IoU75": 0.8,            # unit cubes shifted by d: IoU = (1 - d) / (1 + d)
    "rotation_mean": 6.34, "rotation_median": 5.2,
    "translation_mean": 0.067, "translation_median": 0.02,
}


def test_report_matches_hand_table():
    rep = compile_report([record(r, t, str(i)) for i, (r, t) in enumerate(HAND_RECORDS)], iou_samples=50_000)
    got = {**rep.precision, **rep.iou, "rotation_mean": rep.rotation_mean,
           "rotation_median": rep.rotation_median, "translation_mean": rep.translation_mean,
           "translation_median": rep.translation_median}
    for key, want in HAND_TABLE.items():
        assert got[key] == pytest.approx(want, abs=1e-9), key


@given(st.lists(st.tuples(st.floats(0, 30), st.floats(0, 0.1)), min_size=1, max_size=12))
def test_precision_monotone_in_thresholds(errs):
    rep = compile_report([record(r, t) for r, t in errs], iou_samples=2_000)
    p = rep.precision
    assert p["5deg2cm"] <= p["5deg5cm"] <= p["10deg5cm"]
    assert p["5deg2cm"] <= p["10deg2cm"] <= p["10deg5cm"]
    assert all(0.0 <= v <= 1.0 for v in p.values())


def test_failed_views_count_as_misses():
    rep = compile_report([record(0, 0), record(0, 0)], iou_samples=5_000, failed=2)
    assert rep.precision["10deg5cm"] == 0.5 and rep.iou["IoU50"] == 0.5
    assert rep.rotation_median == pytest.approx(0.0, abs=1e-9)
    only_failures = compile_report([], failed=3)
    assert only_failures.precision["10deg5cm"] == 0.0 and np.isnan(only_failures.rotation_mean)


def test_empty_eval():
    with pytest.raises(EmptyEval):
        compile_report([])


def test_symmetric_record_ignores_yaw():
    rec = record(40, 0.0)
    rec.symmetry_axis = np.array(Z)
    assert rec.rotation_error() == pytest.approx(0.0, abs=1e-9)


def test_report_files(tmp_path):
    recs = [record(r, t, str(i)) for i, (r, t) in enumerate(HAND_RECORDS)]
    rep = compile_report(recs, iou_samples=5_000)
    rep.save(tmp_path)
    write_residuals_csv(recs, tmp_path / "residuals.csv")
    data = json.loads((tmp_path / "report.json").read_text())
    assert set(data) == {"count", "failed", "iou", "precision", "rotation_mean", "rotation_median",
                         "translation_mean", "translation_median"}
    rows = list(csv.DictReader((tmp_path / "residuals.csv").open()))
    assert len(rows) == 10 and float(rows[3]["rotation_error_deg"]) == pytest.approx(6.0)
