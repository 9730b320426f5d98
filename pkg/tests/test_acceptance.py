"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Criteria 1-4 and 9 are computed here.  Criteria 5-8 are desk-scale training
studies that take hours; they are read from ``results/studies/<study>/summary.json``
(produced by ``python3 -m socs.studies``).  Set ``SOCS_RUN_STUDIES=1`` to run
missing studies from inside the test.  Every line is also collected into
``results/acceptance.json``.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from socs import studies
from socs.category import BinCodec
from socs.data import DatasetConfig, build_dataset
from socs.geom import AnisoSimilarity, KeypointSet, OrientedBox, axis_angle, random_rigid, random_rotation
from socs.infer import InferConfig, evaluate
from socs.metrics import box_iou_3d, compile_report, rotation_error
from socs.posefit import CorrespondenceSet, RansacConfig, fit_aniso, fit_robust
from socs.tps import fit_tps, warp

ROOT = Path(__file__).resolve().parents[1]
STUDY_DIR = ROOT / "results" / "studies"
LEDGER = {}


def report(n: int, ok: bool, text: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {text}"
    print("\n" + line)
    LEDGER[n] = {"pass": bool(ok), "detail": text}
    out = ROOT / "results" / "acceptance.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    old = json.loads(out.read_text()) if out.is_file() else {}
    old.update({str(k): v for k, v in LEDGER.items()})
    out.write_text(json.dumps(old, indent=1, sort_keys=True))
    assert ok, line


def rot_gap(R1, R2):
    return np.linalg.norm(R1 - R2) / np.sqrt(2)


def test_criterion_1_tps_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_fit, worst_affine = 0.0, 0.0
    for i in range(1000):
        m = (8, 16, 32, 64)[i % 4]
        src = KeypointSet(rng.uniform(-0.5, 0.5, size=(m, 3)))
        dst = KeypointSet(rng.uniform(-0.5, 0.5, size=(m, 3)))
        worst_fit = max(worst_fit, np.abs(warp(fit_tps(src, dst), src.keypoints) - dst.keypoints).max())
        if i % 10 == 0:
            A, c = rng.normal(size=(3, 3)) + 2 * np.eye(3), rng.normal(size=3)
            phi = fit_tps(src, KeypointSet(src.keypoints @ A.T + c))
            probes = rng.uniform(-1, 1, size=(200, 3))
            worst_affine = max(worst_affine, np.abs(warp(phi, probes) - (probes @ A.T + c)).max())
    secs = time.perf_counter() - t0
    report(1, worst_fit <= 1e-8 and worst_affine <= 1e-6 and secs < 10,
           f"max keypoint residual {worst_fit:.2e} (<=1e-8), affine probe error {worst_affine:.2e} (<=1e-6), "
           f"{secs:.1f}s (<10s)")


def test_criterion_2_gradient_check():
    from gradcheck import check_model

    t0 = time.perf_counter()
    worst, kinks = 0.0, 0
    for seed in range(5):
        res = check_model(seed)
        worst = max(worst, max(res["errors"].values()))
        kinks += res["kinks"]
    secs = time.perf_counter() - t0
    report(2, worst <= 1e-3 and secs < 120,
           f"max per-tensor relative error {worst:.2e} (<=1e-3) over 5 seeds, {kinks} kink elements "
           f"re-differenced, {secs:.0f}s (<120s)")


def _problem(seed, n=100):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-0.5, 0.5, size=(n, 3))
    T = AnisoSimilarity(random_rigid(rng, 1.0), rng.uniform(0.1, 0.5, size=3))
    return rng, a, T, T.apply(a)


def _gap(F, T):
    return max(rot_gap(F.rotation, T.rotation), np.abs(F.translation - T.translation).max(),
               np.abs(F.scale - T.scale).max())


def test_criterion_3_pose_solver():
    noiseless = max(_gap(fit_aniso(CorrespondenceSet(a, b)).transform, T)
                    for _, a, T, b in (_problem(2000 + k) for k in range(100)))
    robust_ok = 0
    for trial in range(20):
        rng, a, T, b = _problem(3000 + trial, n=200)
        lo, hi = b.min(0), b.max(0)
        b = b.copy()
        b[:60] = rng.uniform((lo + hi) / 2 - (hi - lo), (lo + hi) / 2 + (hi - lo), size=(60, 3))
        fit = fit_robust(CorrespondenceSet(a, b), RansacConfig(256, 0.02, 4, trial))
        robust_ok += _gap(fit.transform, T) <= 1e-3
    monotone = 0
    for k in range(100):
        rng, a, _, b = _problem(4000 + k)
        h = np.array(fit_aniso(CorrespondenceSet(a, b + rng.normal(scale=0.05, size=b.shape))).objective_history)
        monotone += bool(np.all(np.diff(h) <= 1e-12 * max(1.0, h[0])))
    report(3, noiseless <= 1e-6 and robust_ok >= 19 and monotone == 100,
           f"noiseless worst error {noiseless:.1e} (<=1e-6), 30% outliers recovered {robust_ok}/20 (>=19), "
           f"objective non-increasing {monotone}/100")


def test_criterion_4_oracle_labels():
    t0 = time.perf_counter()
    ds = build_dataset(DatasetConfig(category="lamp", n_train=1, n_test=50, views_per_instance=4,
                                     input_points=1024, n_surface=4096, seed=0))
    views = ds.split_views("test")[:200]
    codec = BinCodec(128)
    records = evaluate(ds, views, "socs", codec, InferConfig(2048, 0.5, 0.05, 256, 0))
    rot = np.array([r.rotation_error() for r in records])
    bin_m = np.array([ds.instances[int(r.record_id.split("-")[1])].diagonal * codec.width for r in records])
    trans_bins = np.array([r.translation_error() for r in records]) / bin_m
    rep = compile_report(records, 20_000, failed=len(views) - len(records))
    p = rep.precision["10deg2cm"]
    secs = time.perf_counter() - t0
    ok = len(records) == len(views) and rot.max() <= 1.5 and trans_bins.max() <= 1.5 and p == 1.0 and secs < 300
    report(4, ok,
           f"SOCS oracle on {len(views)} lamp views: rotation max {rot.max():.2f} deg / median {np.median(rot):.2f} "
           f"(<=1.5), translation max {trans_bins.max():.1f} / median {np.median(trans_bins):.2f} bin widths "
           f"(<=1.5), precision@10deg2cm {p:.3f} (=1.0), {len(views) - len(records)} failed fits, {secs:.0f}s (<300s)")


def _study(name):
    res = studies.load_study(name, STUDY_DIR)
    expected = studies.STUDIES[name][0](studies.desk_config())
    if res is None or set(expected) - set(res):
        if os.environ.get("SOCS_RUN_STUDIES") == "1":
            res = studies.run_study(name, STUDY_DIR)
        else:
            pytest.fail(f"{STUDY_DIR / name / 'summary.json'} missing or incomplete; "
                        f"run python3 -m socs.studies --only {name}")
    return studies.VERDICTS[name](res)


def test_criterion_5_socs_vs_nocs():
    v = _study("labels")
    gaps = ", ".join(f"{g:+.4f}" for g in v["median_gap"])
    var = ", ".join(f"{x:.3f}" for x in v["variation"])
    report(5, v["pass"],
           f"SOCS below NOCS at top variation in {v['wins_top']}/{v['pairs']} seed pairs (>=4); "
           f"median gap NOCS-SOCS by variation [{var}]: [{gaps}], widening={v['widening']}")


def test_criterion_6_sampling():
    v = _study("sampling")
    p, r, c = v["precision"], v["rotation_median"], v["coord_error_median"]
    report(6, v["pass"],
           "median precision@10deg/2 bin widths SI {SI:.3f}, SD {SD:.3f}, P {P:.3f} (SI>=SD and SI>=P, ".format(**p)
           + f"not all zero: {'all zero' if v['degenerate'] else 'ok'}); "
           + "median rotation error SI {SI:.1f}, SD {SD:.1f}, P {P:.1f} deg; ".format(**r)
           + "coordinate error SI {SI:.3f}, SD {SD:.3f}, P {P:.3f}".format(**c))


def test_criterion_7_consistency_loss():
    v = _study("consistency")
    report(7, v["pass"],
           f"feature distance under random rigid motion CL-on {v['on']:.4f} vs CL-off {v['off']:.4f}: "
           f"reduction {v['reduction']:.1%} (>=30%)")


def test_criterion_8_bin_count():
    v = _study("bins")
    report(8, v["pass"],
           f"median coordinate error B=256 {v['error_256']:.4f} vs B=128 {v['error_128']:.4f}: "
           f"ratio {v['ratio']:.3f} (within 1+-0.2), loss decreased={v['loss_decreased']}")


def test_criterion_9_metrics():
    from socs.metrics import EvalRecord
    from socs.geom import RigidTransform

    z = [0.0, 0.0, 1.0]
    cube = lambda c: OrientedBox(c, [0.5, 0.5, 0.5])  # noqa: E731
    iou_third = box_iou_3d(cube([0, 0, 0]), cube([0.5, 0, 0]))
    iou_same = box_iou_3d(cube([0, 0, 0]), cube([0, 0, 0]))
    iou_disjoint = box_iou_3d(cube([0, 0, 0]), cube([2, 0, 0]))
    R = random_rotation(np.random.default_rng(9))
    ten = rotation_error(R, R @ axis_angle(z, np.radians(10)))
    sweep = max(rotation_error(R, R @ axis_angle(z, y), symmetry_axis=z)
                for y in np.linspace(0, 2 * np.pi, 3600, endpoint=False))

    def rec(deg, shift):
        pred = AnisoSimilarity(RigidTransform(axis_angle(z, np.radians(deg)), [shift, 0, 0]), 1.0)
        return EvalRecord(AnisoSimilarity(), cube([0, 0, 0]), pred, cube([shift, 0, 0]))

    single = compile_report([rec(6, 0.01)], 5_000).precision
    rows = [(0, 0), (3, 0.01), (4.9, 0.049), (6, 0.01), (9, 0.03), (12, 0.001), (2, 0.06), (5.5, 0.01),
            (1, 0.3), (20, 0.2)]
    table = compile_report([rec(d, s) for d, s in rows], 50_000)
    want = {"5deg2cm": 0.2, "5deg5cm": 0.3, "10deg2cm": 0.4, "10deg5cm": 0.6, "IoU50": 1.0, "IoU75": 0.8}
    got = {**table.precision, **table.iou}
    table_ok = all(abs(got[k] - v) < 1e-9 for k, v in want.items()) and abs(table.rotation_median - 5.2) < 1e-9
    ok = (abs(iou_third - 1 / 3) <= 0.01 and abs(iou_same - 1) <= 0.01 and iou_disjoint == 0.0
          and abs(ten - 10) <= 1e-9 and sweep <= 1e-6 and single["10deg2cm"] == 1.0
          and single["5deg2cm"] == 0.0 and table_ok)
    report(9, ok,
           f"IoU half-offset cubes {iou_third:.4f} (1/3+-0.01), identical {iou_same:.4f}, disjoint {iou_disjoint}; "
           f"10 deg case {ten:.12f}; symmetry sweep max {sweep:.1e} deg (<=1e-6); threshold logic and "
           f"10-record hand table {'match' if table_ok else 'MISMATCH'}")
