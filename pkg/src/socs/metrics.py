"""Pose-estimation metrics: rotation/translation errors, 3D box IoU, precision tables."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from socs.errors import EmptyEval
from socs.geom import AnisoSimilarity, OrientedBox, write_json

IOU_THRESHOLDS = (0.50, 0.75)
POSE_THRESHOLDS = ((5, 0.02), (5, 0.05), (10, 0.02), (10, 0.05))


def rotation_error(R_gt, R_pred, symmetry_axis=None) -> float:
    """Geodesic rotation error in degrees.

    With ``symmetry_axis`` (a unit vector in the object frame) the error is
    minimized over rotations of the prediction about that axis, which reduces
    to the angle between the two images of the axis.
    """
    R_gt = np.asarray(R_gt, dtype=np.float64)
    R_pred = np.asarray(R_pred, dtype=np.float64)
    # atan2 of (sin, cos) rather than arccos of cos alone: arccos flattens out
    # near 0 and 180 degrees, where the symmetry sweep needs sub-microdegree accuracy.
    if symmetry_axis is not None:
        a = np.asarray(symmetry_axis, dtype=np.float64)
        a = a / np.linalg.norm(a)
        u, v = R_gt @ a, R_pred @ a
        return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(u, v)), np.dot(u, v))))
    M = R_gt.T @ R_pred
    cos = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    sin = np.linalg.norm(M - M.T) / (2.0 * np.sqrt(2.0))
    return float(np.degrees(np.arctan2(sin, cos)))


def translation_error(box_gt: OrientedBox, box_pred: OrientedBox) -> float:
    return float(np.linalg.norm(box_gt.center - box_pred.center))


def box_iou_3d(a: OrientedBox, b: OrientedBox, mc_samples: int = 200_000, seed: int = 0) -> float:
    """Monte-Carlo IoU: the fraction of uniform samples in ``a`` that land in ``b``."""
    # Bounding-sphere rejection gives exact zeros for clearly disjoint boxes.
    if np.linalg.norm(a.center - b.center) > np.linalg.norm(a.half_extents) + np.linalg.norm(b.half_extents):
        return 0.0
    rng = np.random.default_rng(seed)
    local = rng.uniform(-1.0, 1.0, size=(mc_samples, 3)) * a.half_extents
    pts = local @ a.rotation.T + a.center
    frac = float(b.contains(pts).mean())
    inter = frac * a.volume
    union = a.volume + b.volume - inter
    return float(inter / union) if union > 0 else 0.0


def box_from_pose(pose: AnisoSimilarity, lo, hi) -> OrientedBox:
    """Map the canonical axis-aligned box [lo, hi] through the pose."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    center = pose.apply((lo + hi) / 2)[0]
    return OrientedBox(center, pose.scale * (hi - lo) / 2, pose.rotation)


@dataclass
class EvalRecord:
    gt: AnisoSimilarity
    gt_box: OrientedBox
    pred: AnisoSimilarity
    pred_box: OrientedBox
    category: str = ""
    symmetry_axis: np.ndarray | None = None
    record_id: str = ""

    def rotation_error(self) -> float:
        return rotation_error(self.gt.rotation, self.pred.rotation, self.symmetry_axis)

    def translation_error(self) -> float:
        return translation_error(self.gt_box, self.pred_box)


@dataclass
class MetricsReport:
    count: int
    failed: int = 0
    iou: dict = field(default_factory=dict)
    precision: dict = field(default_factory=dict)
    rotation_mean: float = 0.0
    rotation_median: float = 0.0
    translation_mean: float = 0.0
    translation_median: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "report.json", self.to_json())
        with (out / "report.csv").open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "value"])
            for k, v in self.iou.items():
                w.writerow([k, v])
            for k, v in self.precision.items():
                w.writerow([k, v])
            for k in ("rotation_mean", "rotation_median", "translation_mean", "translation_median"):
                w.writerow([k, getattr(self, k)])


def precision_key(deg: float, trans: float, unit: str = "cm") -> str:
    if unit == "cm":
        return f"{deg:g}deg{trans * 100:g}cm"
    return f"{deg:g}deg{trans:g}"


def compile_report(records, iou_samples: int = 200_000, seed: int = 0,
                   normalized_thresholds=((5, 0.05),), failed: int = 0) -> MetricsReport:
    """Precision at each (degrees, meters) threshold counts records strictly below both.

    ``failed`` views (no pose returned) count as misses in every precision and
    IoU fraction; error statistics cover the records only (NaN when there are none).
    """
    records = list(records)
    if not records and not failed:
        raise EmptyEval("no records to evaluate")
    n = len(records) + failed
    rot = np.array([r.rotation_error() for r in records])
    trans = np.array([r.translation_error() for r in records])
    ious = np.array([box_iou_3d(r.gt_box, r.pred_box, iou_samples, seed) for r in records])
    report = MetricsReport(len(records), failed)
    for tau in IOU_THRESHOLDS:
        report.iou[f"IoU{int(round(tau * 100))}"] = float(np.sum(ious >= tau) / n)
    for deg, m in POSE_THRESHOLDS:
        report.precision[precision_key(deg, m)] = float(np.sum((rot < deg) & (trans < m)) / n)
    # ModelNet40-style threshold in normalized units: translation divided by the gt diagonal.
    diag = np.array([2 * np.linalg.norm(r.gt_box.half_extents) for r in records])
    for deg, m in normalized_thresholds:
        hit = (rot < deg) & (trans / diag < m) if records else np.zeros(0, bool)
        report.precision[precision_key(deg, m, unit="")] = float(np.sum(hit) / n)
    if records:
        report.rotation_mean = float(rot.mean())
        report.rotation_median = float(np.median(rot))
        report.translation_mean = float(trans.mean())
        report.translation_median = float(np.median(trans))
    else:
        report.rotation_mean = report.rotation_median = float("nan")
        report.translation_mean = report.translation_median = float("nan")
    return report


def write_residuals_csv(records, path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["record_id", "category", "rotation_error_deg", "translation_error"])
        for r in records:
            w.writerow([r.record_id, r.category, r.rotation_error(), r.translation_error()])
