"""Category templates, per-instance warps into the canonical space, and bin codecs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from socs.errors import DataError, DimensionMismatch, InvalidBin
from socs.geom import (
    AnisoSimilarity,
    Frame,
    KeypointSet,
    PointCloud,
    as_points,
    read_json,
    read_ply,
    write_json,
    write_ply,
)
from socs.tps import TpsWarp, fit_tps

DEFAULT_REGULARIZATION = 0.0
INTERP_TOL = 1e-6


@dataclass(frozen=True)
class CategoryTemplate:
    mean_shape: PointCloud
    template_keypoints: KeypointSet
    category_diagonal: float
    name: str = ""

    def __post_init__(self):
        pts = self.mean_shape.points
        if np.abs(pts).max() > 0.5 + 1e-9:
            raise DataError("mean shape must lie in the unit cube centered at the origin")
        lo, hi = pts.min(0), pts.max(0)
        pad = 0.1 * (hi - lo)
        kps = self.template_keypoints.keypoints
        if np.any(kps < lo - pad - 1e-9) or np.any(kps > hi + pad + 1e-9):
            raise DataError("template keypoints fall outside the inflated mean-shape box")
        if not self.category_diagonal > 0:
            raise DataError("category diagonal must be positive")

    @property
    def num_keypoints(self) -> int:
        return len(self.template_keypoints)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean_shape.bbox()


@dataclass(frozen=True)
class InstanceRecord:
    shape: PointCloud
    keypoints: KeypointSet
    warp: TpsWarp
    gt_pose: AnisoSimilarity
    instance_id: str = ""

    def check(self, template: CategoryTemplate, tol: float = INTERP_TOL) -> float:
        """Return the keypoint interpolation residual, raising if it exceeds ``tol``."""
        if len(self.keypoints) != template.num_keypoints:
            raise DimensionMismatch("instance and template keypoint counts differ")
        res = float(np.abs(self.warp(self.keypoints.keypoints) - template.template_keypoints.keypoints).max())
        if res > tol:
            raise DataError(f"warp residual {res:.3g} exceeds {tol:g}")
        return res


@dataclass(frozen=True)
class BinCodec:
    num_bins: int = 128
    lo: float = -0.5
    hi: float = 0.5

    def __post_init__(self):
        if self.num_bins < 2:
            raise DataError("need at least 2 bins")
        if not self.lo < self.hi:
            raise DataError("codec range must satisfy lo < hi")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.num_bins

    def clamp(self, coords) -> np.ndarray:
        return np.clip(np.asarray(coords, dtype=np.float64), self.lo, self.hi)

    def encode(self, coords) -> np.ndarray:
        v = self.clamp(coords)
        idx = np.floor((v - self.lo) / self.width).astype(np.int64)
        return np.clip(idx, 0, self.num_bins - 1)

    def decode(self, bins) -> np.ndarray:
        b = np.asarray(bins)
        if not np.issubdtype(b.dtype, np.integer):
            if not np.all(np.equal(np.mod(b, 1), 0)):
                raise InvalidBin("bin indices must be integers")
            b = b.astype(np.int64)
        if np.any(b < 0) or np.any(b >= self.num_bins):
            raise InvalidBin(f"bin index outside [0, {self.num_bins})")
        return self.lo + (b + 0.5) * self.width

    def to_json(self) -> dict:
        return {"num_bins": self.num_bins, "lo": self.lo, "hi": self.hi}


def encode(coord, codec: BinCodec) -> np.ndarray:
    return codec.encode(coord)


def decode(bins, codec: BinCodec) -> np.ndarray:
    return codec.decode(bins)


@dataclass(frozen=True)
class SocsLabel:
    coord: np.ndarray  # (n, 3) clamped canonical coordinates
    bins: np.ndarray   # (n, 3) int


def build_instance_warp(
    instance_kps: KeypointSet,
    template: CategoryTemplate,
    regularization: float = DEFAULT_REGULARIZATION,
    kernel_centers: str = "source",
) -> TpsWarp:
    if len(instance_kps) != template.num_keypoints:
        raise DimensionMismatch(
            f"instance has {len(instance_kps)} keypoints, template has {template.num_keypoints}"
        )
    return fit_tps(instance_kps, template.template_keypoints, regularization, kernel_centers)


def identity_warp(instance_kps: KeypointSet) -> TpsWarp:
    """Warp used for the NOCS label space: the normalized object frame itself."""
    return TpsWarp.identity(instance_kps.keypoints)


def label_points(x_cam, rec: InstanceRecord, codec: BinCodec) -> SocsLabel:
    x_obj = rec.gt_pose.apply_inverse(as_points(x_cam))
    coord = codec.clamp(rec.warp(x_obj))
    return SocsLabel(coord, codec.encode(coord))


def label_point(x_cam, rec: InstanceRecord, codec: BinCodec) -> SocsLabel:
    lab = label_points(x_cam, rec, codec)
    if np.ndim(x_cam) == 1:
        return SocsLabel(lab.coord[0], lab.bins[0])
    return lab


# --- bundle IO -----------------------------------------------------------

def save_template(template: CategoryTemplate, codec: BinCodec, root, label_space: str = "socs") -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_ply(root / "template.ply", template.mean_shape.points)
    write_json(root / "template_keypoints.json", {
        "keypoints": template.template_keypoints.keypoints.tolist(),
        "parts": list(template.template_keypoints.parts),
    })
    write_json(root / "category.json", {
        "name": template.name,
        "category_diagonal": template.category_diagonal,
        "codec": codec.to_json(),
        "label_space": label_space,
    })


def load_template(root) -> tuple[CategoryTemplate, BinCodec, dict]:
    root = Path(root)
    meta = read_json(root / "category.json")
    kp = read_json(root / "template_keypoints.json")
    template = CategoryTemplate(
        PointCloud(read_ply(root / "template.ply"), Frame.SOCS),
        KeypointSet(kp["keypoints"], Frame.SOCS, tuple(kp.get("parts", ()))),
        float(meta["category_diagonal"]),
        meta.get("name", ""),
    )
    return template, BinCodec(**meta["codec"]), meta


def save_instance(rec: InstanceRecord, root) -> None:
    d = Path(root) / "instances" / rec.instance_id
    d.mkdir(parents=True, exist_ok=True)
    write_ply(d / "shape.ply", rec.shape.points)
    write_json(d / "keypoints.json", {
        "keypoints": rec.keypoints.keypoints.tolist(),
        "parts": list(rec.keypoints.parts),
    })
    write_json(d / "warp.json", rec.warp.to_json())
    write_json(d / "pose.json", rec.gt_pose.to_json())


def load_instance(root, instance_id: str) -> InstanceRecord:
    d = Path(root) / "instances" / instance_id
    kp = read_json(d / "keypoints.json")
    return InstanceRecord(
        PointCloud(read_ply(d / "shape.ply")),
        KeypointSet(kp["keypoints"], Frame.OBJECT, tuple(kp.get("parts", ()))),
        TpsWarp.from_json(read_json(d / "warp.json")),
        AnisoSimilarity.from_json(read_json(d / "pose.json")),
        instance_id,
    )


def list_instances(root) -> list[str]:
    d = Path(root) / "instances"
    return sorted(p.name for p in d.iterdir() if p.is_dir()) if d.exists() else []
