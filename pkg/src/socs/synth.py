"""Procedural object families with analytic semantic keypoints, and partial depth views.

Every family is a union of axis-aligned boxes and frusta described by a few
part parameters (meters).  Keypoints are part landmarks with a fixed order, so
keypoint ``j`` sits on the same named part for every instance of a family.
Shapes are normalized so that the bounding box is centered at the origin and
its diagonal has length 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from socs.errors import EmptyView, InvalidParams
from socs.geom import (
    AnisoSimilarity,
    Frame,
    KeypointSet,
    PointCloud,
    RigidTransform,
    as_points,
)

INPUT_POINTS = 1024
HPR_GAMMA = 3.0          # spherical-flip radius = 10**gamma times the farthest point
DEPTH_SLACK = 0.03       # relative depth behind a pixel's nearest point still counted visible
NUM_KEYPOINTS = 32

# name: (median, lower bound, upper bound)
FAMILIES: dict[str, dict[str, tuple[float, float, float]]] = {
    "lamp": {
        "base_width": (0.16, 0.06, 0.40),
        "base_height": (0.03, 0.01, 0.08),
        "stem_height": (0.35, 0.08, 1.20),
        "stem_radius": (0.012, 0.005, 0.025),
        "arm_length": (0.18, 0.06, 0.60),
        "shade_radius": (0.07, 0.035, 0.18),
        "shade_height": (0.08, 0.03, 0.20),
    },
    "camera": {
        "body_width": (0.12, 0.06, 0.20),
        "body_height": (0.08, 0.04, 0.14),
        "body_depth": (0.05, 0.025, 0.10),
        "lens_radius": (0.025, 0.012, 0.045),
        "lens_length": (0.06, 0.015, 0.25),
        "finder_width": (0.04, 0.015, 0.06),
    },
    "chair": {
        "seat_width": (0.45, 0.30, 0.70),
        "seat_depth": (0.42, 0.30, 0.65),
        "seat_thickness": (0.04, 0.02, 0.08),
        "leg_height": (0.42, 0.20, 0.70),
        "leg_width": (0.04, 0.02, 0.07),
        "back_height": (0.40, 0.10, 0.90),
    },
    "box": {
        "width": (0.30, 0.10, 0.60),
        "depth": (0.20, 0.08, 0.50),
        "height": (0.15, 0.04, 0.45),
        "lid_height": (0.03, 0.008, 0.08),
    },
}

# Families whose proportions vary the most under a given spread.
HIGH_VARIATION = "lamp"


@dataclass(frozen=True)
class ShapeParams:
    category: str
    values: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.category not in FAMILIES:
            raise InvalidParams(f"unknown category {self.category!r}")
        spec = FAMILIES[self.category]
        vals = {k: v[0] for k, v in spec.items()}
        unknown = set(self.values) - set(spec)
        if unknown:
            raise InvalidParams(f"unknown parameters for {self.category}: {sorted(unknown)}")
        vals.update({k: float(v) for k, v in self.values.items()})
        for k, (_, lo, hi) in spec.items():
            if not (lo - 1e-12 <= vals[k] <= hi + 1e-12) or not np.isfinite(vals[k]):
                raise InvalidParams(f"{self.category}.{k}={vals[k]} outside [{lo}, {hi}]")
        object.__setattr__(self, "values", vals)

    @classmethod
    def median(cls, category: str) -> ShapeParams:
        return cls(category, {})

    @classmethod
    def sample(cls, category: str, spread: float, seed: int) -> ShapeParams:
        """Log-uniform perturbation of every part parameter around its median, clipped to bounds."""
        if category not in FAMILIES:
            raise InvalidParams(f"unknown category {category!r}")
        rng = np.random.default_rng(seed)
        vals = {}
        for k, (med, lo, hi) in FAMILIES[category].items():
            vals[k] = float(np.clip(med * np.exp(spread * rng.uniform(-1, 1)), lo, hi))
        return cls(category, vals, seed)


# --- primitive surfaces --------------------------------------------------

@dataclass(frozen=True)
class _Box:
    lo: np.ndarray
    hi: np.ndarray

    def area(self):
        e = self.hi - self.lo
        return 2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])

    def sample(self, rng, n):
        e = self.hi - self.lo
        face_areas = np.array([e[1] * e[2], e[1] * e[2], e[0] * e[2], e[0] * e[2], e[0] * e[1], e[0] * e[1]])
        face = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        pts = self.lo + rng.uniform(size=(n, 3)) * e
        axis = face // 2
        side = face % 2
        pts[np.arange(n), axis] = np.where(side == 0, self.lo[axis], self.hi[axis])
        return pts


@dataclass(frozen=True)
class _Frustum:
    """Truncated cone from ``origin`` along unit ``axis`` with end radii ``r0``/``r1``, capped."""

    origin: np.ndarray
    axis: np.ndarray
    length: float
    r0: float
    r1: float

    def _frame(self):
        a = self.axis / np.linalg.norm(self.axis)
        helper = np.array([1.0, 0, 0]) if abs(a[0]) < 0.9 else np.array([0, 1.0, 0])
        u = np.cross(a, helper)
        u /= np.linalg.norm(u)
        return a, u, np.cross(a, u)

    def areas(self):
        slant = np.hypot(self.length, self.r1 - self.r0)
        return np.array([np.pi * (self.r0 + self.r1) * slant, np.pi * self.r0**2, np.pi * self.r1**2])

    def area(self):
        return self.areas().sum()

    def sample(self, rng, n):
        a, u, v = self._frame()
        areas = self.areas()
        which = rng.choice(3, size=n, p=areas / areas.sum())
        theta = rng.uniform(0, 2 * np.pi, size=n)
        q = rng.uniform(size=n)
        # Lateral: density along the axis proportional to the local radius.
        dr = self.r1 - self.r0
        if abs(dr) < 1e-12:
            s = q
        else:
            s = (np.sqrt(self.r0**2 + q * (self.r1**2 - self.r0**2)) - self.r0) / dr
        radius = self.r0 + dr * s
        h = s * self.length
        cap0 = which == 1
        cap1 = which == 2
        disk = np.sqrt(rng.uniform(size=n))
        radius = np.where(cap0, self.r0 * disk, np.where(cap1, self.r1 * disk, radius))
        h = np.where(cap0, 0.0, np.where(cap1, self.length, h))
        return (
            self.origin
            + h[:, None] * a
            + (radius * np.cos(theta))[:, None] * u
            + (radius * np.sin(theta))[:, None] * v
        )


def _ring(center, axis: int, radius: float) -> np.ndarray:
    """Four points at 0/90/180/270 degrees around a coordinate axis."""
    others = [i for i in range(3) if i != axis]
    pts = np.repeat(np.asarray(center, dtype=np.float64)[None], 4, axis=0)
    pts[0, others[0]] += radius
    pts[1, others[1]] += radius
    pts[2, others[0]] -= radius
    pts[3, others[1]] -= radius
    return pts


def _corners(lo, hi) -> np.ndarray:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return np.array([[x, y, z] for z in (lo[2], hi[2]) for y in (lo[1], hi[1]) for x in (lo[0], hi[0])])


def _lamp(p):
    bw, bh, sh, sr = p["base_width"], p["base_height"], p["stem_height"], p["stem_radius"]
    al, shr, shh = p["arm_length"], p["shade_radius"], p["shade_height"]
    top = bh + sh
    shade_top_r = 0.35 * shr
    parts = {
        "base": _Box(np.array([-bw / 2, -bw / 2, 0.0]), np.array([bw / 2, bw / 2, bh])),
        "stem": _Frustum(np.array([0.0, 0, bh]), np.array([0.0, 0, 1]), sh, sr, sr),
        "arm": _Frustum(np.array([0.0, 0, top]), np.array([1.0, 0, 0]), al, sr, sr),
        "shade": _Frustum(np.array([al, 0, top]), np.array([0.0, 0, -1]), shh, shade_top_r, shr),
    }
    kps = [
        ("base", _corners([-bw / 2, -bw / 2, 0], [bw / 2, bw / 2, bh])),
        ("stem", _ring([0, 0, bh], 2, sr)),
        ("stem", _ring([0, 0, top - 2 * sr], 2, sr)),
        ("arm", _ring([0.3 * al, 0, top], 0, sr)),
        ("arm", _ring([0.6 * al, 0, top], 0, sr)),
        ("shade", _ring([al, 0, top], 2, shade_top_r)),
        ("shade", _ring([al, 0, top - shh], 2, shr)),
    ]
    return parts, kps


def _camera(p):
    w, h, d = p["body_width"], p["body_height"], p["body_depth"]
    lr, ll, fw = p["lens_radius"], p["lens_length"], p["finder_width"]
    fh, fd = 0.5 * fw, 0.6 * d
    parts = {
        "body": _Box(np.array([-w / 2, -d / 2, -h / 2]), np.array([w / 2, d / 2, h / 2])),
        "lens": _Frustum(np.array([0.0, -d / 2, 0]), np.array([0.0, -1, 0]), ll, lr, 1.15 * lr),
        "finder": _Box(np.array([-fw / 2, -fd / 2, h / 2]), np.array([fw / 2, fd / 2, h / 2 + fh])),
    }
    front = np.array([[0, -d / 2, h / 2], [w / 2, -d / 2, 0], [0, -d / 2, -h / 2], [-w / 2, -d / 2, 0]])
    kps = [
        ("body", _corners([-w / 2, -d / 2, -h / 2], [w / 2, d / 2, h / 2])),
        ("body", front),
        ("lens", _ring([0, -d / 2, 0], 1, lr)),
        ("lens", _ring([0, -d / 2 - ll / 2, 0], 1, 1.075 * lr)),
        ("lens", _ring([0, -d / 2 - ll, 0], 1, 1.15 * lr)),
        ("finder", _corners([-fw / 2, -fd / 2, h / 2], [fw / 2, fd / 2, h / 2 + fh])),
    ]
    return parts, kps


def _chair(p):
    w, d, t = p["seat_width"], p["seat_depth"], p["seat_thickness"]
    lh, lw, bk = p["leg_height"], p["leg_width"], p["back_height"]
    top = lh + t
    parts = {"seat": _Box(np.array([-w / 2, -d / 2, lh]), np.array([w / 2, d / 2, top]))}
    leg_centers = [(-w / 2 + lw / 2, -d / 2 + lw / 2), (w / 2 - lw / 2, -d / 2 + lw / 2),
                   (w / 2 - lw / 2, d / 2 - lw / 2), (-w / 2 + lw / 2, d / 2 - lw / 2)]
    for i, (x, y) in enumerate(leg_centers):
        parts[f"leg{i}"] = _Box(np.array([x - lw / 2, y - lw / 2, 0.0]), np.array([x + lw / 2, y + lw / 2, lh]))
    parts["back"] = _Box(np.array([-w / 2, d / 2 - t, top]), np.array([w / 2, d / 2, top + bk]))
    leg_bottoms = np.array([[x, y, 0.0] for x, y in leg_centers])
    leg_mids = np.array([[x + np.sign(x) * lw / 2, y, lh / 2] for x, y in leg_centers])
    back_top = _corners([-w / 2, d / 2 - t, top + bk], [w / 2, d / 2, top + bk])[4:]
    back_mid = _corners([-w / 2, d / 2 - t, top + bk / 2], [w / 2, d / 2, top + bk / 2])[4:]
    seat_edges = np.array([[0, -d / 2, top], [w / 2, 0, top], [-w / 2, 0, top], [0, 0, top]])
    seat_centers = np.array([[0, 0, lh], [0, -d / 2, lh + t / 2]])
    back_quarters = np.array([[-w / 4, d / 2, top + bk], [w / 4, d / 2, top + bk]])
    kps = [
        ("seat", _corners([-w / 2, -d / 2, lh], [w / 2, d / 2, top])),
        ("leg", leg_bottoms),
        ("leg", leg_mids),
        ("back", back_top),
        ("back", back_mid),
        ("seat", seat_edges),
        ("seat", seat_centers),
        ("back", back_quarters),
    ]
    return parts, kps


def _box(p):
    w, d, h, lid = p["width"], p["depth"], p["height"], p["lid_height"]
    e = 0.1 * lid + 0.003
    parts = {
        "body": _Box(np.array([-w / 2, -d / 2, 0.0]), np.array([w / 2, d / 2, h])),
        "lid": _Box(np.array([-w / 2 - e, -d / 2 - e, h]), np.array([w / 2 + e, d / 2 + e, h + lid])),
    }
    c = _corners([-w / 2, -d / 2, 0], [w / 2, d / 2, h])
    edges = [(0, 1), (2, 3), (4, 5), (6, 7), (0, 2), (1, 3), (4, 6), (5, 7), (0, 4), (1, 5), (2, 6), (3, 7)]
    mids = np.array([(c[i] + c[j]) / 2 for i, j in edges])
    lid_c = _corners([-w / 2 - e, -d / 2 - e, h], [w / 2 + e, d / 2 + e, h + lid])
    lid_top = np.array([[0, -d / 2 - e, h + lid], [w / 2 + e, 0, h + lid],
                        [0, d / 2 + e, h + lid], [-w / 2 - e, 0, h + lid]])
    kps = [("body", c), ("body", mids), ("lid", lid_c), ("lid", lid_top)]
    return parts, kps


_BUILDERS = {"lamp": _lamp, "camera": _camera, "chair": _chair, "box": _box}


@dataclass(frozen=True)
class Instance:
    """A normalized instance plus the scale that restores physical size."""

    params: ShapeParams
    shape: PointCloud
    keypoints: KeypointSet
    diagonal: float         # physical bounding-box diagonal, meters
    center: np.ndarray      # physical bounding-box center before normalization


def _layout(params: ShapeParams):
    parts, kps = _BUILDERS[params.category](params.values)
    names = tuple(name for name, arr in kps for _ in range(len(arr)))
    kp = np.concatenate([np.asarray(a, float) for _, a in kps])
    assert len(kp) == NUM_KEYPOINTS, params.category
    return parts, kp, names


def physical_bbox(params: ShapeParams) -> tuple[np.ndarray, np.ndarray]:
    parts, kp, _ = _layout(params)
    lo, hi = [], []
    for prim in parts.values():
        if isinstance(prim, _Box):
            lo.append(prim.lo)
            hi.append(prim.hi)
        else:
            a, u, v = prim._frame()
            r = max(prim.r0, prim.r1)
            ends = np.array([prim.origin, prim.origin + prim.length * a])
            ext = r * np.sqrt(np.clip(1 - a**2, 0, 1))
            lo.append(ends.min(0) - ext)
            hi.append(ends.max(0) + ext)
    return np.min(lo, axis=0), np.max(hi, axis=0)


def generate_instance(params: ShapeParams, n_surface: int = 4096) -> Instance:
    """Area-uniform surface samples and the 32 ordered landmarks, normalized to the unit cube."""
    if n_surface < 1:
        raise InvalidParams("n_surface must be positive")
    parts, kp, names = _layout(params)
    rng = np.random.default_rng([params.seed, n_surface])
    prims = list(parts.values())
    areas = np.array([p.area() for p in prims])
    which = rng.choice(len(prims), size=n_surface, p=areas / areas.sum())
    pts = np.empty((n_surface, 3))
    for i, prim in enumerate(prims):
        sel = np.flatnonzero(which == i)
        if len(sel):
            pts[sel] = prim.sample(rng, len(sel))
    lo, hi = physical_bbox(params)
    center = (lo + hi) / 2
    diag = float(np.linalg.norm(hi - lo))
    norm_pts = (pts - center) / diag
    norm_kp = (kp - center) / diag
    return Instance(
        params,
        PointCloud(norm_pts, Frame.OBJECT),
        KeypointSet(norm_kp, Frame.OBJECT, names),
        diag,
        center,
    )


def keypoint_part(category: str, index: int) -> str:
    _, _, names = _layout(ShapeParams.median(category))
    return names[index]


# --- views ---------------------------------------------------------------

@dataclass(frozen=True)
class ViewSpec:
    camera_pose: RigidTransform = field(default_factory=RigidTransform)
    resolution: tuple[int, int] = (160, 120)
    occluder_fraction: float = 0.0
    occluder_side: str = "left"
    focal: float = 200.0
    depth_noise: float = 0.0
    n_points: int = INPUT_POINTS
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.occluder_fraction < 1:
            raise InvalidParams("occluder_fraction must be in [0, 1)")
        if self.occluder_side not in ("left", "right", "top", "bottom"):
            raise InvalidParams(f"bad occluder side {self.occluder_side!r}")


def look_at_rotation(azimuth: float, elevation: float) -> np.ndarray:
    """Rotation taking object coordinates (z up) to a camera (x right, y down, z forward)
    placed at the given azimuth/elevation and looking at the object origin."""
    c = np.array([np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)])
    f = -c
    r = np.cross(f, [0.0, 0.0, 1.0])
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return np.stack([r, d, f])


def hidden_point_removal(points_cam: np.ndarray, gamma: float = HPR_GAMMA) -> np.ndarray:
    """Points visible from the camera origin: spherical flip, then convex-hull membership."""
    d = np.linalg.norm(points_cam, axis=1)
    radius = d.max() * 10.0**gamma
    flipped = points_cam + (2.0 * (radius - d) / d)[:, None] * points_cam
    hull = ConvexHull(np.vstack([flipped, np.zeros(3)]))
    vis = np.zeros(len(points_cam), dtype=bool)
    verts = hull.vertices
    vis[verts[verts < len(points_cam)]] = True
    return vis


def visible_mask(points_cam: np.ndarray, view: ViewSpec, depth_slack: float = DEPTH_SLACK) -> tuple:
    """Visibility per point; returns ``(visible, u, v)`` with pixel coordinates.

    Hidden-point removal decides self-occlusion without eroding grazing
    surfaces; a per-pixel z-buffer then drops the few points that sit more than
    ``depth_slack * z`` behind the nearest point of their own pixel.
    """
    W, H = view.resolution
    z = points_cam[:, 2]
    front = z > 1e-6
    u = np.full(len(z), -1)
    v = np.full(len(z), -1)
    u[front] = np.floor(view.focal * points_cam[front, 0] / z[front] + W / 2).astype(int)
    v[front] = np.floor(view.focal * points_cam[front, 1] / z[front] + H / 2).astype(int)
    inside = front & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    vis = np.zeros(len(z), dtype=bool)
    idx = np.flatnonzero(inside)
    if len(idx) < 4:
        return vis, u, v
    vis[idx] = hidden_point_removal(points_cam[idx])
    zbuf = np.full((H, W), np.inf)
    np.minimum.at(zbuf, (v[idx], u[idx]), z[idx])
    vis[idx] &= z[idx] <= zbuf[v[idx], u[idx]] * (1.0 + depth_slack)
    return vis, u, v


def render_partial(shape: PointCloud, view: ViewSpec, gt_pose: AnisoSimilarity) -> PointCloud:
    """Visible, unoccluded points of ``shape`` in the camera frame, resampled to ``view.n_points``."""
    if len(shape) == 0:
        raise EmptyView("empty shape")
    cam = view.camera_pose.apply(gt_pose.apply(shape.points))
    vis, u, v = visible_mask(cam, view)
    if view.occluder_fraction > 0 and vis.any():
        u0, u1 = u[vis].min(), u[vis].max() + 1
        v0, v1 = v[vis].min(), v[vis].max() + 1
        f = view.occluder_fraction
        side = view.occluder_side
        if side == "left":
            blocked = u < u0 + f * (u1 - u0)
        elif side == "right":
            blocked = u >= u1 - f * (u1 - u0)
        elif side == "top":
            blocked = v < v0 + f * (v1 - v0)
        else:
            blocked = v >= v1 - f * (v1 - v0)
        vis &= ~blocked
    keep = np.flatnonzero(vis)
    if len(keep) == 0:
        raise EmptyView("no pixel survives visibility and occlusion")
    rng = np.random.default_rng(view.seed)
    n = view.n_points
    if len(keep) >= n:
        chosen = rng.choice(keep, size=n, replace=False)
    else:
        chosen = np.concatenate([rng.permutation(keep), rng.choice(keep, size=n - len(keep), replace=True)])
    out = cam[chosen]
    if view.depth_noise > 0:
        out = out + rng.normal(0, view.depth_noise, size=out.shape) * np.array([0, 0, 1.0])
    return PointCloud(out, Frame.CAMERA)


# --- shape variation -----------------------------------------------------

def chamfer_distance(a, b) -> float:
    """Symmetric chamfer: average of the two directed mean nearest-neighbor distances."""
    a, b = as_points(a), as_points(b)
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (da.mean() + db.mean())


def variation_degree(instances, template) -> float:
    if len(instances) == 0:
        raise InvalidParams("need at least one instance")
    t = template.points if isinstance(template, PointCloud) else as_points(template)
    return float(np.mean([
        chamfer_distance(i.points if isinstance(i, PointCloud) else i, t) for i in instances
    ]))


def with_values(params: ShapeParams, **values) -> ShapeParams:
    vals = dict(params.values)
    vals.update(values)
    return replace(params, values=vals)
