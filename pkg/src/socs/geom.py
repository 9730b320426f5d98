"""Rigid and anisotropic-similarity transforms, oriented boxes, and PLY/JSON IO."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from socs.errors import DataError

INVARIANT_TOL = 1e-9


class Frame(str, Enum):
    CAMERA = "camera"
    OBJECT = "object"
    SOCS = "socs"


def as_points(points) -> np.ndarray:
    """Return an ``(n, 3)`` float64 array; a single point becomes ``(1, 3)``."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DataError(f"expected (n, 3) points, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    frame: Frame = Frame.OBJECT

    def __post_init__(self):
        pts = as_points(self.points)
        if not np.all(np.isfinite(pts)):
            raise DataError("point cloud contains non-finite values")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass(frozen=True)
class KeypointSet:
    """Ordered semantic keypoints; index ``j`` corresponds across instances."""

    keypoints: np.ndarray
    frame: Frame = Frame.OBJECT
    parts: tuple[str, ...] = ()

    def __post_init__(self):
        kps = as_points(self.keypoints)
        if len(kps) < 4:
            raise DataError(f"need at least 4 keypoints, got {len(kps)}")
        if not np.all(np.isfinite(kps)):
            raise DataError("keypoints contain non-finite values")
        d = np.linalg.norm(kps[:, None] - kps[None], axis=-1)
        d[np.diag_indices(len(kps))] = np.inf
        if d.min() <= 1e-9:
            raise DataError("keypoints must be pairwise distinct")
        if self.parts and len(self.parts) != len(kps):
            raise DataError("part labels must match keypoint count")
        object.__setattr__(self, "keypoints", kps)

    def __len__(self):
        return len(self.keypoints)


def _check_rotation(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    if not np.allclose(R.T @ R, np.eye(3), atol=INVARIANT_TOL):
        raise DataError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > INVARIANT_TOL:
        raise DataError("rotation determinant is not +1")
    return R


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation back onto SO(3)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    def apply(self, points) -> np.ndarray:
        return as_points(points) @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def compose_chain(transforms) -> RigidTransform:
    """Compose left to right (first element applied last), re-orthonormalizing every 100 ops."""
    R, t = np.eye(3), np.zeros(3)
    for i, T in enumerate(transforms, start=1):
        R, t = R @ T.rotation, R @ T.translation + t
        if i % 100 == 0:
            R = orthonormalize(R)
    return RigidTransform(orthonormalize(R), t)


@dataclass(frozen=True)
class AnisoSimilarity:
    """Per-axis scale in the canonical frame followed by a rigid motion."""

    rigid: RigidTransform = field(default_factory=RigidTransform)
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        s = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        if s.size == 1:
            s = np.repeat(s, 3)
        if s.shape != (3,) or not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise DataError(f"scales must be 3 positive finite values, got {s}")
        object.__setattr__(self, "scale", s)

    @property
    def rotation(self) -> np.ndarray:
        return self.rigid.rotation

    @property
    def translation(self) -> np.ndarray:
        return self.rigid.translation

    def apply(self, points) -> np.ndarray:
        return self.rigid.apply(as_points(points) * self.scale)

    def apply_inverse(self, points) -> np.ndarray:
        return self.rigid.inverse().apply(points) / self.scale

    def matrix(self) -> np.ndarray:
        return self.rigid.matrix() @ np.diag([*self.scale, 1.0])

    def to_json(self) -> dict:
        return {
            "R": self.rotation.tolist(),
            "t": self.translation.tolist(),
            "s": self.scale.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> AnisoSimilarity:
        return cls(RigidTransform(obj["R"], obj["t"]), obj.get("s", [1.0, 1.0, 1.0]))


def rigid_to_json(T: RigidTransform) -> dict:
    return {"R": T.rotation.tolist(), "t": T.translation.tolist()}


def rigid_from_json(obj: dict) -> RigidTransform:
    return RigidTransform(obj["R"], obj["t"])


@dataclass(frozen=True)
class OrientedBox:
    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        h = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if np.any(h <= 0):
            raise DataError("box half extents must be positive")
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))

    @property
    def volume(self) -> float:
        return float(np.prod(2 * self.half_extents))

    def contains(self, points) -> np.ndarray:
        local = (as_points(points) - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.half_extents, axis=1)


def apply_rigid(T: RigidTransform, p) -> np.ndarray:
    out = T.apply(p)
    return out[0] if np.ndim(p) == 1 else out


def apply_aniso(A: AnisoSimilarity, p) -> np.ndarray:
    out = A.apply(p)
    return out[0] if np.ndim(p) == 1 else out


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = angle / 2
    return quaternion_to_matrix([np.cos(half), *(np.sin(half) * axis)])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    # A normalized 4D Gaussian is a uniform unit quaternion.
    q = rng.standard_normal(4)
    return orthonormalize(quaternion_to_matrix(q))


def random_rigid(rng_seed, max_translation: float = 0.0) -> RigidTransform:
    if max_translation < 0:
        raise ValueError("max_translation must be non-negative")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    R = random_rotation(rng)
    t = rng.uniform(-max_translation, max_translation, size=3) if max_translation > 0 else np.zeros(3)
    return RigidTransform(R, t)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of ``R`` from the identity, in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# --- PLY -----------------------------------------------------------------

def write_ply(path, points, binary: bool = False) -> None:
    pts = as_points(points)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    )
    path = Path(path)
    if binary:
        with path.open("wb") as f:
            f.write(header.encode("ascii"))
            f.write(pts.astype("<f8").tobytes())
    else:
        with path.open("w") as f:
            f.write(header)
            # float.__repr__ is the shortest string that round-trips exactly
            for x, y, z in pts.tolist():
                f.write(f"{x!r} {y!r} {z!r}\n")


_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "int": "i4", "int32": "i4", "uchar": "u1", "uint8": "u1",
}


def read_ply(path) -> np.ndarray:
    """Read vertex x/y/z from an ASCII or binary little-endian PLY file."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii").splitlines()
    fmt, count, props, in_vertex = None, 0, [], False
    for line in lines:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise DataError("list properties on vertices are not supported")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise DataError(f"{path}: missing x/y/z properties")
    if fmt == "ascii":
        rows = data[body_start:].decode("ascii").split("\n")[:count]
        arr = np.array([[float(v) for v in r.split()] for r in rows], dtype=np.float64)
        arr = arr.reshape(count, len(props))
        cols = [names.index(c) for c in "xyz"]
        return arr[:, cols]
    if fmt != "binary_little_endian":
        raise DataError(f"{path}: unsupported PLY format {fmt}")
    dtype = np.dtype([(n, "<" + t) for n, t in props])
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=body_start)
    return np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())

