"""3D thin-plate-spline warps.

A warp maps ``x`` to ``c + bᵀx + wᵀ s(x)`` where ``s(x)`` holds the radial
kernel ``r² log r`` evaluated at the distance from ``x`` to each kernel center.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from socs.errors import DimensionMismatch, SingularSystem
from socs.geom import Frame, KeypointSet, PointCloud, as_points

RANK_TOL = 1e-10


def tps_kernel(r):
    """``r² log r`` with the limit value 0 at ``r = 0``."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("kernel argument must be non-negative")
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class TpsWarp:
    c: np.ndarray        # (3,)
    b: np.ndarray        # (3, 3)
    w: np.ndarray        # (m, 3)
    centers: np.ndarray  # (m, 3)

    @classmethod
    def identity(cls, centers) -> TpsWarp:
        centers = as_points(centers)
        return cls(np.zeros(3), np.eye(3), np.zeros((len(centers), 3)), centers)

    def __call__(self, x) -> np.ndarray:
        x = as_points(x)
        d = np.linalg.norm(x[:, None, :] - self.centers[None], axis=-1)
        return self.c + x @ self.b + tps_kernel(d) @ self.w

    def side_condition_residual(self) -> float:
        P = np.c_[np.ones(len(self.centers)), self.centers]
        return float(np.abs(P.T @ self.w).max())

    def to_json(self) -> dict:
        return {
            "c": self.c.tolist(),
            "b": self.b.tolist(),
            "w": self.w.tolist(),
            "centers": self.centers.tolist(),
        }

    @classmethod
    def from_json(cls, obj) -> TpsWarp:
        return cls(
            np.asarray(obj["c"], dtype=np.float64),
            np.asarray(obj["b"], dtype=np.float64),
            np.asarray(obj["w"], dtype=np.float64).reshape(-1, 3),
            np.asarray(obj["centers"], dtype=np.float64).reshape(-1, 3),
        )


def _kps(k) -> np.ndarray:
    return k.keypoints if isinstance(k, KeypointSet) else as_points(k)


def fit_tps(source, target, regularization: float = 0.0, kernel_centers: str = "source") -> TpsWarp:
    """Fit the warp sending ``source[j]`` to ``target[j]``.

    With ``kernel_centers="source"`` (default) and zero regularization the
    warp interpolates the keypoints exactly.  ``"target"`` centers the kernels
    at the target keypoints instead; the fit is then a least-squares problem
    over (c, b, w) that generally does not interpolate.
    """
    src, dst = _kps(source), _kps(target)
    if src.shape != dst.shape:
        raise DimensionMismatch(f"source has {len(src)} keypoints, target has {len(dst)}")
    m = len(src)
    if m < 4:
        raise SingularSystem("TPS needs at least 4 keypoints")
    if regularization < 0:
        raise ValueError("regularization must be non-negative")

    P = np.c_[np.ones(m), src]
    sv = np.linalg.svd(P, compute_uv=False)
    if sv[-1] < RANK_TOL * sv[0]:
        raise SingularSystem("source keypoints are coplanar or coincident")
    dists = np.linalg.norm(src[:, None] - src[None], axis=-1)
    if (dists + np.eye(m)).min() < 1e-9:
        raise SingularSystem("source keypoints coincide")

    if kernel_centers == "source":
        centers = src
        K = tps_kernel(dists) + regularization * np.eye(m)
        L = np.zeros((m + 4, m + 4))
        L[:m, :m] = K
        L[:m, m:] = P
        L[m:, :m] = P.T
        rhs = np.r_[dst, np.zeros((4, 3))]
        try:
            lu = scipy.linalg.lu_factor(L, check_finite=True)
            sol = scipy.linalg.lu_solve(lu, rhs)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SingularSystem(str(exc)) from exc
        if not np.all(np.isfinite(sol)):
            raise SingularSystem("TPS system produced non-finite parameters")
        w, c, b = sol[:m], sol[m], sol[m + 1:]
    elif kernel_centers == "target":
        centers = dst
        S = tps_kernel(np.linalg.norm(src[:, None] - dst[None], axis=-1))
        # Minimize ‖[P S] θ − dst‖² + λ wᵀ K_t w subject to the side conditions on w.
        Pc = np.c_[np.ones(m), dst]
        Kt = tps_kernel(np.linalg.norm(dst[:, None] - dst[None], axis=-1))
        A = np.c_[P, S]
        H = A.T @ A
        H[4:, 4:] += regularization * Kt
        L = np.zeros((m + 8, m + 8))
        L[: m + 4, : m + 4] = H
        L[4 : m + 4, m + 4 :] = Pc
        L[m + 4 :, 4 : m + 4] = Pc.T
        rhs = np.r_[A.T @ dst, np.zeros((4, 3))]
        sol, *_ = np.linalg.lstsq(L, rhs, rcond=None)
        c, b, w = sol[0], sol[1:4], sol[4 : m + 4]
    else:
        raise ValueError(f"kernel_centers must be 'source' or 'target', got {kernel_centers!r}")
    return TpsWarp(c.copy(), b.copy(), w.copy(), centers.copy())


def warp(phi: TpsWarp, x) -> np.ndarray:
    out = phi(x)
    return out[0] if np.ndim(x) == 1 else out


def warp_cloud(phi: TpsWarp, pc: PointCloud, chunk: int = 65536) -> PointCloud:
    pts = pc.points
    out = np.concatenate([phi(pts[i : i + chunk]) for i in range(0, len(pts), chunk)])
    return PointCloud(out, Frame.SOCS)
