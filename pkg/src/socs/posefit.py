"""Pose and anisotropic size from canonical-to-camera correspondences.

The objective is ``Σ wᵢ ‖R diag(s) aᵢ + t − bᵢ‖²`` over pairs ``(aᵢ, bᵢ)`` of
canonical and camera points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from socs.errors import DegenerateConfiguration, NoModel
from socs.geom import AnisoSimilarity, RigidTransform, as_points, orthonormalize, read_json

SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class CorrespondenceSet:
    canonical: np.ndarray  # (n, 3)
    camera: np.ndarray     # (n, 3)
    confidence: np.ndarray | None = None

    def __post_init__(self):
        a, b = as_points(self.canonical), as_points(self.camera)
        if a.shape != b.shape:
            raise DegenerateConfiguration("canonical and camera point counts differ")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise DegenerateConfiguration("non-finite correspondences")
        object.__setattr__(self, "canonical", a)
        object.__setattr__(self, "camera", b)
        if self.confidence is not None:
            w = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
            if w.shape != (len(a),) or np.any(w < 0):
                raise DegenerateConfiguration("confidence must be one non-negative weight per pair")
            object.__setattr__(self, "confidence", w)

    def __len__(self):
        return len(self.canonical)

    def weights(self) -> np.ndarray:
        return np.ones(len(self)) if self.confidence is None else self.confidence

    def subset(self, idx) -> CorrespondenceSet:
        conf = None if self.confidence is None else self.confidence[idx]
        return CorrespondenceSet(self.canonical[idx], self.camera[idx], conf)

    @classmethod
    def from_json(cls, obj) -> CorrespondenceSet:
        if isinstance(obj, (str, bytes)) or hasattr(obj, "read_text"):
            obj = read_json(obj)
        return cls(obj["socs"], obj["camera"], obj.get("confidence"))


@dataclass
class FitResult:
    transform: AnisoSimilarity
    inliers: np.ndarray
    rms: float
    iterations: int = 0
    objective_history: list = field(default_factory=list)
    converged: bool = True
    clamped_scale: bool = False

    def to_json(self) -> dict:
        return {
            **self.transform.to_json(),
            "inliers": self.inliers.astype(int).tolist(),
            "rms": self.rms,
            "iterations": self.iterations,
            "converged": self.converged,
            "clamped_scale": self.clamped_scale,
        }


def objective(A: AnisoSimilarity, C: CorrespondenceSet) -> float:
    r = A.apply(C.canonical) - C.camera
    return float(np.sum(C.weights() * np.sum(r * r, axis=1)))


def residuals(A: AnisoSimilarity, C: CorrespondenceSet) -> np.ndarray:
    return np.linalg.norm(A.apply(C.canonical) - C.camera, axis=1)


def _rms(A, C) -> float:
    w = C.weights()
    return float(np.sqrt(objective(A, C) / max(w.sum(), 1e-300)))


def _check_spread(a, w) -> None:
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateConfiguration("all correspondence weights are zero")
    da = a - (w[:, None] * a).sum(0) / wsum
    sa = np.linalg.svd(da * np.sqrt(w)[:, None], compute_uv=False)
    if sa[0] <= 1e-150 or sa[1] <= 1e-12 * sa[0]:
        raise DegenerateConfiguration("canonical points are coincident or collinear")


def _procrustes(a, b, w, wsum, with_scale: bool):
    """Weighted least-squares ``b ≈ s R a + t`` with reflection correction (no input checks)."""
    mu_a = (w @ a) / wsum
    mu_b = (w @ b) / wsum
    da, db = a - mu_a, b - mu_b
    cov = (db * w[:, None]).T @ da / wsum
    U, d, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    s = 1.0
    if with_scale:
        var_a = float(w @ np.einsum("ij,ij->i", da, da)) / wsum
        s = float(d @ S) / var_a
    return R, mu_b - s * R @ mu_a, s


def _weighted_procrustes(a, b, w, with_scale: bool):
    _check_spread(a, w)
    return _procrustes(a, b, w, w.sum(), with_scale)


def _sse(R, t, s, a, b, w) -> float:
    r = (a * s) @ R.T + t - b
    return float(w @ np.einsum("ij,ij->i", r, r))


def fit_similarity_isotropic(C: CorrespondenceSet) -> FitResult:
    if len(C) < 3:
        raise DegenerateConfiguration("need at least 3 pairs")
    R, t, s = _weighted_procrustes(C.canonical, C.camera, C.weights(), with_scale=True)
    if s <= 0:
        raise DegenerateConfiguration("non-positive similarity scale")
    A = AnisoSimilarity(RigidTransform(R, t), [s, s, s])
    obj = objective(A, C)
    return FitResult(A, np.ones(len(C), dtype=bool), _rms(A, C), 0, [obj])


def fit_aniso(C: CorrespondenceSet, init: FitResult | None = None,
              max_iter: int = 100, tol: float = 1e-12) -> FitResult:
    """Alternate a rigid Procrustes step at fixed scales with closed-form per-axis scales."""
    if len(C) < 4:
        raise DegenerateConfiguration("need at least 4 pairs")
    a, b, w = C.canonical, C.camera, C.weights()
    _check_spread(a, w)
    wsum = w.sum()
    if init is None:
        init = fit_similarity_isotropic(C)
    s = init.transform.scale.copy()
    R, t = init.transform.rotation, init.transform.translation
    history = [_sse(R, t, s, a, b, w)]
    mu_a = (w @ a) / wsum
    da = a - mu_a
    den = w @ (da * da)
    if np.any(den <= 1e-300):
        raise DegenerateConfiguration("canonical points are flat along a scaled axis")
    clamped = False
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        R, t, _ = _procrustes(a * s, b, w, wsum, with_scale=False)
        # Scales and translation jointly at fixed R: per-axis regression of Rᵀb on a.
        q = b @ R
        dq = q - (w @ q) / wsum
        s_new = (w @ (da * dq)) / den
        if np.any(s_new <= 0):
            clamped = True
            s_new = np.maximum(s_new, SCALE_FLOOR)
        s = s_new
        t = R @ ((w @ q) / wsum - s * mu_a)
        history.append(_sse(R, t, s, a, b, w))
        if history[-2] - history[-1] < tol * max(1.0, history[0]):
            converged = True
            break
    A = AnisoSimilarity(RigidTransform(orthonormalize(R), t), s)
    if not converged and len(history) > 1 and history[-2] - history[-1] <= 1e-6:
        converged = True
    history = [float(h) for h in history]
    return FitResult(A, np.ones(len(C), dtype=bool), _rms(A, C), it, history, converged, clamped)


@dataclass(frozen=True)
class RansacConfig:
    iters: int = 256
    inlier_threshold: float = 0.02
    min_sample: int = 4
    seed: int = 0


def fit_robust(C: CorrespondenceSet, ransac: RansacConfig = RansacConfig()) -> FitResult:
    """Seeded RANSAC over minimal anisotropic fits, then a refit on the best consensus set."""
    n = len(C)
    k = ransac.min_sample
    if n < k:
        raise NoModel(f"{n} correspondences, need at least {k}")
    rng = np.random.default_rng(ransac.seed)
    best_count, best_mask, best_err = -1, None, np.inf
    for _ in range(ransac.iters):
        idx = rng.choice(n, size=k, replace=False)
        try:
            hyp = fit_aniso(C.subset(idx), max_iter=20)
        except (DegenerateConfiguration, ValueError):
            continue
        res = residuals(hyp.transform, C)
        mask = res < ransac.inlier_threshold
        count = int(mask.sum())
        err = float(np.sum(np.minimum(res, ransac.inlier_threshold) ** 2))
        # Ties on inlier count go to the lower truncated error, then the earlier hypothesis.
        if count > best_count or (count == best_count and err < best_err):
            best_count, best_mask, best_err = count, mask, err
    if best_mask is None or best_count < k:
        raise NoModel(f"best consensus has {max(best_count, 0)} inliers, need {k}")
    mask = best_mask
    fit = None
    for _ in range(5):
        try:
            fit = fit_aniso(C.subset(np.flatnonzero(mask)))
        except DegenerateConfiguration as exc:
            if fit is None:
                raise NoModel(str(exc)) from exc
            break
        new_mask = residuals(fit.transform, C) < ransac.inlier_threshold
        if new_mask.sum() < k or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    fit.inliers = mask
    return fit
