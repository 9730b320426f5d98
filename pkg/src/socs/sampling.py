"""Query-point sampling for training and inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from socs.errors import ConfigError, DataError
from socs.geom import Frame, PointCloud

STRATEGIES = ("P", "SD", "SI")


@dataclass(frozen=True)
class SamplingStrategy:
    """``P``: input points; ``SD``: input points plus Gaussian noise; ``SI``: uniform in a ball.

    ``sigma`` of ``None`` for SD means 5% of the input bounding-box diagonal.
    The SI ball is centered on the input centroid with diameter ``diameter``
    (the category diagonal when ``None``).
    """

    kind: str = "SI"
    n_samples: int = 512
    sigma: float | None = None
    diameter: float | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown sampling strategy {self.kind!r}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be at least 1")
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError("SD sigma must be positive")


def uniform_ball(rng: np.random.Generator, n: int, center, radius: float) -> np.ndarray:
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.uniform(size=n) ** (1.0 / 3.0)
    return np.asarray(center, dtype=np.float64) + d * r[:, None]


def sample_queries(strategy: SamplingStrategy, input_cloud, template=None, rng_seed=0) -> PointCloud:
    pts = input_cloud.points if isinstance(input_cloud, PointCloud) else np.asarray(input_cloud, float)
    if len(pts) == 0:
        raise DataError("cannot sample queries from an empty cloud")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = strategy.n_samples
    if strategy.kind == "P":
        idx = rng.permutation(len(pts))[:n] if n <= len(pts) else rng.integers(0, len(pts), size=n)
        out = pts[idx]
    elif strategy.kind == "SD":
        sigma = strategy.sigma
        if sigma is None:
            sigma = 0.05 * float(np.linalg.norm(pts.max(0) - pts.min(0)))
        src = pts[rng.integers(0, len(pts), size=n)]
        out = src + rng.normal(0.0, sigma, size=src.shape)
    else:
        diameter = strategy.diameter
        if diameter is None:
            if template is None:
                raise ConfigError("SI sampling needs a diameter or a category template")
            diameter = template.category_diagonal
        out = uniform_ball(rng, n, pts.mean(axis=0), diameter / 2.0)
    return PointCloud(out, Frame.CAMERA)
