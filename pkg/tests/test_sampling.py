import numpy as np
import pytest
from scipy.stats import ks_2samp

from socs.category import CategoryTemplate
from socs.errors import ConfigError
from socs.geom import Frame, KeypointSet, PointCloud
from socs.sampling import SamplingStrategy, sample_queries


@pytest.fixture
def template():
    rng = np.random.default_rng(0)
    return CategoryTemplate(PointCloud(rng.uniform(-0.4, 0.4, (200, 3)), Frame.SOCS),
                            KeypointSet(rng.uniform(-0.3, 0.3, (8, 3))), 0.6)


def test_p_full_size_is_permutation(rng):
    cloud = rng.normal(size=(300, 3))
    q = sample_queries(SamplingStrategy("P", 300), cloud, rng_seed=4).points
    assert np.array_equal(np.sort(q, axis=0), np.sort(cloud, axis=0))
    assert len(np.unique(q, axis=0)) == 300


def test_p_oversampling_reuses_inputs(rng):
    cloud = rng.normal(size=(10, 3))
    q = sample_queries(SamplingStrategy("P", 50), cloud, rng_seed=4).points
    assert len(q) == 50 and all(any(np.array_equal(x, c) for c in cloud) for x in q)


def test_si_ball_support_and_mean(rng, template):
    cloud = rng.normal(size=(500, 3)) * 0.1 + [0.3, -0.2, 1.0]
    n = 100_000
    q = sample_queries(SamplingStrategy("SI", n), cloud, template, 7).points
    c = cloud.mean(0)
    r = template.category_diagonal / 2
    assert np.linalg.norm(q - c, axis=1).max() <= r + 1e-12
    # per-axis variance of a uniform ball is r^2 / 5
    sigma_mc = np.sqrt(r**2 / 5 / n)
    assert np.all(np.abs(q.mean(0) - c) <= 3 * sigma_mc)


def test_si_independent_of_visible_surface(rng, template):
    a = rng.normal(size=(400, 3)) * [0.2, 0.05, 0.05]
    b = rng.uniform(-0.1, 0.1, size=(900, 3))
    a -= a.mean(0)
    b -= b.mean(0)
    qa = sample_queries(SamplingStrategy("SI", 100_000), a, template, 1).points
    qb = sample_queries(SamplingStrategy("SI", 100_000), b, template, 2).points
    for axis in range(3):
        assert ks_2samp(qa[:, axis], qb[:, axis]).statistic < 0.01
    assert ks_2samp(np.linalg.norm(qa, axis=1), np.linalg.norm(qb, axis=1)).statistic < 0.01


def test_sd_gaussian_tail():
    src = np.array([[0.1, 0.2, 0.3]])
    sigma = 0.01
    q = sample_queries(SamplingStrategy("SD", 100_000, sigma=sigma), src, rng_seed=3).points
    assert np.mean(np.abs(q - src) <= 3 * sigma) >= 0.996


def test_sd_default_sigma_is_five_percent_of_diagonal():
    # two sources one unit apart: bounding-box diagonal 1, so sigma should be 0.05
    cloud = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    q = sample_queries(SamplingStrategy("SD", 50_000), cloud, rng_seed=0).points
    src = cloud[np.argmin(np.linalg.norm(q[:, None] - cloud[None], axis=-1), axis=1)]
    assert np.std(q - src) == pytest.approx(0.05, rel=0.02)


@pytest.mark.parametrize("kind", ["P", "SD", "SI"])
def test_determinism(rng, template, kind):
    cloud = rng.normal(size=(100, 3))
    a = sample_queries(SamplingStrategy(kind, 64), cloud, template, 9).points
    b = sample_queries(SamplingStrategy(kind, 64), cloud, template, 9).points
    assert np.array_equal(a, b)


def test_strategy_validation():
    with pytest.raises(ConfigError):
        SamplingStrategy("XYZ")
    with pytest.raises(ConfigError):
        SamplingStrategy("SD", 10, sigma=0.0)
    with pytest.raises(ConfigError):
        sample_queries(SamplingStrategy("SI", 4), np.zeros((3, 3)))
