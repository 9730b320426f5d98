import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_model, tiny_batch, tiny_config
from socs.category import BinCodec
from socs.errors import ConfigError, ShapeMismatch
from socs.geom import axis_angle
from socs.model import (
    ModelConfig,
    SocsNet,
    batch_losses,
    farthest_point_sample,
    gradients,
    heads,
    loss_consistency,
    loss_socs,
    loss_socs_from_probs,
    pyramid_indices,
    total_loss,
)


def small_config(**kw):
    base = dict(width=16, neighbors=8, num_bins=16, input_points=128, block_points=(64, 32, 16), seed=0)
    base.update(kw)
    return ModelConfig(**base)


def cloud_and_queries(seed, n=128, q=20):
    rng = np.random.default_rng(seed)
    return (torch.tensor(rng.normal(size=(n, 3)), dtype=torch.float32),
            torch.tensor(rng.normal(size=(q, 3)) * 0.7, dtype=torch.float32))


def test_default_top_level_has_32_points():
    cfg = ModelConfig()
    idx = pyramid_indices(np.random.default_rng(0).normal(size=(cfg.input_points, 3)), cfg)
    assert len(idx.sample) == 5 and len(idx.sample[-1]) == 32
    assert cfg.feature_dim == 5 * cfg.width


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(block_points=(64, 128))
    with pytest.raises(ConfigError):
        ModelConfig(global_attention="both")
    with pytest.raises(ConfigError):
        ModelConfig(neighbors=64, block_points=(512, 32))


def test_fps_spreads_points():
    pts = np.random.default_rng(0).uniform(size=(500, 3))
    s = farthest_point_sample(pts, 20)
    assert len(set(s.tolist())) == 20
    d = np.linalg.norm(pts[s][:, None] - pts[s][None], axis=-1) + np.eye(20) * 9
    assert d.min() > 0.1


def test_input_shape_checked():
    model = SocsNet(small_config())
    with pytest.raises(ShapeMismatch):
        model(torch.zeros(1, 100, 3), torch.zeros(1, 4, 3))


@pytest.mark.parametrize("mode", ["joint", "separate", "off"])
def test_translation_invariance(mode):
    model = SocsNet(small_config(global_attention=mode))
    pts, qs = cloud_and_queries(1)
    t = torch.tensor([0.3, -0.2, 0.5])
    f1, l1 = model(pts, qs)
    f2, l2 = model(pts + t, qs + t)
    assert torch.allclose(f1, f2, atol=1e-5)
    assert torch.allclose(l1, l2, atol=1e-5)


def test_zero_backbone_gives_zero_features():
    model = SocsNet(small_config())
    with torch.no_grad():
        for p in model.backbone.parameters():
            p.zero_()
    pts, _ = cloud_and_queries(2)
    pyr = model.aggregate(pts)
    assert all(torch.count_nonzero(f) == 0 for f in pyr.features)


def test_zero_values_leave_layernorm_bias():
    model = SocsNet(small_config())
    rng = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for blk in model.blocks:
            blk.w_v.weight.zero_()
            for p in blk.emb.parameters():
                p.zero_()
            blk.norm.bias.copy_(torch.randn(blk.h, generator=rng))
    pts, qs = cloud_and_queries(3)
    feat = model.propagate(qs, model.aggregate(pts))
    # no value flows, so every query follows the same chain LN_a(LN_{a-1}(... LN_0(0)))
    chain, x = [], torch.zeros(model.config.width)
    for blk in model.blocks:
        x = blk.norm(x)
        chain.append(x)
    expect = torch.cat(chain)
    assert torch.allclose(chain[0], model.blocks[0].norm.bias)
    assert torch.allclose(feat[0], expect.expand_as(feat[0]), atol=1e-6)


@pytest.mark.parametrize("mode", ["joint", "separate", "off"])
def test_attention_weights_normalized(mode):
    model = SocsNet(small_config(global_attention=mode))
    pts, qs = cloud_and_queries(4)
    _, weights = model.propagate(qs, model.aggregate(pts), return_weights=True)
    slots = model.config.neighbors + (1 if mode == "joint" else 0)
    for w in weights:
        assert w.shape[-1] == slots
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)


def test_layernorm_statistics():
    model = SocsNet(small_config())
    norm = model.blocks[0].norm
    x = torch.randn(4000, norm.normalized_shape[0])
    with torch.no_grad():
        norm.weight.fill_(1.0)
        norm.bias.fill_(0.0)
        y = norm(x)
    assert y.mean(-1).abs().max() < 1e-4
    assert (y.var(-1, unbiased=False) - 1).abs().max() < 1e-3


def test_heads_uniform_and_normalized():
    model = SocsNet(small_config())
    with torch.no_grad():
        for head in model.heads:
            head[-1].weight.zero_()
            head[-1].bias.zero_()
    feat = torch.randn(5, model.config.feature_dim)
    p = heads(feat, model)
    assert torch.allclose(p, torch.full_like(p, 1 / 16), atol=1e-7)
    model2 = SocsNet(small_config(seed=3))
    p2 = heads(feat, model2)
    assert torch.allclose(p2.sum(-1), torch.ones(5, 3), atol=1e-6)


def test_argmax_of_delta_decodes_to_bin_center():
    codec = BinCodec(16)
    probs = torch.full((3, 16), 1e-4)
    bins = [2, 9, 15]
    for axis, b in enumerate(bins):
        probs[axis, b] = 1.0
    decoded = codec.decode(probs.argmax(-1).numpy())
    np.testing.assert_allclose(decoded, codec.decode(np.array(bins)))
    np.testing.assert_allclose(decoded, codec.lo + (np.array(bins) + 0.5) * codec.width)


def test_loss_one_hot_and_uniform():
    labels = torch.tensor([[1, 4, 7], [0, 0, 3]])
    one_hot = torch.nn.functional.one_hot(labels, 8).double()
    assert loss_socs_from_probs(one_hot, labels).item() == pytest.approx(0.0, abs=1e-12)
    uniform = torch.zeros(2, 3, 8, dtype=torch.float64)
    assert loss_socs(uniform, labels).item() == pytest.approx(3 * math.log(8), abs=1e-12)


def test_loss_matches_scalar_loop():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 5, 3, 6, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 6, (2, 5, 3), generator=g)
    total = 0.0
    for b in range(2):
        for q in range(5):
            for axis in range(3):
                row = logits[b, q, axis].tolist()
                m = max(row)
                lse = m + math.log(sum(math.exp(v - m) for v in row))
                total += lse - row[int(labels[b, q, axis])]
    assert loss_socs(logits, labels).item() == pytest.approx(total / 10, abs=1e-9)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        loss_socs(torch.zeros(4, 3, 8), torch.zeros(5, 3, dtype=torch.long))
    with pytest.raises(ShapeMismatch):
        loss_consistency(torch.zeros(4, 8), torch.zeros(4, 9))


def _twin_features(model, pts, qs, R, t):
    feat = model.propagate(qs, model.aggregate(pts))
    feat_t = model.propagate(qs @ R.T + t, model.aggregate(pts @ R.T + t))
    return loss_consistency(feat, feat_t).item()


def test_consistency_examples():
    model = SocsNet(small_config())
    pts, qs = cloud_and_queries(5)
    eye, zero = torch.eye(3), torch.zeros(3)
    assert _twin_features(model, pts, qs, eye, zero) == 0.0
    assert _twin_features(model, pts, qs, eye, torch.tensor([0.5, 0.1, -0.3])) <= 1e-5
    R = torch.tensor(axis_angle([0, 0, 1], np.pi / 2), dtype=torch.float32)
    assert _twin_features(model, pts, qs, R, zero) > 1e-2


def test_total_loss_arithmetic():
    assert total_loss(2.0, 3.0) == pytest.approx(2.3)
    assert total_loss(2.0, 0.0) == 2.0
    assert total_loss(2.0, 3.0, 0.0, 1.0) == 3.0


def test_gradient_finite_differences():
    res = check_model(0)
    worst = max(res["errors"].values())
    assert worst <= 1e-3, res["errors"]


def test_dead_path_gradients_are_zero():
    model = SocsNet(tiny_config(1))
    with torch.no_grad():
        for blk in model.blocks:
            blk.w_v.weight.zero_()
    g = gradients(model, tiny_batch(1))
    for name, grad in g.items():
        if name.startswith(("backbone", "blocks")) and ".w_v." not in name and ".norm." not in name:
            assert torch.count_nonzero(grad) == 0, name
    assert torch.count_nonzero(g["blocks.0.w_v.weight"]) > 0


def test_doubling_loss_weights_doubles_gradients():
    model = SocsNet(tiny_config(2))
    batch = tiny_batch(2)
    g1 = gradients(model, batch, 1.0, 0.1)
    g2 = gradients(model, batch, 2.0, 0.2)
    for name in g1:
        assert torch.allclose(2 * g1[name], g2[name], atol=1e-9, rtol=0), name


def test_forward_is_deterministic():
    batch = tiny_batch(3)
    a = batch_losses(SocsNet(tiny_config(3)), batch)[0].item()
    b = batch_losses(SocsNet(tiny_config(3)), batch)[0].item()
    assert a == b


def test_seed_changes_init():
    a = SocsNet(small_config(seed=0)).heads[0][0].weight
    b = SocsNet(small_config(seed=1)).heads[0][0].weight
    assert not torch.equal(a, b)


def test_single_scale_uses_last_block_only():
    model = SocsNet(small_config(multi_scale=False))
    assert list(model.block_range()) == [2]
    pts, qs = cloud_and_queries(6)
    feat, logits = model(pts, qs)
    assert feat.shape == (1, 20, 16) and logits.shape == (1, 20, 3, 16)


@settings(max_examples=100)
@given(st.integers(0, 10_000))
def test_softmax_rows_sum_to_one_random_params(seed):
    cfg = ModelConfig(width=8, neighbors=4, num_bins=8, input_points=16, block_points=(8, 4), seed=seed)
    model = SocsNet(cfg)
    rng = np.random.default_rng(seed)
    pts = torch.tensor(rng.normal(size=(16, 3)), dtype=torch.float32)
    qs = torch.tensor(rng.normal(size=(3, 3)), dtype=torch.float32)
    _, weights = model.propagate(qs, model.aggregate(pts), return_weights=True)
    for w in weights:
        assert torch.allclose(w.sum(-1), torch.ones(1, 3), atol=1e-6)
