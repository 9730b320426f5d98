"""Multi-scale coordinate-based attention network.

The backbone builds a pyramid of farthest-point-sampled points with max-pooled
kNN features.  Propagation carries pyramid features to arbitrary query points
through one cross-attention block per pyramid level, each attending to the
query's k nearest pyramid points plus a global point (level centroid, mean
feature).  Three heads classify each canonical axis into bins.

Geometry enters only through relative offsets, so the forward pass is exactly
invariant to translating the cloud and queries together.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from socs.errors import ConfigError, NonFiniteLoss, ShapeMismatch

GLOBAL_MODES = ("joint", "separate", "off")


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64
    neighbors: int = 16
    num_bins: int = 128
    input_points: int = 1024
    block_points: tuple = (512, 256, 128, 64, 32)
    head_hidden: int | None = None
    global_attention: str = "joint"
    multi_scale: bool = True
    length_scale: float = 1.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "block_points", tuple(int(n) for n in self.block_points))
        if self.width < 8:
            raise ConfigError("feature width must be at least 8")
        if self.num_bins < 2:
            raise ConfigError("need at least 2 bins")
        if not self.block_points:
            raise ConfigError("need at least one block")
        if self.neighbors > min(self.block_points):
            raise ConfigError("neighbors must not exceed the smallest block size")
        sizes = (self.input_points, *self.block_points)
        if any(b > a for a, b in zip(sizes, sizes[1:])):
            raise ConfigError("block point counts must be non-increasing")
        if self.global_attention not in GLOBAL_MODES:
            raise ConfigError(f"global_attention must be one of {GLOBAL_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.length_scale <= 0:
            raise ConfigError("length_scale must be positive")

    @property
    def num_blocks(self) -> int:
        return len(self.block_points)

    @property
    def feature_dim(self) -> int:
        return self.width * (self.num_blocks if self.multi_scale else 1)

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_points"] = list(self.block_points)
        return d


@dataclass
class Pyramid:
    points: list    # per block (B, n_a, 3), centered and scaled
    features: list  # per block (B, n_a, h)
    centroid: torch.Tensor  # (B, 3) in input units

    def global_point(self, a: int) -> torch.Tensor:
        return self.points[a].mean(dim=1)

    def global_feature(self, a: int) -> torch.Tensor:
        return self.features[a].mean(dim=1)


# --- index computations (no gradients) ------------------------------------

def farthest_point_sample(points: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling of ``n`` indices from ``(N, 3)`` points."""
    N = len(points)
    if n > N:
        raise ShapeMismatch(f"cannot sample {n} of {N} points")
    idx = np.empty(n, dtype=np.int64)
    idx[0] = start
    d = np.sum((points - points[start]) ** 2, axis=1)
    for i in range(1, n):
        j = int(np.argmax(d))
        idx[i] = j
        d = np.minimum(d, np.sum((points - points[j]) ** 2, axis=1))
    return idx


def knn_indices(queries: np.ndarray, points: np.ndarray, k: int) -> np.ndarray:
    d = np.sum((queries[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    idx = np.argpartition(d, k - 1, axis=1)[:, :k]
    order = np.take_along_axis(d, idx, axis=1).argsort(axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)


@dataclass
class PyramidIndices:
    """FPS and kNN indices for one cloud; invariant under rigid motions of the cloud."""

    sample: list  # per block: (n_a,) indices into the previous level
    group: list   # per block: (n_a, k) indices into the previous level


def pyramid_indices(points: np.ndarray, config: ModelConfig) -> PyramidIndices:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (config.input_points, 3):
        raise ShapeMismatch(f"expected ({config.input_points}, 3) input, got {pts.shape}")
    sample, group = [], []
    prev = pts
    for n in config.block_points:
        s = farthest_point_sample(prev, n)
        cur = prev[s]
        group.append(knn_indices(cur, prev, config.neighbors))
        sample.append(s)
        prev = cur
    return PyramidIndices(sample, group)


def _gather(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``x`` (B, N, C), ``idx`` (B, ...) -> (B, ..., C)."""
    B = x.shape[0]
    flat = idx.reshape(B, -1)
    out = torch.gather(x, 1, flat.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
    return out.reshape(*idx.shape, x.shape[-1])


# --- modules --------------------------------------------------------------

def _mlp(sizes, final_act=False) -> nn.Sequential:
    layers = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2 or final_act:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class PropagationBlock(nn.Module):
    def __init__(self, h: int):
        super().__init__()
        self.h = h
        self.w_q = nn.Linear(h, h, bias=False)
        self.w_k = nn.Linear(h, h, bias=False)
        self.w_v = nn.Linear(h, h, bias=False)
        self.emb = _mlp([3, h, 1])
        self.norm = nn.LayerNorm(h)

    def attention(self, fx, offsets, keys, values, g_offset, f_glob, mode: str):
        """Return the update and the attention weights over the neighbor slots (and global slot).

        ``keys``/``values`` are the gathered ``F_N W_k`` and ``F_N W_v`` of shape (B, Q, k, h).
        """
        q = self.w_q(fx)                                    # (B, Q, h)
        r = self.emb(offsets).squeeze(-1)                   # (B, Q, k)
        scale = 1.0 / math.sqrt(self.h)
        logit_n = (torch.einsum("bqkh,bqh->bqk", keys, q) + r) * scale
        if mode == "off":
            w = torch.softmax(logit_n, dim=-1)
            return torch.einsum("bqk,bqkh->bqh", w, values), w
        k_g = self.w_k(f_glob)[:, None, :]                  # (B, 1, h)
        v_g = self.w_v(f_glob)[:, None, :]
        r_g = self.emb(g_offset).squeeze(-1)                # (B, Q)
        logit_g = ((k_g * q).sum(-1) + r_g) * scale         # (B, Q)
        if mode == "joint":
            w = torch.softmax(torch.cat([logit_n, logit_g[..., None]], dim=-1), dim=-1)
            delta = torch.einsum("bqk,bqkh->bqh", w[..., :-1], values) + w[..., -1:] * v_g
            return delta, w
        w_n = torch.softmax(logit_n, dim=-1)
        w_g = torch.softmax(logit_g[..., None], dim=-1)     # one logit: weight 1
        delta = torch.einsum("bqk,bqkh->bqh", w_n, values) + w_g * v_g
        return delta, w_n


class SocsNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        h = config.width
        hid = config.head_hidden or h
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.backbone = nn.ModuleList(
                _mlp([3 + (3 if a == 0 else h), h, h]) for a in range(config.num_blocks)
            )
            self.blocks = nn.ModuleList(PropagationBlock(h) for _ in range(config.num_blocks))
            self.heads = nn.ModuleList(_mlp([config.feature_dim, hid, config.num_bins]) for _ in range(3))
        self.to(config.torch_dtype)

    # aggregation ------------------------------------------------------------
    def aggregate(self, points, indices=None) -> Pyramid:
        cfg = self.config
        pts = torch.as_tensor(points, dtype=cfg.torch_dtype)
        if pts.ndim == 2:
            pts = pts[None]
        if pts.shape[1:] != (cfg.input_points, 3):
            raise ShapeMismatch(f"expected (B, {cfg.input_points}, 3) input, got {tuple(pts.shape)}")
        B = pts.shape[0]
        if indices is None:
            arr = pts.detach().cpu().numpy()
            indices = [pyramid_indices(arr[b], cfg) for b in range(B)]
        elif isinstance(indices, PyramidIndices):
            indices = [indices]
        if len(indices) != B:
            raise ShapeMismatch("one set of pyramid indices per cloud is required")
        centroid = pts.mean(dim=1)
        prev_pts = (pts - centroid[:, None]) / cfg.length_scale
        # Level-0 point features are the centroid-relative coordinates themselves,
        # so deeper features know where they sit in the object (still translation-free).
        prev_feat = prev_pts
        pyr_pts, pyr_feat = [], []
        for a in range(cfg.num_blocks):
            s = torch.as_tensor(np.stack([ind.sample[a] for ind in indices]))
            g = torch.as_tensor(np.stack([ind.group[a] for ind in indices]))
            cur = _gather(prev_pts, s)                          # (B, n, 3)
            nbr = _gather(prev_pts, g)                          # (B, n, k, 3)
            x = torch.cat([nbr - cur[:, :, None, :], _gather(prev_feat, g)], dim=-1)
            feat = self.backbone[a](x).amax(dim=2)
            pyr_pts.append(cur)
            pyr_feat.append(feat)
            prev_pts, prev_feat = cur, feat
        return Pyramid(pyr_pts, pyr_feat, centroid)

    # propagation ------------------------------------------------------------
    def block_range(self) -> range:
        n = self.config.num_blocks
        return range(n) if self.config.multi_scale else range(n - 1, n)

    def propagate(self, queries, pyramid: Pyramid, return_weights: bool = False):
        cfg = self.config
        x = torch.as_tensor(queries, dtype=cfg.torch_dtype)
        if x.ndim == 2:
            x = x[None]
        x = (x - pyramid.centroid[:, None]) / cfg.length_scale
        B, Q, _ = x.shape
        fx = x.new_zeros(B, Q, cfg.width)
        outs, weights = [], []
        for a in self.block_range():
            P, Fa = pyramid.points[a], pyramid.features[a]
            with torch.no_grad():
                nn_idx = torch.cdist(x, P).topk(cfg.neighbors, dim=-1, largest=False).indices
            blk = self.blocks[a]
            nbr = _gather(P, nn_idx)                             # (B, Q, k, 3)
            # Project once per pyramid point, then gather: same as projecting F_N.
            keys = _gather(blk.w_k(Fa), nn_idx)                  # (B, Q, k, h)
            values = _gather(blk.w_v(Fa), nn_idx)
            offsets = x[:, :, None, :] - nbr
            g_off = x - pyramid.global_point(a)[:, None, :]
            delta, w = blk.attention(
                fx, offsets, keys, values, g_off, pyramid.global_feature(a), cfg.global_attention
            )
            fx = blk.norm(fx + delta)
            outs.append(fx)
            weights.append(w)
        feat = torch.cat(outs, dim=-1)
        return (feat, weights) if return_weights else feat

    def head_logits(self, feat: torch.Tensor) -> torch.Tensor:
        """(…, D) features -> (…, 3, B) logits."""
        return torch.stack([head(feat) for head in self.heads], dim=-2)

    def forward(self, points, queries, indices=None):
        pyr = self.aggregate(points, indices)
        feat = self.propagate(queries, pyr)
        return feat, self.head_logits(feat)


def heads(feat: torch.Tensor, model: SocsNet) -> torch.Tensor:
    """Per-axis bin distributions (…, 3, B)."""
    return torch.softmax(model.head_logits(feat), dim=-1)


# --- losses ---------------------------------------------------------------

def loss_socs(logits: torch.Tensor, label_bins) -> torch.Tensor:
    """Mean over queries of the summed per-axis cross-entropies; logits (…, 3, B)."""
    labels = torch.as_tensor(label_bins, dtype=torch.long)
    if logits.shape[:-1] != labels.shape or logits.shape[-2] != 3:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    logp = F.log_softmax(logits, dim=-1)
    nll = -torch.gather(logp, -1, labels[..., None]).squeeze(-1)  # (…, 3)
    return nll.sum(-1).mean()


def loss_socs_from_probs(probs, label_bins) -> torch.Tensor:
    probs = torch.as_tensor(probs)
    labels = torch.as_tensor(label_bins, dtype=torch.long)
    if probs.shape[:-1] != labels.shape:
        raise ShapeMismatch("prediction and label counts differ")
    p = torch.gather(probs, -1, labels[..., None]).squeeze(-1)
    return -torch.log(p.clamp_min(torch.finfo(probs.dtype).tiny)).sum(-1).mean()


def loss_consistency(feat: torch.Tensor, feat_t: torch.Tensor) -> torch.Tensor:
    """Mean Euclidean distance between paired query features of the two towers."""
    if feat.shape != feat_t.shape:
        raise ShapeMismatch(f"feature shapes differ: {tuple(feat.shape)} vs {tuple(feat_t.shape)}")
    return torch.linalg.vector_norm(feat - feat_t, dim=-1).mean()


def total_loss(l_socs, l_cons, w_socs: float = 1.0, w_consistency: float = 0.1):
    return w_socs * l_socs + w_consistency * l_cons


@dataclass
class Batch:
    """Clouds, queries and label bins, plus the rigid motion applied to the twin tower."""

    points: torch.Tensor        # (B, N, 3)
    queries: torch.Tensor       # (B, Q, 3)
    label_bins: torch.Tensor    # (B, Q, 3)
    twin_rotation: torch.Tensor | None = None     # (B, 3, 3)
    twin_translation: torch.Tensor | None = None  # (B, 3)
    indices: list | None = None
    sample_ids: list = field(default_factory=list)


def _rigid(x, R, t):
    return torch.einsum("bij,bnj->bni", R, x) + t[:, None, :]


def batch_losses(model: SocsNet, batch: Batch, w_socs: float = 1.0, w_consistency: float = 0.1,
                 consistency: bool = True):
    """Return ``(total, loss_socs, loss_consistency)``; the SOCS term uses the untransformed tower."""
    dt = model.config.torch_dtype
    pts = torch.as_tensor(batch.points, dtype=dt)
    qs = torch.as_tensor(batch.queries, dtype=dt)
    feat, logits = model(pts, qs, batch.indices)
    l_socs = loss_socs(logits, batch.label_bins)
    if consistency and batch.twin_rotation is not None and w_consistency != 0:
        R = torch.as_tensor(batch.twin_rotation, dtype=dt)
        t = torch.as_tensor(batch.twin_translation, dtype=dt)
        pyr_t = model.aggregate(_rigid(pts, R, t), batch.indices)
        feat_t = model.propagate(_rigid(qs, R, t), pyr_t)
        l_cons = loss_consistency(feat, feat_t)
    else:
        l_cons = torch.zeros((), dtype=dt)
    return total_loss(l_socs, l_cons, w_socs, w_consistency), l_socs, l_cons


def gradients(model: SocsNet, batch: Batch, w_socs: float = 1.0, w_consistency: float = 0.1,
              consistency: bool = True) -> dict:
    """Reverse-mode gradients of the total loss for every named parameter."""
    model.zero_grad(set_to_none=True)
    total, _, _ = batch_losses(model, batch, w_socs, w_consistency, consistency)
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"loss is {total.item()}", sample_ids=batch.sample_ids)
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(total, list(params.values()), allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }
