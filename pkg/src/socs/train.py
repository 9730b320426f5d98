"""Twin-tower training with a pose-consistency term and a half-constant, half-cosine schedule."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from socs.category import BinCodec, InstanceRecord, label_points
from socs.errors import ConfigError, NonFiniteLoss
from socs.geom import random_rigid
from socs.model import Batch, PyramidIndices, SocsNet, batch_losses, pyramid_indices
from socs.sampling import SamplingStrategy, sample_queries

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 0.001
    total_steps: int = 20_000
    anneal_start_fraction: float = 0.5
    optimizer: str = "adam"
    w_socs: float = 1.0
    w_consistency: float = 0.1
    consistency: bool = True
    twin_max_translation: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not 0 < self.anneal_start_fraction < 1:
            raise ConfigError("anneal_start_fraction must be in (0, 1)")
        if self.optimizer not in ("adam", "ranger"):
            raise ConfigError("optimizer must be 'adam' or 'ranger'")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")


def lr_schedule(step: int, config: TrainConfig) -> float:
    total = config.total_steps
    start = config.anneal_start_fraction * total
    if step < start:
        return config.learning_rate
    frac = min((step - start) / (total - start), 1.0)
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


class Lookahead:
    """Lookahead over an inner optimizer: every ``k`` steps, slow ← slow + α(fast − slow)."""

    def __init__(self, inner: torch.optim.Optimizer, k: int = 6, alpha: float = 0.5):
        self.inner = inner
        self.k = k
        self.alpha = alpha
        self.counter = 0
        self.param_groups = inner.param_groups
        self.slow = [[p.detach().clone() for p in g["params"]] for g in inner.param_groups]

    @torch.no_grad()
    def step(self, closure=None):
        loss = self.inner.step(closure)
        self.counter += 1
        if self.counter % self.k == 0:
            for group, slows in zip(self.param_groups, self.slow):
                for p, s in zip(group["params"], slows):
                    s.add_(p - s, alpha=self.alpha)
                    p.copy_(s)
        return loss

    def zero_grad(self, set_to_none: bool = True):
        self.inner.zero_grad(set_to_none=set_to_none)


def make_optimizer(model: SocsNet, config: TrainConfig):
    adam = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    return Lookahead(adam) if config.optimizer == "ranger" else adam


@dataclass
class TrainSample:
    """One rendered view: the camera-frame cloud and the instance it shows."""

    cloud: np.ndarray          # (N, 3)
    record: InstanceRecord
    indices: PyramidIndices | None = None
    sample_id: str = ""


def prepare_samples(samples, model_config) -> list:
    for s in samples:
        if s.indices is None:
            s.indices = pyramid_indices(s.cloud, model_config)
    return samples


def make_batch(samples, strategy: SamplingStrategy, template, codec: BinCodec,
               rng: np.random.Generator, twin_max_translation: float, dtype=torch.float32) -> Batch:
    pts, qs, bins, Rs, ts = [], [], [], [], []
    for s in samples:
        q = sample_queries(strategy, s.cloud, template, rng).points
        lab = label_points(q, s.record, codec)
        T = random_rigid(rng, twin_max_translation)
        pts.append(s.cloud)
        qs.append(q)
        bins.append(lab.bins)
        Rs.append(T.rotation)
        ts.append(T.translation)
    return Batch(
        torch.as_tensor(np.stack(pts), dtype=dtype),
        torch.as_tensor(np.stack(qs), dtype=dtype),
        torch.as_tensor(np.stack(bins)),
        torch.as_tensor(np.stack(Rs), dtype=dtype),
        torch.as_tensor(np.stack(ts), dtype=dtype),
        [s.indices for s in samples],
        [s.sample_id for s in samples],
    )


def train_step(model: SocsNet, optimizer, batch: Batch, config: TrainConfig, step: int) -> dict:
    lr = lr_schedule(step, config)
    for g in optimizer.param_groups:
        g["lr"] = lr
    total, l_socs, l_cons = batch_losses(
        model, batch, config.w_socs, config.w_consistency, config.consistency
    )
    if not torch.isfinite(total):
        raise NonFiniteLoss(
            f"non-finite loss at step {step}: socs={l_socs.item()}, consistency={l_cons.item()}",
            step=step, sample_ids=batch.sample_ids,
        )
    optimizer.zero_grad(set_to_none=True)
    if lr > 0:
        total.backward()
        optimizer.step()
    return {"step": step, "lr": lr, "loss": total.item(), "loss_socs": l_socs.item(),
            "loss_consistency": l_cons.item()}


class EpochSampler:
    """Seeded shuffled passes over the training set."""

    def __init__(self, n: int, seed: int):
        self.n = n
        self.rng = np.random.default_rng(seed)
        self.order = np.empty(0, dtype=int)

    def take(self, k: int) -> np.ndarray:
        while len(self.order) < k:
            self.order = np.concatenate([self.order, self.rng.permutation(self.n)])
        out, self.order = self.order[:k], self.order[k:]
        return out


def train(model: SocsNet, samples, template, codec: BinCodec, strategy: SamplingStrategy,
          config: TrainConfig, out_dir=None, validate=None) -> list:
    """Run ``config.total_steps`` steps; returns the per-step metric rows.

    ``validate`` (optional) is called as ``validate(model)`` every
    ``checkpoint_every`` steps and must return a scalar error; the best
    parameters by that error are written to ``best.ckpt``.
    """
    from socs.checkpoint import save_checkpoint

    torch.manual_seed(config.seed)
    samples = prepare_samples(list(samples), model.config)
    rng = np.random.default_rng([config.seed, 1])
    sampler = EpochSampler(len(samples), config.seed)
    optimizer = make_optimizer(model, config)
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = (out / "metrics.csv").open("w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss_socs", "loss_consistency", "val_error"])
    best = math.inf
    try:
        for step in range(config.total_steps):
            chosen = [samples[i] for i in sampler.take(config.batch_size)]
            batch = make_batch(chosen, strategy, template, codec, rng,
                               config.twin_max_translation, model.config.torch_dtype)
            model.train()
            row = train_step(model, optimizer, batch, config, step)
            row["val_error"] = ""
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                if out is not None:
                    save_checkpoint(model, out / "last.ckpt")
                if validate is not None:
                    err = float(validate(model))
                    row["val_error"] = err
                    if err < best and out is not None:
                        best = err
                        save_checkpoint(model, out / "best.ckpt")
            rows.append(row)
            if writer is not None:
                writer.writerow([row["step"], row["lr"], row["loss_socs"], row["loss_consistency"],
                                 row["val_error"]])
            if config.log_every and step % config.log_every == 0:
                log.info("step %d lr %.2e socs %.4f cons %.4f", step, row["lr"], row["loss_socs"],
                         row["loss_consistency"])
    finally:
        if writer is not None:
            fh.close()
    if out is not None:
        save_checkpoint(model, out / "last.ckpt")
    return rows


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
