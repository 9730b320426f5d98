"""Inference: dense query sampling, bin decoding, robust pose fit, and evaluation records."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from socs.category import BinCodec, label_points
from socs.data import Dataset, View
from socs.errors import EmptyEval, NoModel, NumericalError
from socs.metrics import EvalRecord, box_from_pose
from socs.model import SocsNet
from socs.posefit import CorrespondenceSet, FitResult, RansacConfig, fit_robust
from socs.sampling import SamplingStrategy, sample_queries


@dataclass(frozen=True)
class InferConfig:
    n_queries: int = 2048
    keep_fraction: float = 0.5
    inlier_fraction: float = 0.05   # RANSAC threshold as a fraction of the category diagonal
    ransac_iters: int = 256
    seed: int = 0


@dataclass
class Prediction:
    queries: np.ndarray     # (Q, 3) camera frame
    bins: np.ndarray        # (Q, 3) argmax bins
    coords: np.ndarray      # (Q, 3) decoded canonical coordinates
    confidence: np.ndarray  # (Q,) product of per-axis max probabilities


@torch.no_grad()
def predict(model: SocsNet, cloud: np.ndarray, queries: np.ndarray, codec: BinCodec,
            indices=None, chunk: int = 1024) -> Prediction:
    model.eval()
    dt = model.config.torch_dtype
    pyr = model.aggregate(torch.as_tensor(cloud, dtype=dt)[None], indices)
    bins, conf = [], []
    for i in range(0, len(queries), chunk):
        feat = model.propagate(torch.as_tensor(queries[i : i + chunk], dtype=dt)[None], pyr)
        probs = torch.softmax(model.head_logits(feat), dim=-1)[0]  # (q, 3, B)
        p, b = probs.max(dim=-1)
        bins.append(b.numpy())
        conf.append(p.prod(dim=-1).numpy())
    bins = np.concatenate(bins)
    return Prediction(queries, bins, codec.decode(bins), np.concatenate(conf).astype(np.float64))


def oracle_prediction(view_record, queries: np.ndarray, codec: BinCodec) -> Prediction:
    """Ground-truth labels in place of network output, quantized through the codec."""
    lab = label_points(queries, view_record, codec)
    return Prediction(queries, lab.bins, codec.decode(lab.bins), np.ones(len(queries)))


def estimate_pose(pred: Prediction, category_diagonal: float, cfg: InferConfig) -> FitResult:
    order = np.argsort(-pred.confidence, kind="stable")
    keep = order[: max(4, int(round(cfg.keep_fraction * len(order))))]
    C = CorrespondenceSet(pred.coords[keep], pred.queries[keep])
    ransac = RansacConfig(cfg.ransac_iters, cfg.inlier_fraction * category_diagonal, 4, cfg.seed)
    return fit_robust(C, ransac)


def eval_record(ds: Dataset, view: View, fit: FitResult, label_space: str) -> EvalRecord:
    inst = ds.instances[view.instance]
    lo, hi = inst.shape.bbox()
    t_lo, t_hi = ds.template_instance.shape.bbox() if label_space == "socs" else (lo, hi)
    return EvalRecord(
        gt=view.gt_pose,
        gt_box=box_from_pose(view.gt_pose, lo, hi),
        pred=fit.transform,
        pred_box=box_from_pose(fit.transform, t_lo, t_hi),
        category=ds.config.category,
        record_id=view.view_id,
    )


def evaluate(ds: Dataset, views, label_space: str, codec: BinCodec, cfg: InferConfig,
             model: SocsNet | None = None, strategy: SamplingStrategy | None = None) -> list:
    """Evaluation records for ``views``; ``model=None`` injects ground-truth labels.

    Views where no pose could be fitted are skipped; the caller counts them as failures.
    """
    views = list(views)
    if not views:
        raise EmptyEval("no views to evaluate")
    strategy = strategy or SamplingStrategy("SI", cfg.n_queries)
    records = []
    for k, view in enumerate(views):
        rng = np.random.default_rng([cfg.seed, k])
        q = sample_queries(strategy, view.cloud, ds.template, rng).points
        if model is None:
            pred = oracle_prediction(ds.record(view, label_space), q, codec)
        else:
            pred = predict(model, view.cloud, q, codec)
        try:
            fit = estimate_pose(pred, ds.template.category_diagonal, cfg)
        except (NoModel, NumericalError):
            continue
        records.append(eval_record(ds, view, fit, label_space))
    return records


@torch.no_grad()
def coordinate_errors(model: SocsNet, ds: Dataset, views, label_space: str, codec: BinCodec) -> np.ndarray:
    """Per-point distance between decoded predictions and labels on the observed points."""
    errs = []
    for view in views:
        rec = ds.record(view, label_space)
        lab = label_points(view.cloud, rec, codec)
        pred = predict(model, view.cloud, view.cloud, codec)
        errs.append(np.linalg.norm(pred.coords - lab.coord, axis=1))
    return np.concatenate(errs)
