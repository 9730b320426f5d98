"""End-to-end runs: build a dataset, train, and measure coordinate, pose and consistency errors.

Also hosts the ablation grid.  Each run is determined by its
:class:`~socs.config.ExperimentConfig`, so grid cells can run in separate
processes with separate output directories.
"""

from __future__ import annotations

import csv
import functools
import itertools
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from socs.category import BinCodec
from socs.config import ExperimentConfig, save_config
from socs.data import Dataset, DatasetConfig, build_dataset
from socs.geom import random_rigid, write_json
from socs.infer import InferConfig, coordinate_errors, evaluate
from socs.metrics import compile_report, write_residuals_csv
from socs.model import SocsNet, loss_consistency
from socs.sampling import SamplingStrategy, sample_queries
from socs.train import TrainSample, train

log = logging.getLogger(__name__)


@functools.lru_cache(maxsize=4)
def cached_dataset(config: DatasetConfig) -> Dataset:
    return build_dataset(config)


def codec_for(cfg: ExperimentConfig) -> BinCodec:
    return BinCodec(cfg.model.num_bins)


def training_samples(ds: Dataset, label_space: str) -> list:
    return [TrainSample(v.cloud, ds.record(v, label_space), None, v.view_id) for v in ds.split_views("train")]


def eval_views(ds: Dataset, cfg: ExperimentConfig, split: str = "test") -> list:
    views = ds.split_views(split)
    n = cfg.infer.n_eval_views
    return views[:n] if n else views


def fit_model(cfg: ExperimentConfig, ds: Dataset, out_dir=None) -> tuple:
    """Train a fresh network; returns ``(model, metric rows)``."""
    model = SocsNet(cfg.model)
    codec = codec_for(cfg)
    validate = None
    val = ds.split_views("val")
    if cfg.train.checkpoint_every and val:
        def validate(m):
            return float(np.median(coordinate_errors(m, ds, val, cfg.label_space, codec)))
    rows = train(model, training_samples(ds, cfg.label_space), ds.template, codec, cfg.sampling,
                 cfg.train, out_dir=out_dir, validate=validate)
    return model, rows


@torch.no_grad()
def consistency_distance(model: SocsNet, ds: Dataset, views, n_queries: int = 256, seed: int = 0) -> float:
    """Mean feature distance between each probe cloud and a randomly moved copy of it.

    This is the consistency-loss value evaluated after training, with a fresh
    uniform rotation (and small translation) per probe.
    """
    model.eval()
    rng = np.random.default_rng([seed, 9])
    dt = model.config.torch_dtype
    out = []
    for view in views:
        q = sample_queries(SamplingStrategy("SI", n_queries), view.cloud, ds.template, rng).points
        T = random_rigid(rng, 0.1)
        feat, _ = model(torch.as_tensor(view.cloud, dtype=dt)[None], torch.as_tensor(q, dtype=dt)[None])
        feat_t, _ = model(torch.as_tensor(T.apply(view.cloud), dtype=dt)[None],
                          torch.as_tensor(T.apply(q), dtype=dt)[None])
        out.append(float(loss_consistency(feat, feat_t)))
    return float(np.mean(out))


def eval_strategy(cfg: ExperimentConfig) -> SamplingStrategy:
    """Inference uses the training strategy at the inference query budget."""
    n = cfg.infer.n_queries
    if cfg.sampling.kind == "P":
        n = min(n, cfg.dataset.input_points)
    return replace(cfg.sampling, n_samples=n)


def pose_metrics(cfg: ExperimentConfig, ds: Dataset, views, model=None, out_dir=None) -> dict:
    codec = codec_for(cfg)
    icfg = InferConfig(cfg.infer.n_queries, cfg.infer.keep_fraction, cfg.infer.inlier_fraction,
                       cfg.infer.ransac_iters, cfg.seed)
    records = evaluate(ds, views, cfg.label_space, codec, icfg, model=model, strategy=eval_strategy(cfg))
    bin_width = 2.0 / codec.num_bins      # two bin widths, in diagonal-normalized units
    report = compile_report(records, cfg.infer.iou_samples, cfg.seed,
                            normalized_thresholds=((5, 0.05), (10, bin_width)), failed=len(views) - len(records))
    if out_dir is not None:
        report.save(out_dir)
        write_residuals_csv(records, Path(out_dir) / "residuals.csv")
    d = report.to_json()
    d["precision_10deg_2bins"] = report.precision[f"10deg{bin_width:g}"]
    norm = [r.translation_error() / (2 * np.linalg.norm(r.gt_box.half_extents)) for r in records]
    d["translation_norm_median"] = float(np.median(norm)) if norm else float("nan")
    return d


def run(cfg: ExperimentConfig, out_dir=None, pose: bool = True, consistency_probe: bool = True) -> dict:
    """Train and evaluate one configuration; returns a flat JSON-able summary."""
    torch.set_num_threads(1)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        save_config(cfg, out / "config.yaml")
    ds = cached_dataset(cfg.dataset)
    t0 = time.perf_counter()
    model, rows = fit_model(cfg, ds, out)
    train_seconds = time.perf_counter() - t0
    views = eval_views(ds, cfg)
    errs = coordinate_errors(model, ds, views, cfg.label_space, codec_for(cfg))
    tail = rows[-min(100, len(rows)):]
    head = rows[: min(100, len(rows))]
    result = {
        "label_space": cfg.label_space,
        "seed": cfg.seed,
        "spread": ds.spread,
        "variation": ds.variation("train"),
        "num_bins": cfg.model.num_bins,
        "sampling": cfg.sampling.kind,
        "mp": cfg.mp, "gp": cfg.gp, "cl": cfg.cl,
        "num_keypoints": cfg.dataset.num_keypoints,
        "steps": cfg.train.total_steps,
        "train_seconds": train_seconds,
        "loss_socs_start": float(np.mean([r["loss_socs"] for r in head])),
        "loss_socs_end": float(np.mean([r["loss_socs"] for r in tail])),
        "coord_error_median": float(np.median(errs)),
        "coord_error_mean": float(np.mean(errs)),
    }
    if consistency_probe:
        result["feature_distance"] = consistency_distance(model, ds, views, seed=cfg.seed)
    if pose:
        pm = pose_metrics(cfg, ds, views, model, out / "eval" if out is not None else None)
        result.update({f"pose_{k}": v for k, v in pm.items() if not isinstance(v, dict)})
        for group in ("iou", "precision"):
            for k, v in pm.get(group, {}).items():
                result[f"pose_{k}"] = v
    if out is not None:
        write_json(out / "result.json", result)
    return result


# --- ablation grid --------------------------------------------------------

GRID_AXES = {
    "sampling": ("P", "SD", "SI"),
    "gp": (True, False),
    "cl": (True, False),
    "num_bins": (32, 64, 128, 256),
    "num_keypoints": (8, 16, 32, 64),
}


def apply_cell(base: ExperimentConfig, cell: dict) -> ExperimentConfig:
    cfg = base
    if "sampling" in cell:
        cfg = replace(cfg, sampling=replace(cfg.sampling, kind=cell["sampling"]))
    cfg = cfg.with_ablation(mp=cell.get("mp"), gp=cell.get("gp"), cl=cell.get("cl"))
    if "num_bins" in cell:
        cfg = replace(cfg, model=replace(cfg.model, num_bins=int(cell["num_bins"])))
    if "num_keypoints" in cell:
        cfg = replace(cfg, dataset=replace(cfg.dataset, num_keypoints=int(cell["num_keypoints"])))
    if "label_space" in cell:
        cfg = replace(cfg, label_space=cell["label_space"])
    return cfg


def grid_cells(axes: dict) -> list:
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


ROW_FIELDS = ("cell", "label_space", "sampling", "mp", "gp", "cl", "num_bins", "num_keypoints", "seed",
              "variation", "coord_error_median", "coord_error_mean", "feature_distance",
              "pose_rotation_median", "pose_translation_median", "pose_precision_10deg_2bins",
              "loss_socs_end", "train_seconds")


def ablate(base: ExperimentConfig, axes: dict | None = None, seeds=(0,), out_dir=None,
           label_comparison: bool = True, pose: bool = True) -> list:
    """One row per (cell, seed), plus a SOCS-vs-NOCS row pair at the base setting."""
    axes = GRID_AXES if axes is None else axes
    cells = grid_cells(axes)
    if label_comparison:
        cells += [{"label_space": "socs", "tag": "labels"}, {"label_space": "nocs", "tag": "labels"}]
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for i, cell in enumerate(cells):
        for seed in seeds:
            cfg = apply_cell(base.with_seed(seed), cell)
            name = f"cell{i:03d}-seed{seed}"
            cell_dir = out / name if out is not None else None
            res = run(cfg, cell_dir, pose=pose)
            res["cell"] = cell.get("tag", f"cell{i:03d}") if "tag" in cell else f"cell{i:03d}"
            rows.append(res)
            log.info("%s %s coord %.4f", name, cell, res["coord_error_median"])
    if out is not None:
        write_rows(rows, out / "ablation.csv")
    return rows


def write_rows(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ROW_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in ROW_FIELDS})
