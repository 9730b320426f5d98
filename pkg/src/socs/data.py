"""Synthetic category datasets: instances, template, per-instance warps, and rendered views."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from socs.category import (
    BinCodec,
    CategoryTemplate,
    InstanceRecord,
    build_instance_warp,
    identity_warp,
    save_instance,
    save_template,
)
from socs.errors import ConfigError, EmptyView
from socs.geom import AnisoSimilarity, Frame, KeypointSet, PointCloud, RigidTransform, write_json, write_ply
from socs.synth import (
    FAMILIES,
    NUM_KEYPOINTS,
    Instance,
    ShapeParams,
    ViewSpec,
    generate_instance,
    look_at_rotation,
    render_partial,
    variation_degree,
)

LABEL_SPACES = ("socs", "nocs")


@dataclass(frozen=True)
class DatasetConfig:
    category: str = "lamp"
    spread: float = 0.5
    variation_target: float | None = None
    n_train: int = 16
    n_test: int = 8
    n_val: int = 0
    views_per_instance: int = 4
    n_surface: int = 4096
    num_keypoints: int = NUM_KEYPOINTS
    input_points: int = 1024
    azimuth_range: tuple = (0.0, 360.0)
    elevation_range: tuple = (15.0, 45.0)
    distance_range: tuple = (0.8, 1.2)
    occluder_fraction_train: float = 0.0
    occluder_fraction_test: float = 0.0
    depth_noise: float = 0.0
    resolution: tuple = (160, 120)
    focal: float = 200.0
    seed: int = 0

    def __post_init__(self):
        if self.category not in FAMILIES:
            raise ConfigError(f"unknown category {self.category!r}")
        if self.n_train < 1 or self.views_per_instance < 1 or self.n_val < 0:
            raise ConfigError("need at least one training instance and one view per instance")
        if not 4 <= self.num_keypoints <= 2 * NUM_KEYPOINTS:
            raise ConfigError(f"num_keypoints must be in [4, {2 * NUM_KEYPOINTS}]")
        for name in ("azimuth_range", "elevation_range", "distance_range", "resolution"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


def select_keypoints(kps: KeypointSet, m: int) -> KeypointSet:
    """A fixed-order subset (m < 32) or superset (m > 32) of the analytic landmarks.

    Extra landmarks are midpoints of consecutive landmarks on the same part, so
    they stay semantically consistent across instances.
    """
    pts, parts = kps.keypoints, kps.parts or ("",) * len(kps)
    n = len(pts)
    if m == n:
        return kps
    if m < n:
        idx = np.unique(np.round(np.linspace(0, n - 1, m)).astype(int))
        return KeypointSet(pts[idx], kps.frame, tuple(parts[i] for i in idx))
    extra, extra_parts = [], []
    for i in range(n - 1):
        if parts[i] == parts[i + 1]:
            extra.append((pts[i] + pts[i + 1]) / 2)
            extra_parts.append(parts[i])
    if len(extra) < m - n:
        raise ConfigError(f"cannot build {m} keypoints")
    idx = np.round(np.linspace(0, len(extra) - 1, m - n)).astype(int)
    return KeypointSet(
        np.concatenate([pts, np.asarray(extra)[idx]]),
        kps.frame,
        tuple(parts) + tuple(extra_parts[i] for i in idx),
    )


@dataclass
class View:
    cloud: np.ndarray
    instance: int
    gt_pose: AnisoSimilarity
    split: str
    view_id: str
    occluder_fraction: float = 0.0


@dataclass
class Dataset:
    config: DatasetConfig
    template_instance: Instance
    template: CategoryTemplate
    instances: list          # list[Instance]
    keypoints: list          # per instance KeypointSet (possibly resampled)
    splits: list             # per instance "train" | "test"
    warps: dict = field(default_factory=dict)   # label space -> list[TpsWarp]
    views: list = field(default_factory=list)
    spread: float = 0.0

    def record(self, view: View, label_space: str = "socs") -> InstanceRecord:
        i = view.instance
        return InstanceRecord(
            self.instances[i].shape, self.keypoints[i], self.warps[label_space][i], view.gt_pose,
            f"inst{i:04d}",
        )

    def split_views(self, split: str) -> list:
        return [v for v in self.views if v.split == split]

    def variation(self, split: str | None = None) -> float:
        inst = [x.shape for x, s in zip(self.instances, self.splits) if split is None or s == split]
        return variation_degree(inst, self.template_instance.shape)

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "spread": self.spread,
            "instances": [
                {"id": f"inst{i:04d}", "split": s, "params": inst.params.values, "seed": inst.params.seed,
                 "diagonal": inst.diagonal}
                for i, (inst, s) in enumerate(zip(self.instances, self.splits))
            ],
            "views": [
                {"id": v.view_id, "instance_id": f"inst{v.instance:04d}", "split": v.split,
                 "occluder_fraction": v.occluder_fraction}
                for v in self.views
            ],
        }


def _instance_seeds(seed: int, n: int) -> list:
    ss = np.random.SeedSequence([seed, 17])
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


def sample_instances(category: str, spread: float, n: int, seed: int, n_surface: int) -> list:
    return [generate_instance(ShapeParams.sample(category, spread, s), n_surface) for s in _instance_seeds(seed, n)]


def calibrate_spread(category: str, target: float, seed: int, n: int = 16, n_surface: int = 2048,
                     tol: float = 0.02) -> float:
    """Bisect the parameter spread so the variation degree of ``n`` instances hits ``target``."""
    template = generate_instance(ShapeParams.median(category), n_surface).shape

    def degree(spread):
        return variation_degree([i.shape for i in sample_instances(category, spread, n, seed, n_surface)],
                                template)

    lo, hi = 0.0, 2.0
    if degree(hi) < target:
        raise ConfigError(f"variation target {target} unreachable for {category}")
    for _ in range(40):
        mid = (lo + hi) / 2
        d = degree(mid)
        if abs(d - target) <= tol * target:
            return mid
        lo, hi = (mid, hi) if d < target else (lo, mid)
    return (lo + hi) / 2


def build_dataset(config: DatasetConfig, label_spaces=LABEL_SPACES) -> Dataset:
    rng = np.random.default_rng([config.seed, 3])
    spread = config.spread
    if config.variation_target is not None:
        spread = calibrate_spread(config.category, config.variation_target, config.seed)
    n_total = config.n_train + config.n_test + config.n_val
    instances = sample_instances(config.category, spread, n_total, config.seed, config.n_surface)
    splits = ["train"] * config.n_train + ["test"] * config.n_test + ["val"] * config.n_val
    tmpl_inst = generate_instance(ShapeParams.median(config.category), config.n_surface)
    train_diags = [i.diagonal for i, s in zip(instances, splits) if s == "train"]
    template = CategoryTemplate(
        PointCloud(tmpl_inst.shape.points, Frame.SOCS),
        select_keypoints(tmpl_inst.keypoints, config.num_keypoints),
        float(max(train_diags + [tmpl_inst.diagonal])),
        config.category,
    )
    kps = [select_keypoints(i.keypoints, config.num_keypoints) for i in instances]
    warps = {}
    if "socs" in label_spaces:
        warps["socs"] = [build_instance_warp(k, template) for k in kps]
    if "nocs" in label_spaces:
        warps["nocs"] = [identity_warp(k) for k in kps]
    ds = Dataset(config, tmpl_inst, template, instances, kps, splits, warps, [], spread)

    for i, (inst, split) in enumerate(zip(instances, splits)):
        for j in range(config.views_per_instance):
            az = np.radians(rng.uniform(*config.azimuth_range))
            el = np.radians(rng.uniform(*config.elevation_range))
            dist = rng.uniform(*config.distance_range)
            R = look_at_rotation(az, el)
            pose = AnisoSimilarity(RigidTransform(R, [0.0, 0.0, dist]), inst.diagonal)
            occ = config.occluder_fraction_train if split == "train" else config.occluder_fraction_test
            side = ("left", "right", "top", "bottom")[int(rng.integers(4))]
            view = ViewSpec(
                resolution=config.resolution, focal=config.focal, occluder_fraction=occ,
                occluder_side=side, depth_noise=config.depth_noise, n_points=config.input_points,
                seed=int(rng.integers(2**31)),
            )
            try:
                cloud = render_partial(inst.shape, view, pose)
            except EmptyView:
                continue
            ds.views.append(View(cloud.points, i, pose, split, f"{split}-{i:04d}-{j:02d}", occ))
    return ds


def save_dataset(ds: Dataset, out_dir, label_space: str = "socs", codec: BinCodec | None = None) -> str:
    """Write the dataset and category bundle; returns the manifest hash."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    codec = codec or BinCodec()
    bundle = out / "category"
    save_template(ds.template, codec, bundle, label_space)
    for i in range(len(ds.instances)):
        rec = InstanceRecord(ds.instances[i].shape, ds.keypoints[i], ds.warps[label_space][i],
                             AnisoSimilarity(scale=ds.instances[i].diagonal), f"inst{i:04d}")
        save_instance(rec, bundle)
    for v in ds.views:
        d = out / "samples" / v.view_id
        d.mkdir(parents=True, exist_ok=True)
        write_ply(d / "cloud.ply", v.cloud, binary=True)
        write_json(d / "pose.json", v.gt_pose.to_json())
        (d / "instance_id").write_text(f"inst{v.instance:04d}\n")
    manifest = ds.manifest()
    write_json(out / "manifest.json", manifest)
    return manifest_hash(manifest)


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()
