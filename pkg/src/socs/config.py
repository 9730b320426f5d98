"""Experiment configuration: one YAML file holding every knob of a run.

Every default is written out explicitly when a config is saved, so an
experiment directory documents itself.  ``parse(serialize(c)) == c``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from socs.data import LABEL_SPACES, DatasetConfig
from socs.errors import ConfigError
from socs.model import ModelConfig
from socs.sampling import SamplingStrategy
from socs.train import TrainConfig


@dataclass(frozen=True)
class InferSettings:
    n_queries: int = 2048
    keep_fraction: float = 0.5
    inlier_fraction: float = 0.05
    ransac_iters: int = 256
    n_eval_views: int = 0          # 0 evaluates every view of the split
    iou_samples: int = 200_000


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingStrategy = field(default_factory=SamplingStrategy)
    infer: InferSettings = field(default_factory=InferSettings)
    label_space: str = "socs"
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.label_space not in LABEL_SPACES:
            raise ConfigError(f"label_space must be one of {LABEL_SPACES}")
        if self.model.input_points != self.dataset.input_points:
            raise ConfigError("model.input_points must equal dataset.input_points")

    # ablation switches live in the sub-configs; these are read-only views
    @property
    def mp(self) -> bool:
        return self.model.multi_scale

    @property
    def gp(self) -> bool:
        return self.model.global_attention != "off"

    @property
    def cl(self) -> bool:
        return self.train.consistency

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Reseed the dataset, model init and training stream together."""
        return replace(
            self,
            seed=seed,
            dataset=replace(self.dataset, seed=seed),
            model=replace(self.model, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def with_ablation(self, mp=None, gp=None, cl=None, gp_mode: str = "joint") -> "ExperimentConfig":
        model, train = self.model, self.train
        if mp is not None:
            model = replace(model, multi_scale=bool(mp))
        if gp is not None and bool(gp) != self.gp:
            model = replace(model, global_attention=gp_mode if gp else "off")
        if cl is not None:
            train = replace(train, consistency=bool(cl))
        return replace(self, model=model, train=train)

    def to_dict(self) -> dict:
        return {
            "label_space": self.label_space,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "ablation": {"mp": self.mp, "gp": self.gp, "cl": self.cl},
            "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "sampling": dataclasses.asdict(self.sampling),
            "infer": dataclasses.asdict(self.infer),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        known = {"label_space", "seed", "out_dir", "ablation", "dataset", "model", "train", "sampling", "infer"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(
                dataset=_build(DatasetConfig, d.get("dataset")),
                model=_build(ModelConfig, d.get("model")),
                train=_build(TrainConfig, d.get("train")),
                sampling=_build(SamplingStrategy, d.get("sampling")),
                infer=_build(InferSettings, d.get("infer")),
                label_space=d.get("label_space", "socs"),
                seed=int(d.get("seed", 0)),
                out_dir=str(d.get("out_dir", "runs/default")),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        ab = d.get("ablation") or {}
        bad = set(ab) - {"mp", "gp", "cl"}
        if bad:
            raise ConfigError(f"unknown ablation switches: {sorted(bad)}")
        return cfg.with_ablation(ab.get("mp"), ab.get("gp"), ab.get("cl"))


def _build(kind, section):
    section = dict(section or {})
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    for key, value in section.items():
        if isinstance(value, list):
            section[key] = tuple(value)
    return kind(**section)


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)


def loads(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    return ExperimentConfig.from_dict(data or {})


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text())


def save_config(cfg: ExperimentConfig, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dumps(cfg))


def desk_config(**overrides) -> ExperimentConfig:
    """The reduced setting used for the directional experiments on one CPU core."""
    base = ExperimentConfig(
        dataset=DatasetConfig(
            category="lamp", spread=0.8, n_train=24, n_test=8, n_val=4, views_per_instance=6,
            n_surface=3000, input_points=512, azimuth_range=(-45.0, 45.0),
        ),
        model=ModelConfig(width=32, input_points=512, block_points=(256, 128, 64, 32, 16), length_scale=0.1),
        train=TrainConfig(batch_size=8, learning_rate=0.003, total_steps=1200, consistency=False, log_every=0),
        sampling=SamplingStrategy("SI", 128),
        infer=InferSettings(n_queries=1024, ransac_iters=64, n_eval_views=16, iou_samples=20_000),
    )
    return replace(base, **overrides)
