"""Run configuration tree, YAML loading with relative paths, and verbatim dumps."""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import yaml

from .phantom import PhantomSpec
from .segnet import SegNetConfig
from .trainer import TrainConfig
from .types import ConfigError, LossWeights


@dataclass
class DataConfig:
    n_source: int = 60
    n_target: int = 60
    n_heldout: int = 20
    n_source_heldout: int = 20
    seed: int = 1
    noise_sigma: float = 0.03

    def phantom_spec(self, image_size: int) -> PhantomSpec:
        return PhantomSpec(image_size=image_size, noise_sigma=self.noise_sigma)


@dataclass
class PreprocessConfig:
    image_size: int = 96
    histogram_match: bool = True
    bins: int = 256

    def __post_init__(self):
        if self.image_size % 8 or self.image_size < 16:
            raise ConfigError(f"image size must be a multiple of 8 and >= 16, got {self.image_size}")
        if self.bins < 2:
            raise ConfigError("need at least 2 histogram bins")


@dataclass
class EvalConfig:
    overlays: int = 4


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data_dir: Optional[str] = None
    output_dir: Optional[str] = None
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])

    def to_dict(self):
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["segnet"]["multipliers"] = list(self.segnet.multipliers)
        if self.segnet.head_prior is not None:
            d["segnet"]["head_prior"] = list(self.segnet.head_prior)
        return d

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    def sync(self):
        """Keep the network input size tied to the preprocessing grid."""
        if self.segnet.input_size != self.preprocess.image_size:
            self.segnet = dataclasses.replace(self.segnet, input_size=self.preprocess.image_size)
        return self


def _build(cls, values):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section for {cls.__name__} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    values = dict(values)
    if cls is TrainConfig and isinstance(values.get("loss_weights"), dict):
        values["loss_weights"] = LossWeights(**values["loss_weights"])
    if cls is SegNetConfig:
        for key in ("multipliers", "head_prior"):
            if values.get(key) is not None:
                values[key] = tuple(values[key])
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


SECTIONS = {"data": DataConfig, "preprocess": PreprocessConfig, "segnet": SegNetConfig,
            "train": TrainConfig, "eval": EvalConfig}


def from_dict(tree: dict, base_dir: Path = None) -> RunConfig:
    tree = dict(tree or {})
    unknown = set(tree) - set(SECTIONS) - {"data_dir", "output_dir", "seeds"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {name: _build(cls, tree.get(name)) for name, cls in SECTIONS.items()}
    for key in ("data_dir", "output_dir"):
        value = tree.get(key)
        if value is not None and base_dir is not None and not Path(value).is_absolute():
            value = str((base_dir / value).resolve())
        kwargs[key] = value
    if "seeds" in tree:
        kwargs["seeds"] = [int(s) for s in tree["seeds"]]
    return RunConfig(**kwargs).sync()


def load_config(path) -> RunConfig:
    """Read a YAML config; relative paths resolve against the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        tree = yaml.safe_load(fh) or {}
    return from_dict(tree, path.parent.resolve())
