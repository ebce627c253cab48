"""Experiment configuration: TOML schema, defaults and validation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import tomli

from .errors import ConfigError
from .fedprotocol import METHODS
from .hashopt import LossWeights

SPLITS = ("iid", "noniid-equal", "noniid-unequal")


@dataclass
class SyntheticConfig:
    class_count: int = 8
    samples_per_class: int = 100
    image_dim: int = 64
    text_dim: int = 64
    cluster_spread: float = 0.2


@dataclass
class FileSource:
    images: str = ""
    texts: str = ""
    labels: str = ""


@dataclass
class PartitionConfig:
    scheme: str = "noniid-unequal"
    concentration: float = 0.5
    classes_per_client: int = 3
    samples_per_class: int = 20


@dataclass
class ExperimentConfig:
    """One experiment grid: every method x split x bit length x seed cell is a run.

    TOML layout mirrors the field names; nested tables ``[synthetic]``,
    ``[files]``, ``[partition]`` and ``[weights]`` hold the sub-configs.
    """

    methods: list[str] = field(default_factory=lambda: ["plfedcmh"])
    splits: list[str] = field(default_factory=lambda: ["noniid-unequal"])
    bits: list[int] = field(default_factory=lambda: [16, 32, 64])
    seeds: list[int] = field(default_factory=lambda: [0])
    n_clients: int = 4
    rounds: int = 20
    local_epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-4
    hn_learning_rate: float = 1e-3
    hn_embed_dim: int = 32
    hn_hidden: int = 64
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    dcc_sweeps: int = 5
    prototype_mode: str = "epoch"
    query_fraction: float = 0.1
    threads: int = 1
    checkpoint_every: int = 0
    synthetic: Optional[SyntheticConfig] = field(default_factory=SyntheticConfig)
    files: Optional[FileSource] = None
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> "ExperimentConfig":
        problems = []
        for name in ("n_clients", "batch_size", "hn_embed_dim", "hn_hidden", "dcc_sweeps", "threads"):
            if getattr(self, name) < 1:
                problems.append(f"{name}: must be >= 1")
        for name in ("rounds", "local_epochs", "checkpoint_every"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0")
        for name in ("learning_rate", "hn_learning_rate"):
            if not getattr(self, name) > 0:
                problems.append(f"{name}: must be > 0")
        if not self.seeds:
            problems.append("seeds: must be non-empty")
        if not self.bits or any(b < 1 for b in self.bits):
            problems.append("bits: must be a non-empty list of positive ints")
        bad = [m for m in self.methods if m not in METHODS]
        if not self.methods or bad:
            problems.append(f"methods: unknown {bad}; choose from {list(METHODS)}")
        bad = [s for s in self.splits if s not in SPLITS]
        if not self.splits or bad:
            problems.append(f"splits: unknown {bad}; choose from {list(SPLITS)}")
        if any(h < 1 for h in self.hidden):
            problems.append("hidden: widths must be >= 1")
        if self.prototype_mode not in ("epoch", "batch"):
            problems.append("prototype_mode: must be 'epoch' or 'batch'")
        if not 0 < self.query_fraction < 1:
            problems.append("query_fraction: must lie in (0, 1)")
        if self.synthetic is None and self.files is None:
            problems.append("data: need [synthetic] or [files]")
        if self.synthetic is not None:
            s = self.synthetic
            for name in ("class_count", "samples_per_class", "image_dim", "text_dim"):
                if getattr(s, name) < 1:
                    problems.append(f"synthetic.{name}: must be >= 1")
            if not s.cluster_spread > 0:
                problems.append("synthetic.cluster_spread: must be > 0")
        p = self.partition
        if not p.concentration > 0:
            problems.append("partition.concentration: must be > 0")
        if p.classes_per_client < 1 or p.samples_per_class < 1:
            problems.append("partition: classes_per_client and samples_per_class must be >= 1")
        if problems:
            raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}


_NESTED = {
    "synthetic": SyntheticConfig,
    "files": FileSource,
    "partition": PartitionConfig,
    "weights": LossWeights,
}


def _build(cls, data: dict, prefix: str = ""):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(prefix + k for k in unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k in _NESTED and cls is ExperimentConfig:
            if v is None:
                kwargs[k] = None
            elif not isinstance(v, dict):
                raise ConfigError(f"{k}: expected a table")
            else:
                kwargs[k] = _build(_NESTED[k], v, prefix=f"{k}.")
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    if "files" in data and "synthetic" not in data:
        data["synthetic"] = None
    return _build(ExperimentConfig, data).validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = tomli.loads(Path(path).read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def desk_scale_config(**overrides) -> ExperimentConfig:
    """Settings under which MLPs trained from scratch on the synthetic data actually learn.

    The library defaults (step 1e-4, eta 1e-5, mu 10) assume a pretrained
    deep backbone; at this scale they either leave the nets at initialisation
    or freeze the initial random codes. Mirrors ``configs/desk_scale.toml``.
    """
    base = dict(
        learning_rate=1e-2,
        local_epochs=5,
        weights=LossWeights(eta=1e-2, mu=1.0),
        synthetic=SyntheticConfig(cluster_spread=0.2),
    )
    base.update(overrides)
    return ExperimentConfig(**base).validate()
