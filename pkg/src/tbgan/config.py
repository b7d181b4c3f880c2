"""Run configuration: one JSON document holding architecture, training, paths and modes."""
from dataclasses import asdict, dataclass, field
import hashlib
import json
import os
from pathlib import Path

import torch

from .arch import ArchConfig
from .errors import ConfigError
from .training import TrainConfig

SCHEMA_VERSION = 1
DETERMINISTIC_ENV = "TBGAN_DETERMINISTIC"


@dataclass
class Paths:
    dataset: str = None
    output: str = "runs/latest"
    checkpoints: str = None

    def checkpoint_dir(self):
        return Path(self.checkpoints) if self.checkpoints else Path(self.output) / "checkpoints"


@dataclass
class Mode:
    deterministic: bool = True
    float64_verify: bool = False


@dataclass
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)
    mode: Mode = field(default_factory=Mode)

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "arch": self.arch.to_dict(),
                "train": self.train.to_dict(), "paths": asdict(self.paths),
                "mode": asdict(self.mode)}

    def semantic_dict(self):
        """Fields that change what a run computes; paths and modes are excluded."""
        arch = self.arch.to_dict()
        # The explicit schedule already encodes these two.
        arch.pop("max_channels")
        arch.pop("min_channels")
        return {"arch": arch, "train": self.train.to_dict()}

    def hash(self):
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self, need_dataset=False):
        if need_dataset:
            if not self.paths.dataset:
                raise ConfigError("paths.dataset is required")
            if not Path(self.paths.dataset).is_dir():
                raise ConfigError(f"dataset directory {self.paths.dataset} does not exist")
        return self


def _section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"'{name}' must be an object")
    unknown = set(data) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {name} fields: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from exc


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    unknown = set(data) - {"schema_version", "arch", "train", "paths", "mode"}
    if unknown:
        raise ConfigError(f"unknown top-level fields: {sorted(unknown)}")
    try:
        arch = ArchConfig.from_dict(data.get("arch") or {})
        train = TrainConfig.from_dict(data.get("train") or {})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(arch, train, _section(Paths, data.get("paths"), "paths"),
                     _section(Mode, data.get("mode"), "mode"))


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def apply_determinism(enabled):
    """Single-threaded, deterministic kernels when ``enabled`` or the env var is set."""
    if enabled or os.environ.get(DETERMINISTIC_ENV) == "1":
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
        return True
    return False
