"""Declarative experiment configuration.

Configs are JSON objects with a fixed key set; unknown keys are hard
errors so hyperparameter typos cannot pass silently. Serialization
round-trips exactly, and a content hash over everything except the seed
list and output paths names the results directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .attacks import default_hyperparams
from .backbones import ARCHS, MAX_LEVEL_U, MAX_LEVEL_VANILLA, MIN_LEVEL
from .data import REGISTRY, SYNTHETIC_DEFAULT_SIZE
from .defenses import DefenseConfig
from .errors import ConfigError

ATTACKS = ("none", "naive_sda", "sdar", "pcat", "unsplit", "fsha")
MODES = ("vanilla", "u")

DEFAULT_BATCH = 128
STL10_BATCH = 32


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic-tiny"
    arch: str = "resnet20"
    width: float = 1.0
    mode: str = "vanilla"
    level: int = 7
    attack: str = "none"
    active: bool = False
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    aux_ratio: float = 1.0
    removed_classes: tuple[int, ...] = ()
    private_size: int | None = None
    aux_size: int | None = None
    iterations: int = 1000
    batch_size: int | None = None
    seeds: tuple[int, ...] = (0,)
    clients: int = 1
    heterogeneous: bool = False
    lambda1: float | None = None
    lambda2: float | None = None
    flip_p: float | None = None
    lr: float = 1e-3
    conditional: bool | None = None
    sim_same_arch: bool = True
    disc_width: float = 1.0
    synthetic_size: int = SYNTHETIC_DEFAULT_SIZE
    unsplit_rounds: int = 1000
    unsplit_inner_steps: int = 100
    save_transcript: bool = False

    def validate(self) -> None:
        if self.dataset not in REGISTRY:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}")
        max_level = MAX_LEVEL_U if self.mode == "u" else MAX_LEVEL_VANILLA
        if not MIN_LEVEL <= self.level <= max_level:
            raise ConfigError(
                f"level {self.level} out of range [{MIN_LEVEL}, {max_level}] "
                f"for {self.mode} mode"
            )
        if self.attack == "fsha":
            if self.mode != "vanilla":
                raise ConfigError("fsha requires vanilla mode")
            if not self.active:
                raise ConfigError(
                    "fsha is an active attack; set active=true to acknowledge"
                )
        elif self.active:
            raise ConfigError("active=true is only meaningful for fsha")
        if self.attack == "naive_sda" and self.mode != "vanilla":
            raise ConfigError("naive_sda requires vanilla mode")
        if self.conditional and self.mode != "vanilla":
            raise ConfigError("conditional attacker models require vanilla mode")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0.0 < self.aux_ratio <= 1.0:
            raise ConfigError("aux_ratio must be in (0, 1]")
        if self.flip_p is not None and not 0.0 <= self.flip_p <= 1.0:
            raise ConfigError("flip_p must be in [0, 1]")
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError(f"{name} must be >= 0")

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return STL10_BATCH if self.dataset == "stl10" else DEFAULT_BATCH

    def resolved_hyperparams(self) -> tuple[float, float, float]:
        lam1, lam2, p = default_hyperparams(self.mode, self.dataset, self.arch)
        return (
            lam1 if self.lambda1 is None else self.lambda1,
            lam2 if self.lambda2 is None else self.lambda2,
            p if self.flip_p is None else self.flip_p,
        )

    @property
    def effective_conditional(self) -> bool:
        if self.conditional is not None:
            return self.conditional
        return self.attack == "sdar" and self.mode == "vanilla"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["defense"] = self.defense.to_dict()
        d["removed_classes"] = list(self.removed_classes)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "defense" in d and not isinstance(d["defense"], DefenseConfig):
            d["defense"] = DefenseConfig.from_dict(d["defense"])
        if "removed_classes" in d:
            d["removed_classes"] = tuple(d["removed_classes"])
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        config = cls(**d)
        config.validate()
        return config

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def content_hash(self) -> str:
        d = self.to_dict()
        d.pop("seeds")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def run_name(self) -> str:
        return (
            f"{self.dataset}-{self.arch}-{self.mode}{self.level}-"
            f"{self.attack}-{self.content_hash()}"
        )


def _mini(**over) -> dict:
    base = {
        "dataset": "synthetic-tiny",
        "arch": "resnet20",
        "width": 0.5,
        "level": 7,
        "iterations": 400,
        "batch_size": 16,
        "synthetic_size": 2048,
        "disc_width": 0.25,
        "seeds": [0, 1, 2],
    }
    base.update(over)
    return base


def _desk(**over) -> dict:
    base = {
        "dataset": "cifar10",
        "arch": "resnet20",
        "width": 0.5,
        "level": 7,
        "iterations": 5000,
        "private_size": 8000,
        "aux_size": 8000,
        "seeds": [0, 1, 2],
    }
    base.update(over)
    return base


def _full(**over) -> dict:
    base = {
        "dataset": "cifar10",
        "arch": "resnet20",
        "width": 1.0,
        "level": 7,
        "iterations": 20000,
        "seeds": [0, 1, 2, 3, 4],
    }
    base.update(over)
    return base


PRESETS: dict[str, dict] = {
    "mini-vanilla-none": _mini(attack="none"),
    "mini-vanilla-naive": _mini(attack="naive_sda"),
    "mini-vanilla-pcat": _mini(attack="pcat"),
    "mini-vanilla-sdar": _mini(attack="sdar"),
    "mini-u-sdar": _mini(mode="u", attack="sdar"),
    "mini-vanilla-fsha": _mini(attack="fsha", active=True, seeds=[0]),
    "mini-vanilla-unsplit": _mini(
        attack="unsplit", iterations=20, seeds=[0],
        unsplit_rounds=10, unsplit_inner_steps=10,
    ),
    "mini-decorrelation": _mini(
        attack="sdar", defense={"kind": "decorrelation", "alpha": 0.8},
    ),
    "desk-cifar10-none": _desk(attack="none"),
    "desk-cifar10-naive": _desk(attack="naive_sda"),
    "desk-cifar10-pcat": _desk(attack="pcat"),
    "desk-cifar10-sdar": _desk(attack="sdar"),
    "desk-cifar10-u-sdar": _desk(mode="u", attack="sdar"),
    "desk-cifar10-decorrelation": _desk(
        attack="sdar", defense={"kind": "decorrelation", "alpha": 0.8},
    ),
    "full-cifar10-sdar": _full(attack="sdar"),
    "full-cifar10-pcat": _full(attack="pcat"),
    "full-cifar100-sdar": _full(attack="sdar", dataset="cifar100"),
    "full-tiny-imagenet-sdar": _full(attack="sdar", dataset="tiny-imagenet"),
    "full-stl10-sdar": _full(attack="sdar", dataset="stl10"),
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; see list-presets")
    return ExperimentConfig.from_dict(PRESETS[name])
