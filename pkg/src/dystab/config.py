"""Training configuration with flat dotted-key JSON round trip."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class DynamicConfig:
    lambda_tc: float = 0.1
    eps: float = 1e-2
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 30
    phi_steps: int = 3
    psi_steps: int = 1
    max_interval: int = 3
    min_motion: float = 0.5  # px; pairs with less relative motion are not trained on
    flow_samples: int = 2
    batch_size: int = 4
    flow_source: str = "gt"  # "gt" or "estimated"
    input_scale: float = 0.25
    widths: tuple = (16, 32, 64, 64)


@dataclass
class StaticConfig:
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 15
    augment: bool = True  # random flips and quarter turns of each batch
    delta: float = 0.2
    lambda_f: float = 1.0
    alpha2: float = 1.5
    batch_size: int = 4
    gated: bool = True
    widths: tuple = (16, 32, 64, 64)


@dataclass
class BootstrapConfig:
    rounds: int = 3
    dynamic_epochs: int = 10
    dynamic_lr: float = 0.0  # phi/psi learning rate within rounds; 0 keeps dynamic.lr
    lambda_obj: float = 1.0
    fusion: str = "motion"  # "motion", "product", "min" or "mean"
    fusion_threshold: float = 0.5


@dataclass
class FlowConfig:
    levels: int = 3
    iters: int = 50
    alpha: float = 0.1
    occ_a: float = 0.01
    occ_b: float = 0.5


@dataclass
class DataConfig:
    n_sequences: int = 8
    height: int = 64
    width: int = 64
    n_frames: int = 8
    mix: dict = field(default_factory=lambda: {"camouflage": 1.0})
    train_fraction: float = 0.8
    families: tuple = (1, 2, 3, 4, 5, 6, 7, 8)


@dataclass
class TrainConfig:
    seed: int = 0
    dynamic: DynamicConfig = field(default_factory=DynamicConfig)
    static: StaticConfig = field(default_factory=StaticConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_flat(self):
        flat = {"seed": self.seed}
        for sect in ("dynamic", "static", "bootstrap", "flow", "data"):
            for k, v in dataclasses.asdict(getattr(self, sect)).items():
                flat[f"{sect}.{k}"] = list(v) if isinstance(v, tuple) else v
        return flat

    def updated(self, **flat):
        """Copy with dotted-key overrides, e.g. ``updated(**{"dynamic.epochs": 2})``."""
        return TrainConfig.from_flat({**self.to_flat(), **flat})

    @classmethod
    def from_flat(cls, flat):
        cfg = cls()
        for key, value in flat.items():
            if key == "seed":
                cfg.seed = int(value)
                continue
            sect, _, name = key.partition(".")
            sub = getattr(cfg, sect, None)
            if sub is None or not dataclasses.is_dataclass(sub) or not hasattr(sub, name):
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(sub, name)
            if isinstance(current, tuple):
                value = tuple(value)
            elif isinstance(current, bool):
                value = bool(value)
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            setattr(sub, name, value)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_flat(data)

    def digest(self):
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
