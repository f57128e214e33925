"""Experiment configuration: flat dotted-key JSON, unknown keys rejected."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .dmcaf import DmcafConfig
from .segnet import NetConfig


class ConfigError(ValueError):
    pass


def _bool(v):
    if isinstance(v, bool):
        return v
    raise ConfigError(f"expected a JSON boolean, got {v!r}")


def _betas(v):
    if (isinstance(v, (list, tuple)) and len(v) == 2
            and all(isinstance(x, (int, float)) for x in v)):
        return (float(v[0]), float(v[1]))
    raise ConfigError(f"expected [beta1, beta2], got {v!r}")


# key -> (attribute, converter, default)
SCHEMA = {
    "variant.fusion": ("fusion", str, "dmcaf"),
    "variant.qskip": ("qskip", _bool, True),
    "variant.qmoe": ("qmoe", _bool, True),
    "net.width": ("width", float, 1.0),
    "net.classes": ("n_classes", int, 5),
    "net.input": ("input_size", int, 224),
    "quantum.n_qubits": ("n_qubits", int, 16),
    "provider.mode": ("provider_mode", str, "synthetic"),
    "provider.seed": ("provider_seed", int, 0),
    "provider.manifest": ("provider_manifest", str, ""),
    "provider.channels": ("provider_channels", int, 64),
    "provider.patch": ("provider_patch", int, 2),
    "dmcaf.dim": ("dmcaf_dim", int, 64),
    "dmcaf.heads": ("dmcaf_heads", int, 4),
    "dmcaf.points": ("dmcaf_points", int, 4),
    "dmcaf.stride": ("dmcaf_stride", int, 2),
    "optim.lr": ("lr", float, 1e-4),
    "optim.betas": ("betas", _betas, (0.9, 0.999)),
    "optim.eps": ("eps", float, 1e-8),
    "train.epochs": ("epochs", int, 1),
    "train.steps": ("steps", int, 0),
    "train.batch": ("batch", int, 4),
    "train.seed": ("seed", int, 0),
    "train.checkpoint": ("checkpoint", str, "checkpoint.hqfc"),
    "data.root": ("data_root", str, ""),
    "data.crop": ("crop", int, 0),
    "data.resize": ("resize", int, 0),
    "report.path": ("report_path", str, ""),
}


@dataclass
class RunConfig:
    fusion: str = "dmcaf"
    qskip: bool = True
    qmoe: bool = True
    width: float = 1.0
    n_classes: int = 5
    input_size: int = 224
    n_qubits: int = 16
    provider_mode: str = "synthetic"
    provider_seed: int = 0
    provider_manifest: str = ""
    provider_channels: int = 64
    provider_patch: int = 2
    dmcaf_dim: int = 64
    dmcaf_heads: int = 4
    dmcaf_points: int = 4
    dmcaf_stride: int = 2
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 1
    steps: int = 0
    batch: int = 4
    seed: int = 0
    checkpoint: str = "checkpoint.hqfc"
    data_root: str = ""
    crop: int = 0
    resize: int = 0
    report_path: str = ""

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"optim.lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"train.batch must be >= 1, got {self.batch}")
        if self.epochs < 0 or self.steps < 0:
            raise ConfigError("train.epochs and train.steps must be non-negative")
        if self.provider_mode not in ("synthetic", "file"):
            raise ConfigError(f"provider.mode must be synthetic or file, got {self.provider_mode!r}")
        if self.provider_mode == "file" and not self.provider_manifest:
            raise ConfigError("provider.mode=file requires provider.manifest")
        if self.crop and self.resize:
            raise ConfigError("set at most one of data.crop and data.resize")

    def net_config(self) -> NetConfig:
        try:
            return NetConfig(
                input_size=self.input_size,
                n_classes=self.n_classes,
                width=self.width,
                fusion=self.fusion,
                qskip=self.qskip,
                qmoe=self.qmoe,
                n_qubits=self.n_qubits,
                provider_channels=self.provider_channels,
                provider_patch=self.provider_patch,
                dmcaf=DmcafConfig(
                    dim=self.dmcaf_dim,
                    heads=self.dmcaf_heads,
                    points=self.dmcaf_points,
                    stride=self.dmcaf_stride,
                ),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def with_variant(self, fusion: str, qskip: bool, qmoe: bool) -> "RunConfig":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(fusion=fusion, qskip=qskip, qmoe=qmoe)
        return RunConfig(**kw)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    return config_from_dict(raw, source=str(path))


def config_from_dict(raw: dict, source: str = "config") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    kwargs = {}
    for key, value in raw.items():
        attr, conv, _default = SCHEMA[key]
        try:
            kwargs[attr] = conv(value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{source}: bad value for {key}: {e}")
    return RunConfig(**kwargs)
