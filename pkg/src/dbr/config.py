"""Run configuration: hyperparameters plus ablation switches."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

FUSION_KINDS = ("brf", "add", "multiply")
ACC2_MODES = ("neg-vs-nonneg-excl-zero", "neg-vs-pos-only")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class RunConfig:
    d: int = 16
    modality_dims: dict[str, int] = field(default_factory=dict)
    k: int = 4
    n_heads: int = 2
    tcn_layers: int = 2
    tcn_kernel: int = 3
    alpha1: float = 0.1
    alpha2: float = 0.1
    beta1: float = 0.1
    beta2: float = 0.1
    gamma: float = 1.0
    lam: float = 0.5
    delta: float = 0.2
    md_weight: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 6
    seed: int = 0
    task: str = "regression"
    n_classes: int = 2
    use_tsf: bool = True
    use_agpr: bool = True
    use_brf: bool = True
    use_md_loss: bool = True
    use_tsf_loss: bool = True
    use_agpr_loss: bool = True
    fusion_kind: str = "brf"
    brf_include_shared_token: bool = False
    brf_per_modality_wf: bool = False
    detach_routing: bool = False
    early_stop_on: str = "total"
    n_folds: int = 5
    val_fold: int = 0
    acc2_mode: str = ACC2_MODES[0]
    f1_average: str = "weighted"

    def validate(self) -> "RunConfig":
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigError(f.name, f"must be finite, got {v}")
        for name in ("alpha1", "alpha2", "beta1", "beta2", "lam", "delta", "md_weight", "weight_decay", "lr"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be non-negative")
        if self.gamma <= 0:
            raise ConfigError("gamma", "must be positive")
        for name in ("d", "k", "n_heads", "batch_size", "max_epochs", "patience", "tcn_layers", "tcn_kernel"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be at least 1")
        if self.d % self.n_heads:
            raise ConfigError("n_heads", f"must divide d={self.d}")
        if self.task not in ("regression", "classification"):
            raise ConfigError("task", "must be 'regression' or 'classification'")
        if self.task == "classification" and self.n_classes < 2:
            raise ConfigError("n_classes", "must be at least 2")
        if self.fusion_kind not in FUSION_KINDS:
            raise ConfigError("fusion_kind", f"must be one of {FUSION_KINDS}")
        if self.early_stop_on not in ("total", "task"):
            raise ConfigError("early_stop_on", "must be 'total' or 'task'")
        if self.acc2_mode not in ACC2_MODES:
            raise ConfigError("acc2_mode", f"must be one of {ACC2_MODES}")
        if self.f1_average not in ("weighted", "macro"):
            raise ConfigError("f1_average", "must be 'weighted' or 'macro'")
        if self.n_folds < 2 or not 0 <= self.val_fold < self.n_folds:
            raise ConfigError("val_fold", "must index one of n_folds >= 2 folds")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        flat = _flatten(raw)
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in flat.items():
            name = key.replace(".", "_")
            if name not in known:
                raise ConfigError(key, "unknown config field")
            kwargs[name] = _coerce(name, known[name], value)
        return cls(**kwargs)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _flatten(raw: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in raw.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and key != "modality_dims":
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(name: str, f: dataclasses.Field, value: Any) -> Any:
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, dict):
            return {str(k): int(v) for k, v in dict(value).items()}
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(name, f"cannot interpret {value!r}") from None


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be an object")
    return RunConfig.from_dict(raw)
