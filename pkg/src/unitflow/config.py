"""Typed run configuration loaded from INI-style .cfg files.

Precedence: command-line flags > config file > built-in defaults. Unknown
sections or keys are rejected so typos fail loudly instead of silently
running defaults.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass

from .benchkit import DegradeConfig
from .cfm import MaskSpec, PathConfig
from .errors import InvalidInput
from .sampler import SwayConfig
from .trainer import TrainConfig
from .vfnet import ModelConfig

# section -> key -> (type, default)
_SCHEMA = {
    "run": {
        "seed": (int, 0),
        "k": (int, 12),
        "kmeans_n_init": (int, 4),
        "ref_frames": (int, 0),
    },
    "model": {
        "layers": (int, 4),
        "heads": (int, 4),
        "dim": (int, 128),
        "unit_emb_dim": (int, 128),
        "max_frames": (int, 256),
    },
    "mask": {
        "min_frac": (float, 0.9),
        "max_frac": (float, 1.0),
    },
    "path": {
        "sigma_min": (float, 1e-5),
    },
    "pretrain": {
        "total_updates": (int, 2000),
        "warmup_steps": (int, 200),
        "peak_lr": (float, 3e-3),
        "batch_frames": (int, 2048),
        "checkpoint_every": (int, 500),
        "log_every": (int, 1),
    },
    "finetune": {
        "total_updates": (int, 2000),
        "warmup_steps": (int, 100),
        "peak_lr": (float, 1e-3),
        "batch_frames": (int, 2048),
        "checkpoint_every": (int, 500),
        "log_every": (int, 1),
    },
    "sway": {
        "n_steps": (int, 32),
        "s": (float, -1.0),
        "method": (str, "euler"),
    },
    "degrade": {
        "severity": (float, 0.5),
        "stretch_lo": (float, 1.0),
        "stretch_hi": (float, 1.4),
        "repeat_prob": (float, 0.3),
        "jitter_std": (float, 2.0),
        "jitter_block": (int, 6),
        "segment_len": (int, 8),
    },
    "corpus": {
        "n_train": (int, 200),
        "n_test": (int, 20),
        "script_min": (int, 6),
        "script_max": (int, 10),
    },
}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def get(self, section: str, key: str):
        return self.values[section][key]

    def model_config(self) -> ModelConfig:
        m = self.values["model"]
        return ModelConfig(
            layers=m["layers"],
            heads=m["heads"],
            dim=m["dim"],
            unit_vocab=self.get("run", "k") + 2,
            unit_emb_dim=m["unit_emb_dim"],
            max_frames=m["max_frames"],
        )

    def mask_spec(self) -> MaskSpec:
        return MaskSpec(**self.values["mask"])

    def path_config(self) -> PathConfig:
        return PathConfig(**self.values["path"])

    def sway_config(self) -> SwayConfig:
        return SwayConfig(**self.values["sway"])

    def degrade_config(self, seed: int = 0) -> DegradeConfig:
        return DegradeConfig(seed=seed, **self.values["degrade"])

    def train_config(
        self,
        stage: str,
        ablation_mode: str = "units",
        allow_scratch_finetune: bool = False,
    ) -> TrainConfig:
        sec = self.values[stage]
        return TrainConfig(
            stage=stage,
            total_updates=sec["total_updates"],
            warmup_steps=sec["warmup_steps"],
            peak_lr=sec["peak_lr"],
            batch_frames=sec["batch_frames"],
            checkpoint_every=sec["checkpoint_every"],
            log_every=sec["log_every"],
            seed=self.get("run", "seed"),
            ablation_mode=ablation_mode,
            allow_scratch_finetune=allow_scratch_finetune,
            mask=self.mask_spec(),
            path=self.path_config(),
        )

    def config_hash(self) -> str:
        text = "\n".join(
            f"{s}.{k}={self.values[s][k]}"
            for s in sorted(self.values)
            for k in sorted(self.values[s])
        )
        return hashlib.sha256(text.encode()).hexdigest()[:8]


def _parse(section: str, key: str, raw, caster):
    try:
        if caster is int:
            # Reject silent float truncation.
            as_float = float(raw)
            as_int = int(as_float)
            if as_float != as_int:
                raise ValueError("not an integer")
            return as_int
        return caster(raw)
    except (TypeError, ValueError) as e:
        raise InvalidInput(f"[{section}] {key}: cannot parse {raw!r} as {caster.__name__}") from e


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional file, and overrides.

    `overrides` maps (section, key) to a raw value and wins over the file.
    Unknown sections or keys anywhere raise InvalidInput.
    """
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in _SCHEMA.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(str(path))
        if not read:
            raise InvalidInput(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in _SCHEMA:
                raise InvalidInput(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise InvalidInput(f"unknown config key [{section}] {key}")
                caster = _SCHEMA[section][key][0]
                values[section][key] = _parse(section, key, raw, caster)
    for (section, key), raw in (overrides or {}).items():
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise InvalidInput(f"unknown config override [{section}] {key}")
        caster = _SCHEMA[section][key][0]
        values[section][key] = _parse(section, key, raw, caster)
    return RunConfig(values)
