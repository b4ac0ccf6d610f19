"""Run configuration: a single TOML file merged over desk-scale defaults,
canonically hashed so trained artifacts can refuse to compose across
configuration changes."""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .synthcorpus import canonical_hash


class ConfigError(Exception):
    pass


DEFAULTS: dict = {
    "run": {
        "root_seed": 7,
        "out_dir": "runs/desk",
    },
    "corpus": {
        "n_classes": 8,
        "n_pretrain_clips": 96,
        "n_benchmark_per_op": 30,
    },
    "mel": {
        "sample_rate_hz": 16000,
        "n_mels": 32,
        "hop": 125,
    },
    "cavmae": {
        "steps": 2000,
        "lr": 3e-4,
        "mix_prob": 0.5,
        "mask_ratio": 0.5,
        "batch_clips": 8,
        "frames_per_clip": 4,
        "decay_start": 1200,
        "decay_every": 400,
        "segmenting": True,
    },
    "gating": {
        "r": "auto",
    },
    "codec": {
        "epochs": 800,
        "lr": 2e-3,
        "batch_size": 16,
        "mse_target": 0.02,
    },
    "editor": {
        "train_steps": 9000,
        "lr": 3e-4,
        "batch_size": 8,
        "n_train_items": 1152,
        "cfg_scale": 2.0,
        "sample_steps": 25,
        "objective": "cfm",
    },
    "eval": {
        "probe_epochs": 150,
        "probe_lr": 2e-3,
    },
}

_TYPES = {bool: (bool,), int: (int,), float: (int, float), str: (str,)}


def _merge(base: dict, override: dict, trail: str = "") -> dict:
    out = {}
    for key, default in base.items():
        here = f"{trail}{key}"
        if key not in override:
            out[key] = default
            continue
        value = override[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"section expected at [{here}]")
            out[key] = _merge(default, value, f"{here}.")
        else:
            # gating.r admits the "auto" sentinel or a number.
            if here == "gating.r":
                if not (value == "auto" or isinstance(value, (int, float))):
                    raise ConfigError(f"gating.r must be a number or 'auto'")
                out[key] = value
                continue
            allowed = _TYPES[type(default)]
            if not isinstance(value, allowed) or (
                isinstance(value, bool) and type(default) is not bool
            ):
                raise ConfigError(
                    f"{here} expects {type(default).__name__}, "
                    f"got {type(value).__name__}"
                )
            out[key] = type(default)(value) if type(default) is float else value
    unknown = set(override) - set(base)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} under [{trail[:-1] or 'root'}]")
    return out


@dataclass(frozen=True)
class RunConfig:
    data: dict
    config_hash: str
    source: str | None

    def __getitem__(self, key: str):
        return self.data[key]

    @property
    def out_dir(self) -> Path:
        return Path(self.data["run"]["out_dir"])

    @property
    def root_seed(self) -> int:
        return self.data["run"]["root_seed"]


def resolve_config(raw: dict, source: str | None = None) -> RunConfig:
    data = _merge(DEFAULTS, raw)
    if data["mel"] != DEFAULTS["mel"]:
        raise ConfigError(
            "mel geometry is fixed at desk scale "
            f"({DEFAULTS['mel']}); adjust your config"
        )
    return RunConfig(data=data, config_hash=canonical_hash(data), source=source)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return resolve_config({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return resolve_config(raw, source=str(path))


def check_hash(artifact_hash: str, cfg: RunConfig, what: str,
               force: bool) -> None:
    """Refuse to compose artifacts across config changes unless forced."""
    if artifact_hash != cfg.config_hash and not force:
        raise ConfigError(
            f"{what} was built under config {artifact_hash[:12]}, current is "
            f"{cfg.config_hash[:12]}; rerun upstream stages or pass --force"
        )
