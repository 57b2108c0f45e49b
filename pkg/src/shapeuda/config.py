"""Declarative run configuration.

One sectioned TOML file configures every stage; keys use the conventional
symbol names (tau_p, alpha, rho_0, q, gamma_max, ema_momentum, ...).
Unknown sections or keys are rejected.  A single root seed feeds every
random stream; CLI flags override file values.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .modulation import HfmConfig
from .plausibility import GateConfig
from .pruning import SapConfig
from .synthdata import SynthConfig
from .training import AdaptSettings, TrainConfig


class ConfigError(Exception):
    """Malformed or unknown configuration input."""


# section -> (dataclass, file-key -> field-name map for renamed keys)
_KEY_MAPS = {
    "hfm": (HfmConfig, {"tau_p": "purity_threshold"}),
    "gate": (GateConfig, {}),
    "sap": (SapConfig, {}),
    "train": (TrainConfig, {}),
    "synth": (SynthConfig, {}),
}


@dataclass
class RunConfig:
    seed: int = 7
    hfm: HfmConfig = field(default_factory=HfmConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    sap: SapConfig = field(default_factory=SapConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: str | None = None
    out: str | None = None

    def settings(self) -> AdaptSettings:
        return AdaptSettings(
            hfm=self.hfm, gate=self.gate, sap=self.sap, train=self.train, seed=self.seed
        )


def _build_section(name: str, values: dict):
    cls, renames = _KEY_MAPS[name]
    allowed = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        attr = renames.get(key, key)
        if attr not in allowed:
            raise ConfigError(f"unknown key [{name}] {key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[attr] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [{name}] section: {exc}") from exc


def load_run_config(path=None, seed: int | None = None) -> RunConfig:
    """Parse a TOML run config; ``seed`` (e.g. from --seed) wins over the file.

    The root seed propagates into the synth section unless that section pins
    its own.
    """
    raw = {}
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    cfg = RunConfig()
    synth_has_seed = False
    for name, values in raw.items():
        if name == "seed":
            cfg.seed = int(values)
        elif name == "paths":
            for key, value in values.items():
                if key not in ("data", "out"):
                    raise ConfigError(f"unknown key [paths] {key}")
                setattr(cfg, key, str(value))
        elif name in _KEY_MAPS:
            if not isinstance(values, dict):
                raise ConfigError(f"[{name}] must be a section")
            if name == "synth" and "seed" in values:
                synth_has_seed = True
            setattr(cfg, name, _build_section(name, values))
        else:
            raise ConfigError(f"unknown section [{name}]")

    if seed is not None:
        cfg.seed = int(seed)
        synth_has_seed = False
    if not synth_has_seed:
        cfg.synth.seed = cfg.seed
    return cfg
