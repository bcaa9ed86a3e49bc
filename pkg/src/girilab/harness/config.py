"""Experiment configuration: an INI file with fixed sections and keys.

Every key has a default; unknown sections or keys are errors. A handful of
keys accept ``auto``, which resolves to a value that depends on whether the
environment has discrete or continuous actions. Values are kept as parsed
(``auto`` stays ``"auto"``) so that parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

AUTO = "auto"
NONE = "none"


class ConfigError(ValueError):
    pass


# kinds: int, float, bool, str, ints, floats; a trailing "?" allows "none",
# a leading "~" allows "auto"
_PPO_KEYS = {
    "lr": ("~float", AUTO),
    "clip_eps": ("float", 0.1),
    "entropy_coef": ("~float", AUTO),
    "value_coef": ("float", 0.5),
    "gae_lambda": ("float", 0.95),
    "gamma": ("float", 0.99),
    "horizon": ("int", 128),
    "num_envs": ("int", 16),
    "epochs_per_update": ("int", 4),
    "minibatches": ("int", 4),
    "max_grad_norm": ("float", 0.5),
    "hidden": ("~int", AUTO),
}

SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "run": {"seed": ("int", 0), "output_dir": ("str", "runs")},
    "env": {"id": ("str", "grid_hazard")},
    "grid": {
        "width": ("int", 8),
        "height": ("int", 8),
        "lives": ("int", 3),
        "n_pellets": ("int", 12),
        "n_hazards": ("int", 6),
        "life_steps": ("int", 8),
        "pellet_oxygen": ("int", 2),
        "max_episode_steps": ("int?", NONE),
        "layout_seed": ("int?", 6),
    },
    "pendulum": {
        "max_torque": ("float", 2.0),
        "max_speed": ("float", 8.0),
        "dt": ("float", 0.05),
        "init_angle": ("float", math.pi),
        "max_episode_steps": ("int", 200),
    },
    "expert": {**_PPO_KEYS, "full_scale_steps": ("int", 10_000_000), "step_scale": ("float", 0.02),
               "total_steps": ("~int", AUTO), "eval_interval": ("int", 10), "episodic_life": ("bool", False)},
    "imitation": {**_PPO_KEYS, "full_scale_steps": ("~int", AUTO), "step_scale": ("float", 0.01),
                  "total_steps": ("~int", AUTO), "standardize": ("bool", True),
                  "eval_interval": ("int", 10), "episodic_life": ("bool", True)},
    "demo": {"mode": ("str", "one_life"), "episodes": ("int", 1), "stride": ("~int", AUTO)},
    "method": {"name": ("str", "girl")},
    "girl": {
        "alpha": ("~float", AUTO),
        "lambda": ("float", 1.0),
        "beta": ("float", 1.0),
        "hidden": ("int", 100),
        "epochs": ("int", 50_000),
        "batch_size": ("int", 32),
        "lr": ("float", 3e-5),
        "prior": ("str", "standard_normal"),
    },
    "icm": {
        "lambda": ("float", 1.0),
        "feature_dim": ("int", 32),
        "hidden": ("int", 100),
        "epochs": ("int", 50_000),
        "batch_size": ("int", 32),
        "lr": ("float", 3e-5),
    },
    "gail": {"reward_variant": ("int", 1), "lr": ("float", 1e-3), "hidden": ("int", 100),
             "batch_size": ("int", 256)},
    "vail": {"i_c": ("~float", AUTO), "dual_step": ("float", 1e-5), "bottleneck": ("int", 32),
             "reward_variant": ("int", 1)},
    "bc": {"epochs": ("int", 2000), "lr": ("float", 1e-3), "batch_size": ("int", 32)},
    "eval": {"episodes": ("int", 10), "seeds": ("ints", (0,))},
    "ablation": {"betas": ("floats", (1.0, 0.999, 0.99, 0.95, 0.9)), "seeds": ("ints", (0, 1))},
}

METHODS = ("girl", "cdil", "gail", "vail", "bc")
ENV_IDS = ("grid_hazard", "pendulum")


def _parse_value(kind: str, raw: str, where: str):
    text = raw.strip()
    if kind.startswith("~"):
        if text.lower() == AUTO:
            return AUTO
        kind = kind[1:]
    if kind.endswith("?"):
        if text.lower() == NONE:
            return NONE
        kind = kind[:-1]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind == "str":
            return text
        if kind == "ints":
            return tuple(int(t) for t in text.split(",") if t.strip())
        if kind == "floats":
            return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind}") from None
    raise ConfigError(f"{where}: unknown kind {kind}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=lambda: {
        sec: {k: default for k, (_, default) in keys.items()} for sec, keys in SCHEMA.items()
    })

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentConfig) and self.values == other.values

    def copy(self) -> "ExperimentConfig":
        return ExperimentConfig({s: dict(v) for s, v in self.values.items()})

    def set(self, section: str, key: str, raw) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        kind = SCHEMA[section][key][0]
        value = _parse_value(kind, raw, f"[{section}] {key}") if isinstance(raw, str) else raw
        self.values[section][key] = value

    # ---- derived values

    @property
    def discrete(self) -> bool:
        return self["env"]["id"] == "grid_hazard"

    def ppo_settings(self, stage: str) -> dict[str, Any]:
        """PPO keys of ``expert`` or ``imitation`` with ``auto`` resolved."""
        sec = dict(self[stage])
        d = self.discrete
        if sec["lr"] == AUTO:
            sec["lr"] = 2.5e-4 if d else 3e-4
        if sec["entropy_coef"] == AUTO:
            sec["entropy_coef"] = 0.01 if d else 0.0
        if sec["hidden"] == AUTO:
            sec["hidden"] = 64 if d else 100
        return {k: sec[k] for k in _PPO_KEYS}

    def total_steps(self, stage: str) -> int:
        sec = self[stage]
        if sec["total_steps"] != AUTO:
            return int(sec["total_steps"])
        full = sec["full_scale_steps"]
        if full == AUTO:
            full = 50_000_000 if self.discrete else 10_000_000
        return int(round(full * sec["step_scale"]))

    def stride(self) -> int:
        s = self["demo"]["stride"]
        return (4 if self.discrete else 20) if s == AUTO else int(s)

    def girl_alpha(self) -> float:
        a = self["girl"]["alpha"]
        return (100.0 if self.discrete else 1.0) if a == AUTO else float(a)

    def vail_i_c(self) -> float:
        v = self["vail"]["i_c"]
        return (0.2 if self.discrete else 0.5) if v == AUTO else float(v)

    def validate(self) -> "ExperimentConfig":
        if self["env"]["id"] not in ENV_IDS:
            raise ConfigError(f"[env] id must be one of {ENV_IDS}")
        if self["method"]["name"] not in METHODS:
            raise ConfigError(f"[method] name must be one of {METHODS}")
        if self["demo"]["mode"] not in ("one_life", "full_episode"):
            raise ConfigError("[demo] mode must be one_life or full_episode")
        if self["gail"]["reward_variant"] not in (1, 2) or self["vail"]["reward_variant"] not in (1, 2):
            raise ConfigError("reward_variant must be 1 or 2")
        if not 0.0 < self["girl"]["beta"] <= 1.0:
            raise ConfigError("[girl] beta must lie in (0, 1]")
        if any(not 0.0 < b <= 1.0 for b in self["ablation"]["betas"]):
            raise ConfigError("[ablation] betas must lie in (0, 1]")
        if self["girl"]["prior"] not in ("standard_normal", "learned"):
            raise ConfigError("[girl] prior must be standard_normal or learned")
        if self["eval"]["episodes"] < 1 or not self["eval"]["seeds"]:
            raise ConfigError("[eval] needs at least one episode and one seed")
        for stage in ("expert", "imitation"):
            if self.total_steps(stage) < 0:
                raise ConfigError(f"[{stage}] total_steps must be >= 0")
        return self


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            cfg.set(section, key, raw)
    return cfg.validate()


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    return parse_config(Path(path).read_text())


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {_format_value(cfg[section][key])}" for key in keys)
        lines.append("")
    return "\n".join(lines)
