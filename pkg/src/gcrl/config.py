"""Run configuration: every hyperparameter of a training run, preset builders
for the model variants and ablations, and a flat `key = value` text format so
emitted configs enumerate everything explicitly."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .autodiff import StructuralError

SCENARIOS = ("battle", "jungle", "routing")
VARIANTS = ("dgn", "dgn-r", "dgn-m", "dqn")
PRESET_NAMES = ("dgn", "dgn-r", "dgn-m", "dqn", "layers-1", "layers-2",
                "nbrs-1", "nbrs-2", "nbrs-3", "nbrs-4", "unfixed-graph")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scenario: str = "battle"
    variant: str = "dgn"
    seed: int = 1
    episodes: int = 500
    episode_length: int = 300
    eval_games: int = 30
    n_agents: int = 10
    n_enemies: int = 6
    n_foods: int = 6
    n_routers: int = 20
    encoder_units: tuple = (512, 128)
    feature_dim: int = 128
    conv_layers: int = 2
    attention_heads: int = 8
    head_dim: int = 16
    tau: float = 0.25
    kernel: str = "attention"
    reg_layer: int = 2
    init_std: float = 0.05
    neighbor_limit: int = 3
    gamma: float = 0.96
    batch_size: int = 10
    learning_rate: float = 1e-4
    target_blend: float = 0.01
    reg_weight: float = 0.03
    epsilon_start: float = 0.6
    epsilon_decay: float = 0.996
    epsilon_floor: float = 0.01
    buffer_capacity: int = 200_000
    warmup_transitions: int = 200
    stop_gradient_target: bool = True
    recompute_next_graph: bool = False
    checkpoint_every: int = 500

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant == "dqn" and self.conv_layers != 0:
            raise ConfigError("dqn runs with zero convolutional layers")
        if self.variant in ("dgn-r", "dgn-m") and self.reg_weight != 0.0:
            raise ConfigError(f"{self.variant} requires reg_weight = 0")
        if self.variant == "dgn-m" and self.kernel != "mean":
            raise ConfigError("dgn-m requires the mean kernel")
        if self.variant in ("dgn", "dgn-r") and self.kernel != "attention":
            raise ConfigError(f"{self.variant} requires the attention kernel")
        if self.variant != "dqn" and self.conv_layers < 1:
            raise ConfigError(f"{self.variant} requires at least one conv layer")
        return self


_SCALES = {
    # scenario -> scale -> overrides
    "battle": {
        "desk": dict(n_agents=10, n_enemies=6, episodes=500, episode_length=300,
                     eval_games=30, gamma=0.96),
        "paper": dict(n_agents=20, n_enemies=12, episodes=2000, episode_length=300,
                      eval_games=30, gamma=0.96),
    },
    "jungle": {
        "desk": dict(n_agents=10, n_foods=6, episodes=500, episode_length=120,
                     eval_games=30, gamma=0.96),
        "paper": dict(n_agents=20, n_foods=12, episodes=2000, episode_length=120,
                      eval_games=30, gamma=0.96),
    },
    "routing": {
        # the paper-scale routing setting is already desk-feasible
        "desk": dict(n_agents=20, n_routers=20, episodes=2000, episode_length=300,
                     eval_games=10, gamma=0.98),
        "paper": dict(n_agents=20, n_routers=20, episodes=2000, episode_length=300,
                      eval_games=10, gamma=0.98),
    },
}

_VARIANT_OVERRIDES = {
    "dgn": dict(variant="dgn"),
    "dgn-r": dict(variant="dgn-r", reg_weight=0.0),
    "dgn-m": dict(variant="dgn-m", reg_weight=0.0, kernel="mean"),
    "dqn": dict(variant="dqn", reg_weight=0.0, conv_layers=0),
    "layers-1": dict(variant="dgn", conv_layers=1, reg_layer=1),
    "layers-2": dict(variant="dgn", conv_layers=2, reg_layer=2),
    "nbrs-1": dict(variant="dgn", neighbor_limit=1),
    "nbrs-2": dict(variant="dgn", neighbor_limit=2),
    "nbrs-3": dict(variant="dgn", neighbor_limit=3),
    "nbrs-4": dict(variant="dgn", neighbor_limit=4),
    "unfixed-graph": dict(variant="dgn-r", reg_weight=0.0, recompute_next_graph=True),
}


def ablation_presets(name: str, scenario: str = "battle", scale: str = "desk",
                     seed: int = 1) -> RunConfig:
    """Fully populated RunConfig for one of the named presets."""
    if name not in _VARIANT_OVERRIDES:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    if scenario not in _SCALES or scale not in _SCALES[scenario]:
        raise ConfigError(f"unknown scenario/scale {scenario!r}/{scale!r}")
    cfg = RunConfig(scenario=scenario, seed=seed)
    for k, v in _SCALES[scenario][scale].items():
        setattr(cfg, k, v)
    for k, v in _VARIANT_OVERRIDES[name].items():
        setattr(cfg, k, v)
    return cfg.validate()


# --- flat text format ------------------------------------------------------

def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, ftype):
    text = text.strip()
    if ftype is bool:
        if text not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text == "true"
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    if ftype is tuple:
        return tuple(int(v) for v in text.split(","))
    return text


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> RunConfig:
    defaults = RunConfig()
    concrete = {f.name: type(getattr(defaults, f.name))
                for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in concrete:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(raw, concrete[key])
    missing = set(concrete) - set(values)
    if missing:
        raise ConfigError(f"config missing keys: {sorted(missing)}")
    return RunConfig(**values).validate()


def save_config(path, cfg: RunConfig):
    with open(path, "w", encoding="utf-8") as f:
        f.write(config_to_text(cfg))


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_from_text(f.read())
