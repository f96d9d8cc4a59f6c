"""Configuration dataclasses and the canonical key-value config format.

A config file is plain UTF-8 text, one ``section.key = value`` per line,
``#`` comments and blank lines allowed. Sections are ``model``, ``router``,
``train`` and ``sim``; keys are the dataclass field names. Values are
rendered with ``repr``-stable formatting so serialize -> parse round-trips
exactly. Unknown keys or malformed values raise ConfigError (the CLI maps
that to exit code 2).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Optional

SHARINGS = ("none", "cycle", "sequence", "middle_cycle", "middle_sequence")
KV_MODES = ("recursion_wise", "recursive_sharing", "hybrid")
FAMILIES = ("none", "expert_choice", "token_choice")
HEADS = ("linear", "mlp", "wide_mlp")
EXPERT_SCHEMES = ("aux_loss", "aux_router")
TOKEN_SCHEMES = ("balance_loss", "loss_free")


class ConfigError(ValueError):
    """Raised for schema violations: unknown keys, bad values, bad combos."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 258
    d_model: int = 64
    n_layers: int = 8          # unrolled depth, counting every application
    n_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 16
    d_inter: int = 176
    sharing: str = "middle_cycle"
    n_recursions: int = 2
    ctx_len: int = 128
    kv_mode: str = "recursion_wise"
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        if self.sharing not in SHARINGS:
            raise ConfigError(f"model.sharing must be one of {SHARINGS}")
        if self.kv_mode not in KV_MODES:
            raise ConfigError(f"model.kv_mode must be one of {KV_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("model.dtype must be float32 or float64")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "n_kv_heads",
                     "d_head", "d_inter", "n_recursions", "ctx_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError("model.n_heads must be a multiple of model.n_kv_heads")
        if self.d_head % 2:
            raise ConfigError("model.d_head must be even (rotary pairs)")
        nr, L = self.n_recursions, self.n_layers
        if self.sharing == "none":
            if nr != 1:
                raise ConfigError("sharing=none requires n_recursions=1")
        elif self.sharing in ("cycle", "sequence"):
            if L % nr:
                raise ConfigError(f"n_layers={L} not divisible by n_recursions={nr}")
        else:  # middle_* keep a unique first and last layer
            if L < nr + 2:
                raise ConfigError(f"n_layers={L} too small for middle sharing with n_recursions={nr}")
            if (L - 2) % nr:
                raise ConfigError(f"n_layers-2={L - 2} not divisible by n_recursions={nr}")
        return self


@dataclass(frozen=True)
class RouterConfig:
    family: str = "expert_choice"
    activation: str = "sigmoid"
    head: str = "linear"
    alpha: float = 0.1          # gate scale applied to the activation output
    scheme: str = "aux_loss"
    aux_coeff: float = 0.001
    balance_coeff: float = 0.1
    z_coeff: float = 0.0
    bias_update_rate: float = 0.001
    threshold: float = 0.5      # inference-time continue/exit cut for expert choice
    capacities: Optional[tuple] = None  # None -> linear schedule (n-j+1)/n

    def validate(self, n_recursions: int) -> "RouterConfig":
        if self.family not in FAMILIES:
            raise ConfigError(f"router.family must be one of {FAMILIES}")
        if self.family == "none":
            return self
        if self.head not in HEADS:
            raise ConfigError(f"router.head must be one of {HEADS}")
        if self.family == "expert_choice":
            if self.activation not in ("sigmoid", "tanh"):
                raise ConfigError("expert_choice activation must be sigmoid or tanh")
            if self.scheme not in EXPERT_SCHEMES:
                raise ConfigError(f"expert_choice scheme must be one of {EXPERT_SCHEMES}")
        else:
            if self.activation not in ("softmax", "sigmoid"):
                raise ConfigError("token_choice activation must be softmax or sigmoid")
            if self.scheme not in TOKEN_SCHEMES:
                raise ConfigError(f"token_choice scheme must be one of {TOKEN_SCHEMES}")
        if self.capacities is not None:
            caps = tuple(float(c) for c in self.capacities)
            if len(caps) != n_recursions:
                raise ConfigError("router.capacities length must equal n_recursions")
            if any(not 0.0 < c <= 1.0 for c in caps):
                raise ConfigError("router.capacities entries must lie in (0, 1]")
        return self


@dataclass(frozen=True)
class TrainConfig:
    corpus: str = ""
    seq_len: int = 128
    batch_size: int = 8
    steps: int = 600
    lr_max: float = 3e-3
    lr_schedule: str = "trapezoid"
    warmup_steps: int = 30
    cooldown_steps: int = 120
    min_lr: float = 0.0
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 25
    eval_every: int = 200
    eval_windows: int = 16
    dead_token_per_sequence: bool = False

    def validate(self) -> "TrainConfig":
        if self.lr_schedule not in ("trapezoid", "cosine"):
            raise ConfigError("train.lr_schedule must be trapezoid or cosine")
        for name in ("seq_len", "batch_size", "steps", "log_every", "eval_every", "eval_windows"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be positive")
        if self.warmup_steps < 0 or self.cooldown_steps < 0:
            raise ConfigError("train warmup/cooldown steps must be >= 0")
        if self.warmup_steps + self.cooldown_steps > self.steps:
            raise ConfigError("warmup + cooldown exceed total steps")
        if self.lr_max <= 0:
            raise ConfigError("train.lr_max must be positive")
        return self


_SECTIONS = {"model": ModelConfig, "router": RouterConfig, "train": TrainConfig}


def _parse_value(raw: str, ftype, key: str):
    raw = raw.strip()
    try:
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        if ftype is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if ftype is str:
            return raw
        # Optional[tuple] (capacities): comma-separated floats or "none"
        if raw.lower() in ("none", ""):
            return None
        return tuple(float(p) for p in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str) -> dict:
    """Parses canonical key-value text into {'section.key': raw_string}."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key.count(".") != 1:
            raise ConfigError(f"line {lineno}: key {key!r} must be 'section.key'")
        out[key] = value.strip()
    return out


def build_configs(pairs: dict):
    """Builds (ModelConfig, RouterConfig, TrainConfig, sim_overrides) from
    dotted key-value pairs. ``sim.*`` keys pass through untyped for the
    simulator; everything else must name a known dataclass field."""
    values: dict = {name: {} for name in _SECTIONS}
    sim: dict = {}
    for key, raw in pairs.items():
        section, _, field_name = key.partition(".")
        if section == "sim":
            sim[field_name] = raw
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r} (key {key!r})")
        cls = _SECTIONS[section]
        matching = {f.name: f for f in fields(cls)}
        if field_name not in matching:
            raise ConfigError(f"unknown config key {key!r}")
        f = matching[field_name]
        ftype = {"int": int, "float": float, "str": str, "bool": bool}.get(
            f.type if isinstance(f.type, str) else getattr(f.type, "__name__", ""), None
        )
        if ftype is None and field_name != "capacities":
            ftype = type(f.default)
        values[section][field_name] = _parse_value(raw, ftype, key)
    model = ModelConfig(**values["model"]).validate()
    router = RouterConfig(**values["router"]).validate(model.n_recursions)
    train = TrainConfig(**values["train"]).validate()
    return model, router, train, sim


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_configs(model: ModelConfig, router: RouterConfig, train: TrainConfig,
                      sim: Optional[dict] = None) -> str:
    """Canonical text form: sections in fixed order, fields in declaration order."""
    lines = []
    for section, obj in (("model", model), ("router", router), ("train", train)):
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    for key in sorted(sim or {}):
        lines.append(f"sim.{key} = {_format_value(sim[key])}")
    return "\n".join(lines) + "\n"


def replace(obj, **changes):
    return dataclasses.replace(obj, **changes)
