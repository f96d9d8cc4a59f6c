"""Named configurations: the four reference model sizes, their recursive
and routed variants, and byte-level toy presets that train in minutes on a
CPU.

Presets are flat ``section.key -> value`` string dicts, the same shape the
config-file parser produces, so command-line overrides layer on top
uniformly. Interior depth must divide by the recursion count under
middle-cycle sharing; variants that need it add two layers, and their fair
throughput baseline adds the same two.
"""

from __future__ import annotations

from .config import ConfigError, build_configs

_SIZES = {
    # name: (layers, d_model, heads, kv_heads, d_head, d_inter)
    "135m": (30, 576, 9, 3, 64, 1536),
    "360m": (32, 960, 15, 5, 64, 2560),
    "730m": (26, 1536, 24, 8, 64, 4096),
    "1p7b": (24, 2048, 32, 32, 64, 8192),
}


def _base(size: str, n_layers=None) -> dict:
    L, d, h, kv, dh, inter = _SIZES[size]
    return {
        "model.vocab_size": "49152",
        "model.n_layers": str(n_layers if n_layers is not None else L),
        "model.d_model": str(d),
        "model.n_heads": str(h),
        "model.n_kv_heads": str(kv),
        "model.d_head": str(dh),
        "model.d_inter": str(inter),
        "model.ctx_len": "2048",
    }


def _layers_for(size: str, nr: int) -> int:
    """Smallest layer count >= the base whose interior divides by nr."""
    L = _SIZES[size][0]
    while (L - 2) % nr:
        L += 2
    return L


def _vanilla(size: str, n_layers=None) -> dict:
    p = _base(size, n_layers)
    p.update({
        "model.sharing": "none",
        "model.n_recursions": "1",
        "router.family": "none",
    })
    return p


def _recursive(size: str, nr: int) -> dict:
    p = _base(size, _layers_for(size, nr))
    p.update({
        "model.sharing": "middle_cycle",
        "model.n_recursions": str(nr),
        "router.family": "none",
    })
    return p


def _mor(size: str, nr: int) -> dict:
    p = _recursive(size, nr)
    p.update({
        "model.kv_mode": "recursion_wise",
        "router.family": "expert_choice",
        "router.scheme": "aux_loss",
    })
    return p


def _toy(family: str, nr: int) -> dict:
    p = {
        "model.vocab_size": "258",
        "model.d_model": "64",
        "model.n_layers": str(nr + 2),
        "model.n_heads": "4",
        "model.n_kv_heads": "2",
        "model.d_head": "16",
        "model.d_inter": "176",
        "model.ctx_len": "128",
        "model.sharing": "middle_cycle",
        "model.n_recursions": str(nr),
        "model.kv_mode": "recursion_wise",
        "model.dtype": "float32",
        "router.family": family,
        "train.seq_len": "128",
        "train.batch_size": "8",
        "train.steps": "600",
        "train.lr_max": "0.003",
        "train.warmup_steps": "30",
        "train.cooldown_steps": "120",
        "train.log_every": "25",
        "train.eval_every": "200",
        "train.eval_windows": "16",
    }
    if family == "expert_choice":
        p["router.scheme"] = "aux_loss"
        p["router.aux_coeff"] = "0.05"  # toy runs are short; stronger pull
    else:
        p["router.scheme"] = "balance_loss"
        p["router.activation"] = "softmax"
    return p


def _build_presets() -> dict:
    presets = {}
    for size in _SIZES:
        presets[f"vanilla-{size}"] = _vanilla(size)
        for nr in (2, 3, 4):
            presets[f"recursive-{size}-nr{nr}"] = _recursive(size, nr)
            presets[f"mor-{size}-nr{nr}"] = _mor(size, nr)
    # the depth-matched comparison baseline for mor-360m-nr4 (34 layers)
    presets["vanilla-360m-34l"] = _vanilla("360m", n_layers=34)
    for nr in (2, 3):
        presets[f"toy-expert-nr{nr}"] = _toy("expert_choice", nr)
        presets[f"toy-token-nr{nr}"] = _toy("token_choice", nr)
    return presets


PRESETS = _build_presets()


def preset_names() -> list:
    return sorted(PRESETS)


def preset_pairs(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}"
        )
    return dict(PRESETS[name])


def load_preset(name: str):
    """(ModelConfig, RouterConfig, TrainConfig, sim dict) for a preset name."""
    return build_configs(preset_pairs(name))
