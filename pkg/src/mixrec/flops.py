"""Forward-pass FLOPs accounting.

Matmul cost is 2 x parameter count per processed token, attention adds
4 * n_heads * d_head per attended key (scores and value mix), and routed
depths are scaled by their token capacity.  The attended-prefix length
depends on the cache mode: recursion-wise caches attend only the selected
set, shared caches attend the full causal prefix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import ConfigError, ModelConfig, RouterConfig
from .model import count_parameters
from .routing import capacity_schedule

__all__ = [
    "FlopsReport",
    "forward_flops_per_token",
    "tokens_for_budget",
    "budget_for_tokens",
]


@dataclass
class FlopsReport:
    """Per-token forward FLOPs, split by source."""

    linear: float
    attention: float
    lm_head: float
    router: float
    per_depth: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return self.linear + self.attention + self.lm_head + self.router

    def to_dict(self) -> dict:
        return {
            "linear": self.linear,
            "attention": self.attention,
            "lm_head": self.lm_head,
            "router": self.router,
            "total": self.total,
            "per_depth": list(self.per_depth),
        }

    def table(self) -> str:
        rows = [
            ("linear", self.linear),
            ("attention", self.attention),
            ("lm_head", self.lm_head),
            ("router", self.router),
            ("total", self.total),
        ]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {v:>18,.0f}" for k, v in rows]
        for entry in self.per_depth:
            lines.append(
                f"  depth {entry['depth']}  cap {entry['capacity']:.4f}  "
                f"linear {entry['linear']:,.0f}  attention {entry['attention']:,.0f}"
            )
        return "\n".join(lines)


def _structure(cfg: ModelConfig):
    """Number of prelude/postlude blocks and interior slots per recursion step."""
    if cfg.sharing == "none":
        return 0, 0, cfg.n_layers, 1
    if cfg.sharing in ("cycle", "sequence"):
        return 0, 0, cfg.n_layers // cfg.n_recursions, cfg.n_recursions
    if cfg.sharing in ("middle_cycle", "middle_sequence"):
        return 1, 1, (cfg.n_layers - 2) // cfg.n_recursions, cfg.n_recursions
    raise ConfigError(f"unknown sharing mode {cfg.sharing!r}")


def _head_flops(d_model: int, head: str, out_dim: int) -> float:
    if head == "linear":
        params = d_model * out_dim
    elif head == "mlp":
        hidden = max(d_model // 4, out_dim)
        params = d_model * hidden + hidden * out_dim
    elif head == "wide_mlp":
        hidden = max(d_model // 2, out_dim)
        params = d_model * hidden + hidden * out_dim
    else:
        raise ConfigError(f"unknown router head {head!r}")
    return 2.0 * params


def forward_flops_per_token(
    cfg: ModelConfig,
    router_cfg: RouterConfig | None = None,
    include_lm_head: bool = True,
) -> FlopsReport:
    """Average forward FLOPs for one token of a full-length sequence."""
    cfg.validate()
    pre, post, slots, n_rec = _structure(cfg)
    routed = (
        router_cfg is not None
        and router_cfg.family != "none"
        and n_rec > 1
    )
    if routed:
        router_cfg.validate(n_rec)
        caps = capacity_schedule(n_rec, router_cfg.capacities)
    else:
        caps = [1.0] * n_rec

    counts = count_parameters(cfg)
    per_block = counts["per_block"]
    d = cfg.d_model
    T = cfg.ctx_len
    attn_unit = 4.0 * cfg.n_heads * cfg.d_head  # per attended key, per token
    full_prefix = (T + 1) / 2.0

    linear = 2.0 * ((pre + post) * per_block + d)  # unique blocks plus final norm
    attention = (pre + post) * attn_unit * full_prefix
    per_depth = []
    for r, cap in enumerate(caps, start=1):
        dl = 2.0 * slots * per_block * cap
        if cfg.kv_mode == "recursion_wise" and r > 1:
            # selected tokens attend only each other
            visible = (cap * T + 1) / 2.0
        else:
            visible = full_prefix
        da = slots * cap * attn_unit * visible
        linear += dl
        attention += da
        per_depth.append({"depth": r, "capacity": cap, "linear": dl, "attention": da})

    router = 0.0
    if routed:
        if router_cfg.family == "expert_choice":
            live = 1.0
            for cap in caps:
                router += live * _head_flops(d, router_cfg.head, 1)
                if router_cfg.scheme == "aux_router":
                    # the auxiliary head scores the same candidate set
                    router += live * _head_flops(d, router_cfg.head, 1)
                live = cap
        else:
            router += _head_flops(d, router_cfg.head, n_rec)

    lm_head = 2.0 * d * cfg.vocab_size if include_lm_head else 0.0
    return FlopsReport(
        linear=linear, attention=attention, lm_head=lm_head,
        router=router, per_depth=per_depth,
    )


def tokens_for_budget(budget_flops: float, per_token_flops: float) -> float:
    """Training tokens affordable under a forward-FLOPs budget."""
    if budget_flops <= 0:
        raise ValueError("budget must be positive")
    if per_token_flops <= 0:
        raise ValueError("per-token FLOPs must be positive")
    return budget_flops / per_token_flops


def budget_for_tokens(tokens: float, per_token_flops: float) -> float:
    """Forward-FLOPs budget consumed by a token count."""
    if tokens <= 0:
        raise ValueError("token count must be positive")
    if per_token_flops <= 0:
        raise ValueError("per-token FLOPs must be positive")
    return tokens * per_token_flops
