"""Decode-time KV cache and the cache cost model.

Store keys name the layer application they belong to: ``pre{j}`` and
``post{j}`` for the unique first/last layers, ``int{j}d{r}`` for interior
slot j at recursion depth r. Which keys receive writes is the caller's
contract (the model follows its kv_mode); the cache itself only does
bookkeeping, which is exactly what the cost model measures.

Cost ratios are relative to an unshared baseline with the same unrolled
depth and full attention:
  memory     entries held (shared placeholder rows own no storage)
  io         entries streamed per decode step across all depths
  attention  causal (query, key) score pairs
"""

from __future__ import annotations

import json
from fractions import Fraction
from typing import Optional

import numpy as np

from .config import ModelConfig
from .routing import capacity_schedule


class _Store:
    __slots__ = ("ks", "vs", "pos", "shared_flags")

    def __init__(self):
        self.ks: list = []
        self.vs: list = []
        self.pos: list = []
        self.shared_flags: list = []


class KvCache:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.mode = cfg.kv_mode
        self.kv_dim = cfg.n_kv_heads * cfg.d_head
        self.itemsize = 4 if cfg.dtype == "float32" else 8
        self._stores: dict = {}
        self.appends = 0

    def _store(self, key: str) -> _Store:
        if key not in self._stores:
            self._stores[key] = _Store()
        return self._stores[key]

    def append(self, key: str, pos: int, k_row, v_row, shared: bool = False) -> None:
        """Adds one position's K/V rows. ``shared`` marks a reference to a
        row owned by another store (hybrid placeholders): it is visible to
        attention and IO but owns no memory."""
        st = self._store(key)
        st.ks.append(np.asarray(k_row))
        st.vs.append(np.asarray(v_row))
        st.pos.append(int(pos))
        st.shared_flags.append(bool(shared))
        self.appends += 1

    def view(self, key: str):
        """(K [n, kv_dim], V [n, kv_dim], positions [n]) in append order."""
        st = self._stores.get(key)
        if st is None or not st.ks:
            empty = np.zeros((0, self.kv_dim), dtype=np.float32)
            return empty, empty, np.zeros(0, dtype=np.int64)
        return np.stack(st.ks), np.stack(st.vs), np.asarray(st.pos, dtype=np.int64)

    def last_pos(self, key: str) -> int:
        st = self._stores.get(key)
        if st is None or not st.pos:
            raise KeyError(f"cache store {key!r} is empty")
        return st.pos[-1]

    def entries(self) -> dict:
        return {key: len(st.pos) for key, st in sorted(self._stores.items())}

    def owned_entries(self) -> dict:
        return {
            key: sum(1 for s in st.shared_flags if not s)
            for key, st in sorted(self._stores.items())
        }

    def stats_json(self) -> str:
        entries = self.entries()
        owned = self.owned_entries()
        total_owned = sum(owned.values())
        stats = {
            "mode": self.mode,
            "entries": entries,
            "owned_entries": owned,
            "total_entries": sum(entries.values()),
            "total_owned_entries": total_owned,
            "appends": self.appends,
            "bytes": total_owned * 2 * self.kv_dim * self.itemsize,
        }
        return json.dumps(stats, indent=2, sort_keys=True)


# -- closed-form cost ratios -------------------------------------------------


def _fraction_caps(n_recursions: int, capacities) -> list:
    if capacities is None:
        n = n_recursions
        return [Fraction(n - j + 1, n) for j in range(1, n + 1)]
    caps = capacity_schedule(n_recursions, capacities)
    return [Fraction(c).limit_denominator(10**6) for c in caps]


def cache_cost_ratios(n_recursions: int, mode: str, capacities=None) -> dict:
    """Exact rational memory / io / attention ratios for one cache mode."""
    caps = _fraction_caps(n_recursions, capacities)
    n = n_recursions
    if mode == "recursion_wise":
        sel_sum = sum(caps, Fraction(0))
        return {
            "memory": sel_sum / n,
            "io": sel_sum / n,
            "attention": sum((c * c for c in caps), Fraction(0)) / n,
        }
    if mode == "recursive_sharing":
        return {
            "memory": caps[0] / n,
            "io": caps[0],
            "attention": sum((c * caps[0] for c in caps), Fraction(0)) / n,
        }
    if mode == "hybrid":
        return {
            "memory": (caps[0] + sum(caps[1:], Fraction(0))) / n,
            "io": caps[0],
            "attention": sum((c * caps[0] for c in caps), Fraction(0)) / n,
        }
    raise ValueError(f"unknown cache mode {mode!r}")


# -- measured bookkeeping ----------------------------------------------------


def _evenly_spaced(total: int, count: int) -> np.ndarray:
    if count >= total:
        return np.arange(total)
    idx = np.floor((np.arange(count) + 0.5) * total / count).astype(np.int64)
    return np.unique(idx)


def measured_cache_costs(
    n_recursions: int, mode: str, seq_len: int, capacities=None
) -> dict:
    """Fills a real cache with a nested evenly-spread selection and counts.

    Uses floor(capacity * seq_len) tokens per depth, nested across depths
    the way hierarchical selection nests them. Returns measured ratios plus
    the per-depth owned entry counts.
    """
    caps = capacity_schedule(n_recursions, capacities)
    ks = [int(np.floor(c * seq_len)) for c in caps]
    sels = []
    current = np.arange(seq_len)
    for k in ks:
        current = current[_evenly_spaced(current.size, k)]
        sels.append(current)

    cfg = ModelConfig(kv_mode=mode if mode in ("recursion_wise", "recursive_sharing", "hybrid") else "recursion_wise")
    cache = KvCache(cfg)
    row = np.zeros(cfg.n_kv_heads * cfg.d_head, dtype=np.float32)
    for r, sel in enumerate(sels, 1):
        if mode == "recursion_wise":
            for p in sel:
                cache.append(f"int0d{r}", p, row, row)
        elif mode == "recursive_sharing":
            if r == 1:
                for p in sel:
                    cache.append("int0d1", p, row, row)
        else:  # hybrid: fresh rows for survivors, shared refs for the rest
            if r == 1:
                for p in sel:
                    cache.append("int0d1", p, row, row)
            else:
                fresh = set(sel.tolist())
                for p in sels[0]:
                    cache.append(f"int0d{r}", p, row, row, shared=p not in fresh)

    owned = cache.owned_entries()
    entries = cache.entries()
    mem_entries = sum(owned.values())
    io_entries = sum(
        entries.get(f"int0d{r}", 0) if mode != "recursive_sharing" else entries["int0d1"]
        for r in range(1, n_recursions + 1)
    )
    attn_pairs = 0
    for r, sel in enumerate(sels, 1):
        if mode == "recursion_wise":
            key_pos = sel
        else:
            key_pos = sels[0]
        attn_pairs += int(np.searchsorted(key_pos, sel, side="right").sum())

    n, T = n_recursions, seq_len
    baseline_entries = n * T
    baseline_attn = n * T * (T + 1) // 2
    per_depth = []
    for r in range(1, n + 1):
        if mode == "recursive_sharing" and r > 1:
            per_depth.append(0)
        else:
            per_depth.append(int(owned.get(f"int0d{r}", 0)))
    return {
        "memory": mem_entries / baseline_entries,
        "io": io_entries / baseline_entries,
        "attention": attn_pairs / baseline_attn,
        "entries_per_depth": per_depth,
        "selected_per_depth": [int(s.size) for s in sels],
    }
