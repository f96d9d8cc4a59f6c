"""Decode-batching simulator and VRAM-budget batch arithmetic.

Time unit: one invocation of the shared recursion block over one batch.
Depth-wise batching advances every occupied slot one recursion step per
invocation regardless of the token's depth; the sequence-wise baseline
spends max-depth invocations per token round while shallow tokens idle.
Batch size counts sequences, so at most ``n_slots`` requests hold KV at
once in either scheme. Exited tokens buffer until ``drain_threshold`` of
them are ready for the shared output stage (drained FIFO, zero block cost).
The default of 1 runs that stage every step; larger values trade emission
latency (reported as ``mean_drain_wait``) and, past the point where whole
sequences stall, throughput, for bigger output-stage batches.

The depth proxy samples each token's recursion depth from a coupled
uniform draw, so raising the early-exit fraction never deepens any token;
``depths_from_model`` swaps the proxy for depths recorded during real
greedy decoding.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .config import ModelConfig, RouterConfig
from .kvcache import cache_cost_ratios
from .model import Model, count_parameters

__all__ = [
    "WorkloadSpec", "SimWorkload", "SimStats",
    "sample_depths", "sample_workload", "depths_from_model",
    "simulate_depthwise", "simulate_sequencewise",
    "max_batch_size", "relative_batch_slots", "write_trace_csv",
]


# -- workloads ---------------------------------------------------------------


@dataclass
class WorkloadSpec:
    """All requests queued at start; target lengths from a truncated normal."""

    n_requests: int = 1000
    mean_len: float = 256.0
    std_len: float = 64.0
    seed: int = 0

    def sample_lengths(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        raw = rng.normal(self.mean_len, self.std_len, size=self.n_requests)
        return np.maximum(np.rint(raw), 1).astype(np.int64)


@dataclass
class SimWorkload:
    lengths: np.ndarray
    depths: list  # per request: per-token recursion depth


def sample_depths(lengths, n_recursions: int, early_exit_fraction: float, seed: int) -> list:
    """Per-token depths: with probability ``early_exit_fraction`` a token
    exits before depth N_r; the same uniform draw feeds every fraction, so
    depths are pointwise non-increasing in the fraction."""
    rng = np.random.default_rng(seed)
    out = []
    for n in lengths:
        u = rng.random(int(n))
        if early_exit_fraction <= 0.0:
            depth = np.full(int(n), n_recursions, dtype=np.int64)
        else:
            shallow = 1 + np.floor(u / early_exit_fraction * (n_recursions - 1)).astype(np.int64)
            shallow = np.minimum(shallow, n_recursions)
            depth = np.where(u < early_exit_fraction, shallow, n_recursions)
        out.append(depth.astype(np.int64))
    return out


def sample_workload(spec: WorkloadSpec, n_recursions: int, early_exit_fraction: float) -> SimWorkload:
    lengths = spec.sample_lengths()
    depths = sample_depths(lengths, n_recursions, early_exit_fraction, spec.seed + 1)
    return SimWorkload(lengths=lengths, depths=depths)


def depths_from_model(model: Model, prompts, max_new_tokens: int) -> SimWorkload:
    """Real-model mode: depth of every decoded token from greedy decoding."""
    lengths, depths = [], []
    for prompt in prompts:
        res = model.generate(list(prompt), max_new_tokens)
        lengths.append(len(res.tokens))
        depths.append(np.asarray(res.depths, dtype=np.int64))
    return SimWorkload(lengths=np.asarray(lengths, dtype=np.int64), depths=depths)


# -- statistics --------------------------------------------------------------


@dataclass
class SimStats:
    tokens: int
    steps: int
    tokens_per_step: float
    occupancy: float
    peak_kv_entries: int
    mean_drain_wait: float
    completed: int

    def to_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "steps": self.steps,
            "tokens_per_step": self.tokens_per_step,
            "occupancy": self.occupancy,
            "peak_kv_entries": self.peak_kv_entries,
            "mean_drain_wait": self.mean_drain_wait,
            "completed": self.completed,
        }


def _kv_add(kv_mode: str, depth_step: int) -> int:
    """Owned cache entries written when a token passes one recursion step."""
    if kv_mode == "recursive_sharing":
        return 1 if depth_step == 1 else 0
    return 1  # recursion_wise and hybrid both write fresh entries per depth


def write_trace_csv(trace: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(trace[0].keys()))
        writer.writeheader()
        writer.writerows(trace)


# -- depth-wise batching -----------------------------------------------------


class _Slot:
    __slots__ = ("req", "tok", "prog")

    def __init__(self):
        self.req = -1   # request index, -1 when vacant
        self.tok = 0    # token position within the request
        self.prog = 0   # recursion steps completed for the current token


def simulate_depthwise(workload: SimWorkload, n_slots: int, n_recursions: int,
                       kv_mode: str = "recursion_wise",
                       drain_threshold: Optional[int] = None,
                       trace: Optional[list] = None) -> SimStats:
    if n_slots < 1:
        raise ValueError("n_slots must be >= 1")
    n_req = len(workload.lengths)
    if n_req == 0:
        raise ValueError("workload is empty")
    threshold = 1 if drain_threshold is None else max(int(drain_threshold), 1)

    slots = [_Slot() for _ in range(n_slots)]
    # batch size counts sequences: at most n_slots requests hold KV at once.
    # Each has one token in flight; after emission the request re-queues (at
    # the front) for its next token, so an early exit frees its remaining
    # depth steps for whatever work is waiting
    ready: deque = deque((r, 0) for r in range(n_req))
    drain: deque = deque()  # (request, token, exit step), FIFO
    kv_per_req = np.zeros(n_req, dtype=np.int64)

    steps = 0
    tokens = 0
    completed = 0
    in_flight = 0
    occ_sum = 0.0
    kv_now = 0
    kv_peak = 0
    wait_sum = 0
    drained_count = 0

    limit = 10 * int(np.maximum(workload.lengths, 1).sum()) * max(n_recursions, 1) + 1000
    guard = 0
    while completed < n_req:
        guard += 1
        if guard > limit:
            raise RuntimeError("simulator failed to make progress")
        vacant = [i for i, s in enumerate(slots) if s.req < 0]
        vi = 0
        while ready and (vi < len(vacant)
                         or workload.depths[ready[0][0]][ready[0][1]] == 0):
            req, tok = ready[0]
            if tok == 0 and in_flight >= n_slots:
                break  # capacity is owned by already-started sequences
            ready.popleft()
            if tok == 0:
                in_flight += 1
            if workload.depths[req][tok] == 0:
                # token skips recursion entirely; only the output stage remains
                drain.append((req, tok, steps))
                continue
            s = slots[vacant[vi]]
            s.req, s.tok, s.prog = req, tok, 0
            vi += 1
        active = [s for s in slots if s.req >= 0]
        step_occ = len(active)
        step_queue = len(ready)
        if active:
            steps += 1
            occ_sum += step_occ / n_slots
            for s in active:
                s.prog += 1
                added = _kv_add(kv_mode, s.prog)
                kv_per_req[s.req] += added
                kv_now += added
                if s.prog >= workload.depths[s.req][s.tok]:
                    drain.append((s.req, s.tok, steps))
                    s.req = -1
            kv_peak = max(kv_peak, kv_now)
        if len(drain) >= threshold or not active:
            cont = []
            while drain:
                req, tok, exit_step = drain.popleft()
                wait_sum += steps - exit_step
                drained_count += 1
                tokens += 1
                if tok + 1 >= workload.lengths[req]:
                    completed += 1
                    in_flight -= 1
                    kv_now -= int(kv_per_req[req])
                else:
                    cont.append((req, tok + 1))
            # continuing requests outrank fresh admissions: a sequence keeps
            # decoding and only completions hand slots to incoming work
            ready.extendleft(reversed(cont))
            if not active and trace:
                # a forced drain costs no block step; fold it into the last one
                trace[-1]["emitted"] = tokens
                trace[-1]["kv_entries"] = kv_now
        if trace is not None and active:
            # occupancy and queue as seen at invocation time; emitted counts
            # include tokens drained at the end of this step
            trace.append({
                "step": steps,
                "occupied": step_occ,
                "queue": step_queue,
                "kv_entries": kv_now,
                "emitted": tokens,
            })

    return SimStats(
        tokens=tokens,
        steps=steps,
        tokens_per_step=tokens / max(steps, 1),
        occupancy=occ_sum / max(steps, 1),
        peak_kv_entries=kv_peak,
        mean_drain_wait=wait_sum / max(drained_count, 1),
        completed=completed,
    )


# -- sequence-wise baseline --------------------------------------------------


def simulate_sequencewise(workload: SimWorkload, n_slots: int, n_recursions: int,
                          kv_mode: str = "recursion_wise",
                          trace: Optional[list] = None) -> SimStats:
    """Continuous batching over whole sequences: every round all active
    slots decode one token, costing as many block invocations as the
    deepest token in the batch while shallower ones idle."""
    if n_slots < 1:
        raise ValueError("n_slots must be >= 1")
    n_req = len(workload.lengths)
    if n_req == 0:
        raise ValueError("workload is empty")

    slots = [-1] * n_slots
    pos = np.zeros(n_req, dtype=np.int64)
    kv_per_req = np.zeros(n_req, dtype=np.int64)
    queue = deque(range(n_req))

    steps = 0
    tokens = 0
    completed = 0
    occ_sum = 0.0
    kv_now = 0
    kv_peak = 0

    while completed < n_req:
        for i in range(n_slots):
            if slots[i] < 0 and queue:
                slots[i] = queue.popleft()
        active = [r for r in slots if r >= 0]
        depths = [int(workload.depths[r][pos[r]]) for r in active]
        cost = max(max(depths, default=1), 1)
        steps += cost
        occ_sum += cost * (len(active) / n_slots)
        for r, d in zip(active, depths):
            for step_depth in range(1, d + 1):
                added = _kv_add(kv_mode, step_depth)
                kv_per_req[r] += added
                kv_now += added
        kv_peak = max(kv_peak, kv_now)
        for i in range(n_slots):
            r = slots[i]
            if r < 0:
                continue
            tokens += 1
            pos[r] += 1
            if pos[r] >= workload.lengths[r]:
                completed += 1
                kv_now -= int(kv_per_req[r])
                slots[i] = -1
        if trace is not None:
            trace.append({
                "step": steps,
                "occupied": len(active),
                "queue": len(queue),
                "kv_entries": kv_now,
                "emitted": tokens,
            })

    return SimStats(
        tokens=tokens,
        steps=steps,
        tokens_per_step=tokens / max(steps, 1),
        occupancy=occ_sum / max(steps, 1),
        peak_kv_entries=kv_peak,
        mean_drain_wait=0.0,
        completed=completed,
    )


# -- VRAM budget arithmetic --------------------------------------------------


def _param_bytes(cfg: ModelConfig, router_cfg, bytes_per_elem: float) -> float:
    counts = count_parameters(cfg, router_cfg)
    total = counts["unique_non_embedding"] + counts["embedding"] + counts["router"]
    return total * bytes_per_elem


def _kv_bytes_per_seq(cfg: ModelConfig, kv_mode, capacities, bytes_per_elem: float) -> float:
    mode = kv_mode or cfg.kv_mode
    ratio = float(cache_cost_ratios(cfg.n_recursions, mode, capacities)["memory"])
    full = cfg.ctx_len * cfg.n_layers * 2 * cfg.n_kv_heads * cfg.d_head * bytes_per_elem
    return full * ratio


def max_batch_size(cfg: ModelConfig, vram_bytes: float, kv_mode: Optional[str] = None,
                   router_cfg: Optional[RouterConfig] = None, capacities=None,
                   bytes_per_elem: float = 2.0, param_bytes_override: Optional[float] = None,
                   kv_scale: float = 1.0) -> int:
    """Decode slots fitting beside the parameters; hidden-state memory is
    ignored on purpose, matching the cache-centric budget model."""
    params = (
        _param_bytes(cfg, router_cfg, bytes_per_elem)
        if param_bytes_override is None else param_bytes_override
    )
    if vram_bytes <= params:
        raise ValueError(
            f"vram budget {vram_bytes:.3g} B does not cover parameters {params:.3g} B"
        )
    kv = _kv_bytes_per_seq(cfg, kv_mode, capacities, bytes_per_elem) * kv_scale
    return int((vram_bytes - params) // kv)


def relative_batch_slots(cfg: ModelConfig, baseline_cfg: ModelConfig, vram_bytes: float,
                         base_slots: int = 32, bytes_per_elem: float = 2.0,
                         kv_mode: Optional[str] = None, capacities=None,
                         router_cfg: Optional[RouterConfig] = None,
                         baseline_kv_mode: Optional[str] = None) -> int:
    """Slot count normalized so the baseline model gets ``base_slots``."""
    def slots_float(c, mode, caps, rcfg):
        params = _param_bytes(c, rcfg, bytes_per_elem)
        if vram_bytes <= params:
            raise ValueError("vram budget does not cover parameters")
        return (vram_bytes - params) / _kv_bytes_per_seq(c, mode, caps, bytes_per_elem)

    ours = slots_float(cfg, kv_mode, capacities, router_cfg)
    base = slots_float(baseline_cfg, baseline_kv_mode, None, None)
    return int(base_slots * ours / base)
