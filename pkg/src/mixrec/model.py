"""Recursive transformer with optional per-token depth routing.

Layer schedule
    The unrolled schedule maps each of the ``n_layers`` applications to a
    parameter-block id. ``cycle`` repeats a short stack, ``sequence``
    repeats each block consecutively, and the ``middle_*`` variants keep a
    unique first and last layer around a shared interior, which is what the
    routed configurations use. Recursion step r runs the r-th equal slice
    of the interior schedule.

Forward pass
    Sequences are flattened to one [B*T, d] matrix; attention masks rebuild
    causality from explicit (position, sequence-id) arrays, so a recursion
    depth can run any subset of rows. Expert-choice updates selected rows
    as H + gate * f(H); token-choice follows its committed depth with the
    first-recursion residual added at the assigned depth only.

KV modes
    recursion_wise     each depth attends the keys/values of the rows that
                       reached that depth (computed fresh there)
    recursive_sharing  depths beyond the first reuse the first depth's
                       keys/values over the full prefix and skip the K/V
                       projections entirely
    hybrid             reuse the first depth's entries for rows that exited,
                       fresh entries for rows still live
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from types import SimpleNamespace
from typing import Optional

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig, RouterConfig
from .routing import (
    Router,
    RoutingState,
    StepTrace,
    capacity_schedule,
    topk_per_sequence,
)
from .tensor import Tensor

# -- layer schedules ---------------------------------------------------------


def build_layer_schedule(sharing: str, n_layers: int, n_recursions: int) -> list:
    """Unrolled layer -> parameter-block id for one sharing strategy."""
    L, nr = n_layers, n_recursions
    if sharing == "none":
        return list(range(L))
    if sharing in ("cycle", "sequence"):
        if L % nr:
            raise ConfigError(f"n_layers={L} not divisible by n_recursions={nr}")
        m = L // nr
        if sharing == "cycle":
            return list(range(m)) * nr
        return [layer // nr for layer in range(L)]
    if sharing in ("middle_cycle", "middle_sequence"):
        if L < nr + 2 or (L - 2) % nr:
            raise ConfigError(
                f"middle sharing needs n_layers-2 divisible by n_recursions (got L={L}, n_recursions={nr})"
            )
        m = (L - 2) // nr
        if sharing == "middle_cycle":
            interior = [((layer - 1) % m) + 1 for layer in range(1, L - 1)]
        else:
            interior = [((layer - 1) // nr) + 1 for layer in range(1, L - 1)]
        return [0] + interior + [m + 1]
    raise ConfigError(f"unknown sharing strategy {sharing!r}")


def _head_params(kind: str, d: int, out: int) -> int:
    if kind == "linear":
        return d * out
    if kind == "mlp":
        return d * d + d * out
    return d * 4 * d + 4 * d * out


def count_parameters(cfg: ModelConfig, router_cfg: Optional[RouterConfig] = None) -> dict:
    """Exact parameter counts; 'unrolled' counts shared blocks once per use."""
    d, dh = cfg.d_model, cfg.d_head
    per_block = (
        d * cfg.n_heads * dh          # Wq
        + 2 * d * cfg.n_kv_heads * dh  # Wk, Wv
        + cfg.n_heads * dh * d         # Wo
        + 3 * d * cfg.d_inter          # gate, up, down
        + 2 * d                        # two norm gains
    )
    sched = build_layer_schedule(cfg.sharing, cfg.n_layers, cfg.n_recursions)
    unique = len(set(sched)) * per_block + d
    unrolled = len(sched) * per_block + d
    router = 0
    if router_cfg is not None and router_cfg.family != "none" and cfg.n_recursions > 1:
        if router_cfg.family == "expert_choice":
            router = cfg.n_recursions * _head_params(router_cfg.head, d, 1)
            if router_cfg.scheme == "aux_router":
                router *= 2
        else:
            router = _head_params(router_cfg.head, d, cfg.n_recursions)
    return {
        "per_block": per_block,
        "unique_non_embedding": unique,
        "unrolled_non_embedding": unrolled,
        "embedding": cfg.vocab_size * d,
        "router": router,
    }


# -- parameters --------------------------------------------------------------


class BlockParams:
    FIELDS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down", "norm_attn", "norm_ffn")

    def __init__(self, cfg: ModelConfig, rng, dtype):
        d, dh = cfg.d_model, cfg.d_head

        def init(*shape):
            return Tensor((rng.normal(size=shape) * 0.02).astype(dtype), requires_grad=True)

        self.wq = init(d, cfg.n_heads * dh)
        self.wk = init(d, cfg.n_kv_heads * dh)
        self.wv = init(d, cfg.n_kv_heads * dh)
        self.wo = init(cfg.n_heads * dh, d)
        self.w_gate = init(d, cfg.d_inter)
        self.w_up = init(d, cfg.d_inter)
        self.w_down = init(cfg.d_inter, d)
        self.norm_attn = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.norm_ffn = Tensor(np.ones(d, dtype=dtype), requires_grad=True)


@dataclass
class ForwardOut:
    logits: Tensor                      # [B*T, vocab]
    routing: Optional[RoutingState]


class Model:
    def __init__(self, cfg: ModelConfig, router_cfg: Optional[RouterConfig] = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.router_cfg = router_cfg
        self.dtype = np.float32 if cfg.dtype == "float32" else np.float64
        rng = np.random.default_rng(seed)
        self.schedule = build_layer_schedule(cfg.sharing, cfg.n_layers, cfg.n_recursions)
        n_blocks = len(set(self.schedule))
        self.embed = Tensor(
            (rng.normal(size=(cfg.vocab_size, cfg.d_model)) * 0.02).astype(self.dtype),
            requires_grad=True,
        )
        self.blocks = [BlockParams(cfg, rng, self.dtype) for _ in range(n_blocks)]
        self.final_norm = Tensor(np.ones(cfg.d_model, dtype=self.dtype), requires_grad=True)
        self.router: Optional[Router] = None
        if router_cfg is not None and router_cfg.family != "none" and cfg.n_recursions > 1:
            router_cfg.validate(cfg.n_recursions)
            self.router = Router(router_cfg, cfg.d_model, cfg.n_recursions, rng, self.dtype)

    # -- structure -----------------------------------------------------------

    @property
    def has_middle(self) -> bool:
        return self.cfg.sharing in ("middle_cycle", "middle_sequence")

    @property
    def prelude_ids(self) -> list:
        return [self.schedule[0]] if self.has_middle else []

    @property
    def postlude_ids(self) -> list:
        return [self.schedule[-1]] if self.has_middle else []

    def interior_slots(self, r: int) -> list:
        """Block ids the r-th recursion step applies, in order."""
        pre = len(self.prelude_ids)
        m = (len(self.schedule) - 2 * pre) // self.cfg.n_recursions
        return self.schedule[pre + (r - 1) * m : pre + r * m]

    def named_parameters(self) -> dict:
        out = {"embed.weight": self.embed}
        for i, blk in enumerate(self.blocks):
            for f in BlockParams.FIELDS:
                out[f"blocks.{i}.{f}"] = getattr(blk, f)
        out["final_norm.gain"] = self.final_norm
        if self.router is not None:
            out.update(self.router.named_parameters())
        return out

    def named_buffers(self) -> dict:
        return self.router.named_buffers() if self.router is not None else {}

    # -- one transformer layer ----------------------------------------------

    def _layer(self, lid, x, pos, seq, stored=None, include_fresh=True):
        """Pre-norm attention + gated FFN.

        ``stored`` is an optional (k, v, pos, seq) key source; fresh K/V for
        the current rows are computed unless ``include_fresh`` is False and
        are returned so callers can cache or reuse them.
        """
        cfg = self.cfg
        blk = self.blocks[lid]
        a_in = T.rmsnorm(x, blk.norm_attn, cfg.norm_eps)
        q = T.rope(T.matmul(a_in, blk.wq), pos, cfg.n_heads, cfg.d_head, cfg.rope_base)
        produced = None
        if include_fresh:
            k_new = T.rope(T.matmul(a_in, blk.wk), pos, cfg.n_kv_heads, cfg.d_head, cfg.rope_base)
            v_new = T.matmul(a_in, blk.wv)
            produced = (k_new, v_new)
            if stored is None:
                keys = (k_new, v_new, pos, seq)
            else:
                sk, sv, spos, sseq = stored
                keys = (
                    T.concat_rows([sk, k_new]),
                    T.concat_rows([sv, v_new]),
                    np.concatenate([spos, pos]),
                    np.concatenate([sseq, seq]),
                )
        else:
            keys = stored
        attn = T.attention(
            q, keys[0], keys[1], pos, keys[2], seq, keys[3],
            cfg.n_heads, cfg.n_kv_heads, cfg.d_head,
        )
        h = T.add(x, T.matmul(attn, blk.wo))
        f_in = T.rmsnorm(h, blk.norm_ffn, cfg.norm_eps)
        ff = T.matmul(
            T.mul(T.silu(T.matmul(f_in, blk.w_gate)), T.matmul(f_in, blk.w_up)),
            blk.w_down,
        )
        return T.add(h, ff), produced

    # -- one recursion step over selected rows -------------------------------

    def _run_step(self, r, x, sel_rows, pos, seq, store):
        mode = self.cfg.kv_mode
        for j, lid in enumerate(self.interior_slots(r)):
            if mode == "recursion_wise":
                x, _ = self._layer(lid, x, pos, seq)
            elif r == 1:
                x, produced = self._layer(lid, x, pos, seq)
                store[j] = SimpleNamespace(
                    k=produced[0], v=produced[1], rows=sel_rows, pos=pos, seq=seq
                )
            elif mode == "recursive_sharing":
                st = store[j]
                x, _ = self._layer(
                    lid, x, pos, seq, stored=(st.k, st.v, st.pos, st.seq), include_fresh=False
                )
            else:
                # hybrid: exited rows keep their *first-depth* entries, live
                # rows contribute fresh ones; the depth-1 store never mutates
                st = store[j]
                keep_idx = np.nonzero(~np.isin(st.rows, sel_rows))[0]
                stored = (
                    T.take_rows(st.k, keep_idx),
                    T.take_rows(st.v, keep_idx),
                    st.pos[keep_idx],
                    st.seq[keep_idx],
                )
                x, _ = self._layer(lid, x, pos, seq, stored=stored)
        return x

    def probe_kv(self, ids) -> list:
        """K/V states of every unrolled layer, routing disabled.

        All tokens run every depth, which is what the cache would hold
        without a router; returns [(k, v) ndarray pairs] in schedule order.
        """
        ids = np.asarray(ids)
        B, L = ids.shape
        pos = np.tile(np.arange(L, dtype=np.int64), B)
        seq = np.repeat(np.arange(B, dtype=np.int64), L)
        h = T.embedding(self.embed, ids.reshape(-1))
        captured = []
        for lid in self.schedule:
            h, produced = self._layer(lid, h, pos, seq)
            captured.append((produced[0].data.copy(), produced[1].data.copy()))
        return captured

    # -- full forward --------------------------------------------------------

    def forward(self, ids, rule: str = "train", depth_limit: Optional[int] = None) -> ForwardOut:
        """Teacher-forced forward over [B, T] token ids.

        ``rule`` picks the selection mechanism: "train" uses per-sequence
        top-k (expert choice) or argmax (token choice); "inference" uses the
        deployable threshold rule instead of top-k. ``depth_limit`` clamps
        recursion: depths beyond it select nobody, so tokens that wanted to
        go deeper stop there.
        """
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ValueError("ids must be [batch, seq_len]")
        B, L = ids.shape
        if L > self.cfg.ctx_len:
            raise ValueError(f"sequence length {L} exceeds ctx_len {self.cfg.ctx_len}")
        if depth_limit is not None and not 1 <= depth_limit <= self.cfg.n_recursions:
            raise ValueError("depth_limit must lie in [1, n_recursions]")
        pos = np.tile(np.arange(L, dtype=np.int64), B)
        seq = np.repeat(np.arange(B, dtype=np.int64), L)
        h = T.embedding(self.embed, ids.reshape(-1))
        for lid in self.prelude_ids:
            h, _ = self._layer(lid, h, pos, seq)

        state = None
        if self.router is None:
            store: dict = {}
            n = h.shape[0]
            all_rows = np.arange(n)
            last = self.cfg.n_recursions if depth_limit is None else depth_limit
            for r in range(1, last + 1):
                h = self._run_step(r, h, all_rows, pos, seq, store)
        elif self.router_cfg.family == "expert_choice":
            h, state = self._forward_expert(h, pos, seq, B, L, rule, depth_limit)
        else:
            h, state = self._forward_token(h, pos, seq, B, L, depth_limit)

        for lid in self.postlude_ids:
            h, _ = self._layer(lid, h, pos, seq)
        h = T.rmsnorm(h, self.final_norm, self.cfg.norm_eps)
        logits = T.matmul(h, self.embed, transpose_b=True)
        return ForwardOut(logits=logits, routing=state)

    def _forward_expert(self, h, pos, seq, B, L, rule, depth_limit=None):
        rcfg = self.router_cfg
        caps = capacity_schedule(self.cfg.n_recursions, rcfg.capacities)
        state = RoutingState(family="expert_choice", n_rows=h.shape[0], n_seqs=B, seq_len=L)
        live = np.arange(h.shape[0])
        H = h
        store: dict = {}
        empty = np.array([], dtype=np.int64)
        for r in range(1, self.cfg.n_recursions + 1):
            if depth_limit is not None and r > depth_limit:
                state.steps.append(StepTrace(r, live, empty, 0, False, None, None, empty))
                live = empty
                continue
            if live.size == 0:
                state.steps.append(StepTrace(r, live, live, None, False, None, None, live))
                continue
            h_live = T.take_rows(H, live)
            logits = self.router.heads[r - 1](h_live)
            scores = self.router.activation(logits)
            aux_scores = None
            if rcfg.scheme == "aux_router":
                aux_scores = T.sigmoid(self.router.aux_heads[r - 1](h_live.detach()))
            if rule == "train":
                k = int(np.floor(caps[r - 1] * L))
                mask, shortfall = topk_per_sequence(
                    scores.data.astype(np.float64), seq[live], B, k
                )
            else:
                source = aux_scores if rcfg.scheme == "aux_router" else scores
                mask = source.data > rcfg.threshold
                k, shortfall = None, False
            sel_local = np.nonzero(mask)[0]
            sel = live[sel_local]
            state.steps.append(
                StepTrace(r, live, sel, k, shortfall, logits, scores, sel_local, aux_scores)
            )
            if sel.size:
                x = T.take_rows(H, sel)
                x = self._run_step(r, x, sel, pos[sel], seq[sel], store)
                gate = T.take_rows(scores, sel_local) * rcfg.alpha
                H = T.index_add_rows(H, sel, T.scale_rows(x, gate))
            live = sel
        return H, state

    def _forward_token(self, h, pos, seq, B, L, depth_limit=None):
        rcfg = self.router_cfg
        state = RoutingState(family="token_choice", n_rows=h.shape[0], n_seqs=B, seq_len=L)
        logits = self.router.heads[0](h)
        probs = self.router.activation(logits)
        sel_scores = probs.data.astype(np.float64)
        if self.router.bias is not None:
            sel_scores = sel_scores + self.router.bias
        assigned = np.argmax(sel_scores, axis=1).astype(np.int64) + 1
        if depth_limit is not None:
            assigned = np.minimum(assigned, depth_limit)
        state.logits, state.probs, state.assigned = logits, probs, assigned
        H = h
        H1 = h
        store: dict = {}
        n = h.shape[0]
        for r in range(1, self.cfg.n_recursions + 1):
            live = np.nonzero(assigned >= r)[0]
            state.steps.append(StepTrace(r, live, live, None, False, None, None, np.arange(live.size)))
            if live.size == 0:
                continue
            x = T.take_rows(H, live)
            x = self._run_step(r, x, live, pos[live], seq[live], store)
            col = T.gather_cols(probs, np.full(n, r - 1, dtype=np.int64))
            gate = T.take_rows(col, live) * rcfg.alpha
            upd = T.scale_rows(x, gate)
            H = T.index_add_rows(H, live, upd - T.take_rows(H, live))
            exits = live[assigned[live] == r]
            if exits.size:
                H = T.index_add_rows(H, exits, T.take_rows(H1, exits))
        return H, state

    # -- greedy decode with a KV cache ---------------------------------------

    def generate(self, prompt_ids, max_new_tokens: int, collect_logits: bool = False):
        """Greedy decode for one sequence; returns a DecodeResult.

        Every token (prompt included) runs through the incremental path so
        the cache contents match what a teacher-forced pass would build.
        """
        from .kvcache import KvCache

        cache = KvCache(self.cfg)
        tokens = [int(t) for t in prompt_ids]
        if not tokens:
            raise ValueError("prompt must contain at least one token")
        depths = []
        logits_rows = []
        out_tokens = list(tokens)
        lg = None
        for t, tok in enumerate(out_tokens):
            lg, depth = self._decode_step(tok, t, cache)
            depths.append(depth)
            if collect_logits:
                logits_rows.append(lg)
        for _ in range(max_new_tokens):
            nxt = int(np.argmax(lg))
            out_tokens.append(nxt)
            lg, depth = self._decode_step(nxt, len(out_tokens) - 1, cache)
            depths.append(depth)
            if collect_logits:
                logits_rows.append(lg)
        return SimpleNamespace(
            tokens=out_tokens,
            depths=depths,
            logits=np.stack(logits_rows) if collect_logits else None,
            cache=cache,
        )

    def _cached_layer(self, lid, x, pos_arr, cache, key, write=True):
        seq1 = np.zeros(1, dtype=np.int64)
        sk, sv, spos = cache.view(key)
        stored = None
        if spos.size:
            stored = (Tensor(sk), Tensor(sv), spos, np.zeros(spos.size, dtype=np.int64))
        out, produced = self._layer(lid, x, pos_arr, seq1, stored=stored)
        if write:
            cache.append(key, int(pos_arr[0]), produced[0].data[0], produced[1].data[0])
        return out, produced

    def _decode_step(self, tok, t, cache):
        cfg = self.cfg
        pos1 = np.array([t], dtype=np.int64)
        seq1 = np.zeros(1, dtype=np.int64)
        h = T.embedding(self.embed, np.array([tok]))
        for j, lid in enumerate(self.prelude_ids):
            h, _ = self._cached_layer(lid, h, pos1, cache, f"pre{j}")

        depth = 0
        if self.router is None:
            store_rows: dict = {}
            for r in range(1, cfg.n_recursions + 1):
                h = self._decode_recursion(r, h, pos1, cache, store_rows)
            depth = cfg.n_recursions
        elif self.router_cfg.family == "expert_choice":
            h, depth = self._decode_expert(h, pos1, cache)
        else:
            h, depth = self._decode_token_choice(h, pos1, cache)

        for j, lid in enumerate(self.postlude_ids):
            h, _ = self._cached_layer(lid, h, pos1, cache, f"post{j}")
        h = T.rmsnorm(h, self.final_norm, cfg.norm_eps)
        logits = T.matmul(h, self.embed, transpose_b=True)
        return logits.data[0].copy(), depth

    def _decode_recursion(self, r, h, pos1, cache, stash):
        """One recursion step for the current token; obeys the cache mode."""
        cfg = self.cfg
        mode = cfg.kv_mode
        for j, lid in enumerate(self.interior_slots(r)):
            if mode == "recursion_wise":
                h, _ = self._cached_layer(lid, h, pos1, cache, f"int{j}d{r}")
            elif r == 1:
                h, produced = self._cached_layer(lid, h, pos1, cache, f"int{j}d1")
                if mode == "hybrid":
                    stash[j] = (produced[0].data[0].copy(), produced[1].data[0].copy())
            elif mode == "recursive_sharing":
                sk, sv, spos = cache.view(f"int{j}d1")
                stored = (Tensor(sk), Tensor(sv), spos, np.zeros(spos.size, dtype=np.int64))
                h, _ = self._layer(
                    lid, h, pos1, np.zeros(1, dtype=np.int64), stored=stored, include_fresh=False
                )
            else:  # hybrid beyond depth 1: fresh entry replaces the placeholder
                h, _ = self._cached_layer(lid, h, pos1, cache, f"int{j}d{r}")
        return h

    def _fill_hybrid_placeholders(self, exit_depth, cache, stash):
        # rows this token will never compute reuse its first-depth entries
        if self.cfg.kv_mode != "hybrid":
            return
        m = len(self.interior_slots(1))
        for r in range(max(exit_depth, 1) + 1, self.cfg.n_recursions + 1):
            for j in range(m):
                if j in stash:
                    k1, v1 = stash[j]
                    cache.append(
                        f"int{j}d{r}", cache.last_pos(f"int{j}d1"), k1, v1, shared=True
                    )

    def _decode_expert(self, h, pos1, cache):
        rcfg = self.router_cfg
        stash: dict = {}
        depth = 0
        for r in range(1, self.cfg.n_recursions + 1):
            logits = self.router.heads[r - 1](h)
            score = self.router.activation(logits)
            if rcfg.scheme == "aux_router":
                gate_rule = T.sigmoid(self.router.aux_heads[r - 1](h.detach()))
            else:
                gate_rule = score
            if not float(gate_rule.data[0]) > rcfg.threshold:
                break
            x = self._decode_recursion(r, h, pos1, cache, stash)
            gate = T.take_rows(score, np.array([0])) * rcfg.alpha
            h = T.add(h, T.scale_rows(x, gate))
            depth = r
        self._fill_hybrid_placeholders(depth, cache, stash)
        return h, depth

    def _decode_token_choice(self, h, pos1, cache):
        rcfg = self.router_cfg
        logits = self.router.heads[0](h)
        probs = self.router.activation(logits)
        sel = probs.data[0].astype(np.float64)
        if self.router.bias is not None:
            sel = sel + self.router.bias
        assigned = int(np.argmax(sel)) + 1
        H1 = h
        stash: dict = {}
        for r in range(1, assigned + 1):
            x = self._decode_recursion(r, h, pos1, cache, stash)
            gate = T.take_rows(T.gather_cols(probs, np.array([r - 1])), np.array([0])) * rcfg.alpha
            h = T.scale_rows(x, gate)
            if r == assigned:
                h = T.add(h, H1)
        self._fill_hybrid_placeholders(assigned, cache, stash)
        return h, assigned


# -- checkpoint format -------------------------------------------------------

_MAGIC = b"MXRC"
_VERSION = 1


def _config_text(model: Model) -> str:
    from dataclasses import fields

    lines = []
    for f in fields(model.cfg):
        lines.append(f"model.{f.name} = {getattr(model.cfg, f.name)}")
    rcfg = model.router_cfg or RouterConfig(family="none")
    for f in fields(rcfg):
        val = getattr(rcfg, f.name)
        if f.name == "capacities":
            val = "none" if val is None else ",".join(repr(float(c)) for c in val)
        lines.append(f"router.{f.name} = {val}")
    return "\n".join(lines) + "\n"


def save_checkpoint(path: str, model: Model, extra_text: str = "") -> None:
    """Binary layout: magic, version, config text, then named float32 tensors
    (name, rank, extents, little-endian payload). float32 models round-trip
    bit for bit."""
    text = _config_text(model)
    if extra_text:
        text += extra_text if extra_text.endswith("\n") else extra_text + "\n"
    entries = {name: p.data for name, p in model.named_parameters().items()}
    entries.update({name: buf for name, buf in model.named_buffers().items()})
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        raw = text.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            for ext in data.shape:
                fh.write(struct.pack("<I", ext))
            fh.write(data.tobytes())


def load_checkpoint(path: str):
    """Returns (model, config_text). The model is rebuilt from the stored
    config and its tensors overwritten with the stored values."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (tlen,) = struct.unpack("<I", fh.read(4))
        text = fh.read(tlen).decode("utf-8")
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * n_items), dtype="<f4").reshape(shape)
            tensors[name] = data

    from .config import build_configs, parse_config_text

    pairs = parse_config_text(text)
    own = {k: v for k, v in pairs.items() if k.split(".")[0] in ("model", "router")}
    model_cfg, router_cfg, _, _ = build_configs(own)
    model = Model(model_cfg, router_cfg, seed=0)
    params = model.named_parameters()
    buffers = model.named_buffers()
    for name, arr in tensors.items():
        if name in params:
            p = params[name]
            if p.data.shape != arr.shape:
                raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, expected {p.data.shape}")
            p.data = arr.astype(model.dtype)
        elif name in buffers:
            buffers[name][...] = arr
        else:
            raise ValueError(f"checkpoint contains unknown tensor {name!r}")
    return model, text
