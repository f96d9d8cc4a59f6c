"""Toy-scale training and evaluation harness.

Byte-level corpus handling, AdamW with decoupled weight decay, the
trapezoid/cosine schedules, objective assembly (LM cross-entropy plus the
router terms the scheme asks for), and the evaluation reports: overall and
depth-clamped NLL, router health metrics, KV similarity, and per-token
depth annotation.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .model import Model, save_checkpoint
from .routing import (
    combined_router_loss,
    loss_free_bias_update,
    telemetry_row,
    token_depths,
)
from .tensor import Tensor

DOC_SEP = 256  # document boundary
BOS = 257      # document start
BYTE_VOCAB = 258

__all__ = [
    "DOC_SEP", "BOS", "BYTE_VOCAB",
    "encode_text", "render_token", "load_corpus", "make_synthetic_corpus",
    "split_stream", "WindowSampler", "eval_batches",
    "trapezoid_lr", "cosine_lr", "AdamW", "clip_gradients",
    "train_step", "evaluate", "eval_report", "EvalReport",
    "kv_similarity_report", "depth_annotation", "run_training",
]


# -- byte tokenizer and corpus -----------------------------------------------


def encode_text(text) -> np.ndarray:
    """UTF-8 bytes as token ids 0..255."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def render_token(tok: int) -> str:
    if tok == DOC_SEP:
        return "<sep>"
    if tok == BOS:
        return "<bos>"
    ch = chr(tok)
    if tok < 256 and (32 <= tok < 127 or ch in "\n\t"):
        return ch
    return f"\\x{tok:02x}"


def load_corpus(path) -> np.ndarray:
    """Token stream: documents split on blank lines, each wrapped
    as <bos> bytes <sep>."""
    data = Path(path).read_bytes()
    parts = []
    for doc in data.split(b"\n\n"):
        doc = doc.strip()
        if not doc:
            continue
        parts.append(np.array([BOS], dtype=np.int64))
        parts.append(encode_text(doc))
        parts.append(np.array([DOC_SEP], dtype=np.int64))
    if not parts:
        raise ValueError(f"corpus {path} contains no documents")
    return np.concatenate(parts)


_WORDS = (
    "the of and to in is that it for on with as are was be at by this have "
    "from or one had not but what all were when we there can an your which "
    "their time will way about many then them write would like these her"
).split()

_SENTENCES = (
    "the quick brown fox jumps over the lazy dog.",
    "pack my box with five dozen liquor jugs.",
    "how vexingly quick daft zebras jump.",
)

_COUNT = "one two three four five six seven eight nine ten".split()


def make_synthetic_corpus(path, n_bytes: int = 1_000_000, seed: int = 0) -> Path:
    """Mixed-predictability text: repeated pangrams, counting cycles, and
    Zipf-weighted word salad, so a byte model has both easy and hard spans."""
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, len(_WORDS) + 1, dtype=np.float64)
    zipf = (1.0 / ranks) / (1.0 / ranks).sum()
    out = io.StringIO()
    while out.tell() < n_bytes:
        kind = rng.choice(3, p=[0.4, 0.3, 0.3])
        if kind == 0:
            sent = _SENTENCES[int(rng.integers(len(_SENTENCES)))]
            doc = " ".join([sent] * int(rng.integers(4, 10)))
        elif kind == 1:
            start = int(rng.integers(len(_COUNT)))
            seqn = [_COUNT[(start + i) % len(_COUNT)] for i in range(int(rng.integers(30, 80)))]
            doc = " ".join(seqn) + "."
        else:
            words = rng.choice(_WORDS, size=int(rng.integers(40, 120)), p=zipf)
            doc = " ".join(words) + "."
        out.write(doc)
        out.write("\n\n")
    path = Path(path)
    path.write_text(out.getvalue(), encoding="utf-8")
    return path


def split_stream(stream: np.ndarray, eval_fraction: float = 0.1):
    """Tail of the stream held out for evaluation."""
    n_eval = max(int(len(stream) * eval_fraction), 1)
    return stream[:-n_eval], stream[-n_eval:]


class WindowSampler:
    """Random fixed-length (input, shifted-target) windows from a stream."""

    def __init__(self, stream: np.ndarray, seq_len: int, batch_size: int, rng):
        if len(stream) < seq_len + 2:
            raise ValueError("stream shorter than one training window")
        self.stream = stream
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.rng = rng

    def next(self):
        starts = self.rng.integers(
            0, len(self.stream) - self.seq_len - 1, size=self.batch_size
        )
        x = np.stack([self.stream[s : s + self.seq_len] for s in starts])
        y = np.stack([self.stream[s + 1 : s + self.seq_len + 1] for s in starts])
        return x, y


def eval_batches(stream: np.ndarray, seq_len: int, n_windows: int, batch_size: int):
    """Deterministic evenly spaced windows, grouped into batches."""
    if len(stream) < seq_len + 2:
        raise ValueError("eval stream shorter than one window")
    starts = np.linspace(0, len(stream) - seq_len - 1, n_windows).astype(np.int64)
    for i in range(0, n_windows, batch_size):
        chunk = starts[i : i + batch_size]
        x = np.stack([stream[s : s + seq_len] for s in chunk])
        y = np.stack([stream[s + 1 : s + seq_len + 1] for s in chunk])
        yield x, y


# -- learning-rate schedules -------------------------------------------------


def trapezoid_lr(t: int, warmup: int, plateau_end: int, cooldown: int, lr_max: float) -> float:
    """Linear warm-up to ``lr_max``, hold until ``plateau_end``, then linear
    cool-down over ``cooldown`` steps."""
    if t >= plateau_end + cooldown:
        raise ValueError(f"schedule exhausted: step {t} >= {plateau_end + cooldown}")
    if t < warmup:
        return lr_max * t / warmup
    if t < plateau_end:
        return lr_max
    return lr_max * (1.0 - (t - plateau_end) / cooldown)


def cosine_lr(t: int, total: int, warmup: int, lr_max: float, lr_min: float = 0.0) -> float:
    if warmup and t < warmup:
        return lr_max * t / warmup
    frac = (t - warmup) / max(total - warmup, 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * min(frac, 1.0)))


def _lr_at(tcfg: TrainConfig, t: int) -> float:
    if tcfg.lr_schedule == "trapezoid":
        plateau_end = tcfg.steps - tcfg.cooldown_steps
        return trapezoid_lr(t, tcfg.warmup_steps, plateau_end, tcfg.cooldown_steps, tcfg.lr_max)
    return cosine_lr(t, tcfg.steps, tcfg.warmup_steps, tcfg.lr_max, tcfg.min_lr)


# -- optimizer ---------------------------------------------------------------


class AdamW:
    """Decoupled weight decay on matrices only; moments kept in float64."""

    def __init__(self, params: dict, betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros(p.shape, dtype=np.float64) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape, dtype=np.float64) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)


def clip_gradients(params: dict, max_norm: float) -> float:
    """Global-norm clip in place; returns the pre-clip norm."""
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float((p.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(sq))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- one training step -------------------------------------------------------


def _objective(model: Model, x, y):
    out = model.forward(x)
    lm = T.cross_entropy(out.logits, np.asarray(y).reshape(-1))
    logs = {"loss_lm": float(lm.data)}
    total = lm
    if out.routing is not None:
        rcfg = model.router_cfg
        extra, raw = combined_router_loss(out.routing, rcfg)
        if "aux" in raw:
            logs["loss_aux"] = raw["aux"] * rcfg.aux_coeff
        if "aux_router" in raw:
            logs["loss_aux"] = raw["aux_router"] * rcfg.aux_coeff
        if "balance" in raw:
            logs["loss_balance"] = raw["balance"] * rcfg.balance_coeff
        logs["loss_z"] = raw.get("z", 0.0) * rcfg.z_coeff
        if extra is not None:
            total = total + extra
    logs["loss_total"] = float(total.data)
    return total, logs, out.routing


def train_step(model: Model, opt: AdamW, x, y, lr: float, grad_clip: float):
    """Forward, backward, clip, update; returns (logs, routing state).

    Raises RuntimeError naming the failing op if anything non-finite shows
    up, so a diverged run stops instead of spraying NaNs into checkpoints.
    """
    opt.zero_grad()
    try:
        total, logs, state = _objective(model, x, y)
        total.backward()
    except FloatingPointError as exc:
        raise RuntimeError(f"non-finite value in training step: {exc}") from None
    logs["grad_norm"] = clip_gradients(opt.params, grad_clip)
    opt.step(lr)
    if (
        state is not None
        and model.router is not None
        and model.router.bias is not None
        and model.router_cfg.scheme == "loss_free"
    ):
        loss_free_bias_update(
            model.router.bias, state.assigned, model.router_cfg.bias_update_rate
        )
    return logs, state


# -- evaluation --------------------------------------------------------------


def evaluate(model: Model, batches: Iterable, rule: str = "train",
             depth_limit: Optional[int] = None) -> float:
    """Token-weighted mean NLL over (x, y) batches."""
    total, count = 0.0, 0
    for x, y in batches:
        out = model.forward(x, rule=rule, depth_limit=depth_limit)
        nll = T.cross_entropy(out.logits, np.asarray(y).reshape(-1))
        n = np.asarray(y).size
        total += float(nll.data) * n
        count += n
    if count == 0:
        raise ValueError("empty evaluation set")
    return total / count


def kv_similarity_report(model: Model, ids) -> dict:
    """Mean key/value norms per unrolled layer plus pairwise cosine
    similarity of the layer-mean key and value states."""
    captured = model.probe_kv(ids)
    k_means, v_means, k_norms, v_norms = [], [], [], []
    for k, v in captured:
        k64 = k.astype(np.float64)
        v64 = v.astype(np.float64)
        k_norms.append(float(np.linalg.norm(k64, axis=1).mean()))
        v_norms.append(float(np.linalg.norm(v64, axis=1).mean()))
        k_means.append(k64.mean(axis=0))
        v_means.append(v64.mean(axis=0))

    def cosine_matrix(vecs):
        stack = np.stack(vecs)
        norms = np.linalg.norm(stack, axis=1, keepdims=True)
        unit = stack / np.maximum(norms, 1e-12)
        return unit @ unit.T

    return {
        "schedule": list(model.schedule),
        "k_norms": k_norms,
        "v_norms": v_norms,
        "k_cosine": cosine_matrix(k_means).tolist(),
        "v_cosine": cosine_matrix(v_means).tolist(),
    }


@dataclass
class EvalReport:
    nll: float
    per_depth_nll: list
    dead_token_ratio: float
    sampling_accuracy: float
    max_violation: float
    entropy: float
    kv_analysis: dict = field(default_factory=dict)
    n_tokens: int = 0

    def to_dict(self) -> dict:
        return {
            "nll": self.nll,
            "per_depth_nll": list(self.per_depth_nll),
            "dead_token_ratio": self.dead_token_ratio,
            "sampling_accuracy": self.sampling_accuracy,
            "max_violation": self.max_violation,
            "entropy": self.entropy,
            "kv_analysis": self.kv_analysis,
            "n_tokens": self.n_tokens,
        }


def eval_report(model: Model, batches, per_sequence_dead: bool = False) -> EvalReport:
    from .routing import (
        assignment_counts,
        dead_token_ratio,
        final_depth_matrix,
        max_violation,
        mean_depth_distribution,
        sampling_accuracy,
        selection_entropy,
    )

    batches = list(batches)
    nr = model.cfg.n_recursions
    total, count = 0.0, 0
    final_masks = []
    counts_sum = None
    dist_sum = None
    acc_sum, acc_batches = 0.0, 0
    for x, y in batches:
        out = model.forward(x)
        nll = T.cross_entropy(out.logits, np.asarray(y).reshape(-1))
        n = np.asarray(y).size
        total += float(nll.data) * n
        count += n
        state = out.routing
        if state is None:
            continue
        final_masks.append(final_depth_matrix(state))
        c = assignment_counts(state).astype(np.float64)
        counts_sum = c if counts_sum is None else counts_sum + c
        d = mean_depth_distribution(state)
        dist_sum = d if dist_sum is None else dist_sum + d
        if model.router_cfg is not None:
            acc_sum += sampling_accuracy(state, model.router_cfg)
            acc_batches += 1

    nll_mean = total / count
    per_depth = [
        evaluate(model, batches, depth_limit=c) for c in range(1, nr)
    ] + [nll_mean]  # the unclamped pass doubles as depth N_r

    if final_masks:
        dead = dead_token_ratio(np.vstack(final_masks), per_sequence=per_sequence_dead)
        maxvio = max_violation(counts_sum)
        entropy = selection_entropy(dist_sum / len(final_masks))
        samp = acc_sum / acc_batches if acc_batches else 1.0
    else:
        dead, maxvio, entropy, samp = 0.0, 0.0, 0.0, 1.0

    kv = kv_similarity_report(model, batches[0][0]) if batches else {}
    return EvalReport(
        nll=nll_mean, per_depth_nll=per_depth, dead_token_ratio=dead,
        sampling_accuracy=samp, max_violation=maxvio, entropy=entropy,
        kv_analysis=kv, n_tokens=count,
    )


def depth_annotation(model: Model, text) -> list:
    """(token string, realized depth) pairs from a teacher-forced pass."""
    toks = encode_text(text)
    if toks.size == 0:
        return []
    ids = np.concatenate([[BOS], toks])[: model.cfg.ctx_len]
    out = model.forward(ids[None, :])
    if out.routing is None:
        depths = np.full(ids.size, model.cfg.n_recursions, dtype=np.int64)
    else:
        depths = token_depths(out.routing)
    return [(render_token(int(t)), int(d)) for t, d in zip(ids, depths)]


# -- full loop ---------------------------------------------------------------


def run_training(model: Model, tcfg: TrainConfig, out_dir=None, stream=None,
                 progress=None) -> dict:
    """Train, log, evaluate, checkpoint. Returns a summary dict with the
    step-0 and final eval NLL, logged rows, and the final report."""
    tcfg.validate()
    if stream is None:
        stream = load_corpus(tcfg.corpus)
    train_stream, held = split_stream(stream)
    rng = np.random.default_rng(tcfg.seed)
    sampler = WindowSampler(train_stream, tcfg.seq_len, tcfg.batch_size, rng)
    ev = list(eval_batches(held, tcfg.seq_len, tcfg.eval_windows, tcfg.batch_size))

    params = model.named_parameters()
    opt = AdamW(params, betas=(tcfg.beta1, tcfg.beta2), weight_decay=tcfg.weight_decay)
    nll0 = evaluate(model, ev)

    rows = []
    for step in range(tcfg.steps):
        lr = _lr_at(tcfg, step)
        x, y = sampler.next()
        try:
            logs, state = train_step(model, opt, x, y, lr, tcfg.grad_clip)
        except RuntimeError as exc:
            raise RuntimeError(f"training aborted at step {step}: {exc}") from None
        if step % tcfg.log_every == 0 or step == tcfg.steps - 1:
            row = {"step": step, "lr": lr, **logs}
            if state is not None:
                row.update(
                    telemetry_row(state, model.router_cfg, tcfg.dead_token_per_sequence)
                )
            if (step + 1) % tcfg.eval_every == 0 or step == tcfg.steps - 1:
                row["eval_nll"] = evaluate(model, ev)
            rows.append(row)
            if progress is not None:
                progress(row)

    nll_final = evaluate(model, ev)
    report = eval_report(model, ev, per_sequence_dead=tcfg.dead_token_per_sequence)
    summary = {
        "nll_step0": nll0,
        "nll_final": nll_final,
        "rows": rows,
        "report": report.to_dict(),
        "steps": tcfg.steps,
    }

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fieldnames = ["step", "lr"]
        for row in rows:
            for key in row:
                if key not in fieldnames:
                    fieldnames.append(key)
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames, restval="")
            writer.writeheader()
            writer.writerows(rows)
        with open(out_dir / "report.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        save_checkpoint(out_dir / "checkpoint.mxrc", model)
        summary["out_dir"] = str(out_dir)
    return summary
