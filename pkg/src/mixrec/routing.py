"""Per-token recursion-depth routing: selection rules, heads, losses, metrics.

Two families:

- ``expert_choice``: every recursion depth owns a scoring head and picks the
  top-k scoring tokens of each sequence (k = floor(capacity * seq_len)).
  Depths filter hierarchically: only tokens that survived depth r are
  candidates at depth r+1, so selections nest by construction. At inference
  the capacity is unavailable (it would need future tokens), so a token
  continues while its score clears a threshold, or while a separately
  trained auxiliary head says it would have been picked.

- ``token_choice``: one head scores all depths from the first recursion
  input and each token commits to the argmax depth up front. No causality
  problem, but nothing enforces balance, hence the balancing loss / the
  loss-free bias alternative.

Scores do double duty: they decide selection and they scale the update
(gate = alpha * score), which is what lets gradients reach the router.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .config import RouterConfig
from .tensor import Tensor

# -- capacity schedule -------------------------------------------------------


def capacity_schedule(n_recursions: int, override=None) -> tuple:
    """Fraction of tokens processed at each depth, j = 1..n.

    Default is the linear taper (n - j + 1) / n, e.g. (1, 2/3, 1/3) for
    n = 3: everyone runs the first recursion, a third survive to the last.
    """
    if override is not None:
        caps = tuple(float(c) for c in override)
        if len(caps) != n_recursions:
            raise ValueError("capacity override length must equal n_recursions")
        return caps
    n = n_recursions
    return tuple((n - j + 1) / n for j in range(1, n + 1))


# -- selection ---------------------------------------------------------------


def topk_per_sequence(scores: np.ndarray, seq_ids: np.ndarray, n_seqs: int, k: int):
    """Boolean mask of the top-k rows per sequence, ties to the lower row index.

    Returns (mask, shortfall): shortfall is True when some sequence had
    fewer than k candidate rows, in which case all of them are taken.
    """
    mask = np.zeros(scores.shape[0], dtype=bool)
    shortfall = False
    for s in range(n_seqs):
        rows = np.nonzero(seq_ids == s)[0]
        if rows.size <= k:
            mask[rows] = True
            shortfall = shortfall or rows.size < k
            continue
        # lexsort: primary key last -> sort by -score, break ties on row index
        order = np.lexsort((rows, -scores[rows]))
        mask[rows[order[:k]]] = True
    return mask, shortfall


# -- scoring heads -----------------------------------------------------------


class Head:
    """Bias-free scoring head: linear, or a GELU MLP (optionally 4x wide)."""

    def __init__(self, kind: str, d_model: int, out_dim: int, rng, dtype):
        self.kind = kind
        self.out_dim = out_dim
        hidden = {"mlp": d_model, "wide_mlp": 4 * d_model}.get(kind)
        def init(shape):
            return Tensor((rng.normal(size=shape) * 0.02).astype(dtype), requires_grad=True)
        if kind == "linear":
            self.params = {"w0": init((d_model, out_dim))}
        else:
            self.params = {"w0": init((d_model, hidden)), "w1": init((hidden, out_dim))}

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "linear":
            out = T.matmul(x, self.params["w0"])
        else:
            out = T.matmul(T.gelu(T.matmul(x, self.params["w0"])), self.params["w1"])
        if self.out_dim == 1:
            return T.gather_cols(out, np.zeros(out.shape[0], dtype=np.int64))
        return out


class Router:
    """Owns the routing parameters for one model."""

    def __init__(self, cfg: RouterConfig, d_model: int, n_recursions: int, rng, dtype):
        self.cfg = cfg
        self.n_recursions = n_recursions
        self.heads: list[Head] = []
        self.aux_heads: list[Head] = []
        self.bias: Optional[np.ndarray] = None
        if cfg.family == "expert_choice":
            self.heads = [Head(cfg.head, d_model, 1, rng, dtype) for _ in range(n_recursions)]
            if cfg.scheme == "aux_router":
                self.aux_heads = [
                    Head(cfg.head, d_model, 1, rng, dtype) for _ in range(n_recursions)
                ]
        else:
            self.heads = [Head(cfg.head, d_model, n_recursions, rng, dtype)]
            if cfg.scheme == "loss_free":
                # float32 so checkpoints round-trip the buffer bit for bit
                self.bias = np.zeros(n_recursions, dtype=np.float32)

    def named_parameters(self) -> dict:
        out = {}
        for r, head in enumerate(self.heads, 1):
            for pname, p in head.params.items():
                out[f"router.depth{r}.{pname}"] = p
        for r, head in enumerate(self.aux_heads, 1):
            for pname, p in head.params.items():
                out[f"router.aux{r}.{pname}"] = p
        return out

    def named_buffers(self) -> dict:
        return {} if self.bias is None else {"router.bias": self.bias}

    def activation(self, logits: Tensor) -> Tensor:
        act = self.cfg.activation
        if act == "sigmoid":
            return T.sigmoid(logits)
        if act == "tanh":
            return T.tanh(logits)
        return T.softmax(logits)


# -- per-forward routing record ---------------------------------------------


@dataclass
class StepTrace:
    """What one recursion depth did to one batch."""

    depth: int
    live_rows: np.ndarray          # candidates entering this depth
    selected_rows: np.ndarray      # rows actually processed (sorted)
    k: Optional[int]               # top-k size, None under inference rules
    shortfall: bool
    logits: Optional[Tensor]       # raw head outputs over live rows
    scores: Optional[Tensor]       # activation outputs over live rows
    sel_in_live: Optional[np.ndarray] = None   # positions of selected within live
    aux_scores: Optional[Tensor] = None        # aux-router sigmoid outputs


@dataclass
class RoutingState:
    family: str
    n_rows: int
    n_seqs: int
    seq_len: int
    steps: list = field(default_factory=list)
    logits: Optional[Tensor] = None    # token_choice raw head outputs [n, N_r]
    probs: Optional[Tensor] = None     # token_choice activation outputs
    assigned: Optional[np.ndarray] = None  # token_choice committed depths 1..N_r


# -- losses ------------------------------------------------------------------


def aux_loss(state: RoutingState) -> Optional[Tensor]:
    """BCE pushing each depth's scores toward its own top-k membership."""
    terms = []
    for step in state.steps:
        if step.scores is None or step.live_rows.size == 0:
            continue
        targets = np.zeros(step.live_rows.size, dtype=np.float64)
        targets[step.sel_in_live] = 1.0
        terms.append(T.binary_cross_entropy(step.scores, targets))
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def aux_router_loss(state: RoutingState) -> Optional[Tensor]:
    """BCE on the gradient-isolated auxiliary heads against the main top-k."""
    terms = []
    for step in state.steps:
        if step.aux_scores is None or step.live_rows.size == 0:
            continue
        targets = np.zeros(step.live_rows.size, dtype=np.float64)
        targets[step.sel_in_live] = 1.0
        terms.append(T.binary_cross_entropy(step.aux_scores, targets))
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def balance_loss(state: RoutingState) -> Optional[Tensor]:
    """sum_i f_i * P_i: assignment fractions (scaled by N_r) times mean scores.

    Perfectly uniform assignment gives f_i = 1 for every depth, so the loss
    gradient pushes probability mass toward underused depths.
    """
    if state.family != "token_choice" or state.probs is None:
        return None
    n = state.probs.shape[1]
    counts = np.bincount(state.assigned - 1, minlength=n).astype(np.float64)
    f = counts * (n / state.n_rows)
    p_mean = T.tmean(state.probs, 0)
    return (p_mean * f.astype(state.probs.data.dtype)).sum()


def z_loss(state: RoutingState) -> Optional[Tensor]:
    """Mean squared log-partition of the raw head outputs (keeps logits tame)."""
    if state.family == "token_choice":
        if state.logits is None:
            return None
        lse = T.logsumexp(state.logits)
        return T.tmean(lse * lse)
    terms = []
    for step in state.steps:
        if step.logits is None or step.live_rows.size == 0:
            continue
        terms.append(T.tmean(step.logits * step.logits))
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def combined_router_loss(state: RoutingState, cfg: RouterConfig) -> tuple:
    """Returns (total Tensor or None, {component: float}) per the scheme."""
    total = None
    logs = {}

    def accumulate(term, coeff, name):
        nonlocal total
        if term is None or coeff == 0.0:
            logs[name] = 0.0
            return
        logs[name] = float(term.data)
        scaled = term * coeff
        total = scaled if total is None else total + scaled

    if state.family == "expert_choice":
        if cfg.scheme == "aux_loss":
            accumulate(aux_loss(state), cfg.aux_coeff, "aux")
        else:
            accumulate(aux_router_loss(state), cfg.aux_coeff, "aux_router")
    else:
        if cfg.scheme == "balance_loss":
            accumulate(balance_loss(state), cfg.balance_coeff, "balance")
        else:
            logs["balance"] = 0.0  # loss-free relies on the bias update
    accumulate(z_loss(state), cfg.z_coeff, "z")
    return total, logs


def loss_free_bias_update(bias: np.ndarray, assigned: np.ndarray, rate: float) -> None:
    """Nudges selection biases toward uniform load; affects argmax only."""
    n = bias.shape[0]
    counts = np.bincount(assigned - 1, minlength=n).astype(np.float64)
    err = counts.mean() - counts
    bias += rate * np.sign(err)


# -- metrics -----------------------------------------------------------------


def max_violation(counts: np.ndarray) -> float:
    """(max load - mean load) / mean load; 0 means perfectly uniform."""
    counts = np.asarray(counts, dtype=np.float64)
    mean = counts.mean()
    if mean == 0:
        return 0.0
    return float((counts.max() - mean) / mean)


def selection_entropy(mean_probs: np.ndarray) -> float:
    """Entropy (nats) of the average routing distribution."""
    p = np.asarray(mean_probs, dtype=np.float64)
    p = p / p.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def depth_counts(state: RoutingState) -> np.ndarray:
    """Tokens processed at each depth (expert: selected; token: assigned >= r)."""
    n = max(len(state.steps), 1)
    if state.family == "token_choice" and state.assigned is not None:
        nr = int(state.assigned.max(initial=1))
        nr = max(nr, len(state.steps))
        return np.array([(state.assigned >= r).sum() for r in range(1, nr + 1)])
    return np.array([s.selected_rows.size for s in state.steps[:n]])


def assignment_counts(state: RoutingState) -> np.ndarray:
    """Tokens whose final depth is exactly r (exclusive histogram)."""
    if state.family == "token_choice" and state.assigned is not None:
        nr = len(state.steps) or int(state.assigned.max(initial=1))
        return np.bincount(state.assigned - 1, minlength=nr)
    proc = depth_counts(state)
    out = []
    for r in range(len(proc)):
        nxt = proc[r + 1] if r + 1 < len(proc) else 0
        out.append(proc[r] - nxt)
    return np.array(out)


def mean_depth_distribution(state: RoutingState) -> np.ndarray:
    """Average routing distribution used for the entropy metric."""
    if state.family == "token_choice" and state.probs is not None:
        return state.probs.data.mean(axis=0)
    means = []
    for step in state.steps:
        if step.scores is None or step.scores.shape[0] == 0:
            means.append(0.0)
        else:
            means.append(float(np.abs(step.scores.data).mean()))
    arr = np.asarray(means, dtype=np.float64)
    return arr / arr.sum() if arr.sum() > 0 else np.full(len(means), 1.0 / max(len(means), 1))


def sampling_accuracy(state: RoutingState, cfg: RouterConfig) -> float:
    """Agreement between the deployable selection rule and teacher-forced
    top-k membership, over every (live token, depth) pair.

    Drops whenever the fixed threshold misses the realized top-k boundary;
    a well-trained aux objective pins the boundary at the threshold and
    drives this toward 1.
    """
    if state.family != "expert_choice":
        return 1.0  # token choice deploys the same argmax it trained with
    hits = 0
    total = 0
    for step in state.steps:
        if step.scores is None or step.live_rows.size == 0:
            continue
        targets = np.zeros(step.live_rows.size, dtype=bool)
        targets[step.sel_in_live] = True
        source = step.aux_scores if cfg.scheme == "aux_router" else step.scores
        preds = source.data > cfg.threshold
        hits += int((preds == targets).sum())
        total += targets.size
    return hits / total if total else 1.0


def dead_token_ratio(final_selected: np.ndarray, per_sequence: bool = False) -> float:
    """final_selected: [n_seqs, seq_len] bool, True if the position was
    processed at the last recursion depth.

    Default: a position is dead when *no* sequence in the batch selects it
    (positional starvation). ``per_sequence`` instead averages the fraction
    of unselected positions within each sequence.
    """
    final_selected = np.asarray(final_selected, dtype=bool)
    if per_sequence:
        return float(1.0 - final_selected.mean())
    return float((~final_selected.any(axis=0)).mean())


def score_quantiles(state: RoutingState, qs=(0.1, 0.5, 0.9)) -> dict:
    out = {}
    for step in state.steps:
        if step.scores is None or step.scores.shape[0] == 0:
            vals = [float("nan")] * len(qs)
        else:
            vals = np.quantile(step.scores.data.astype(np.float64), qs).tolist()
        for q, v in zip(qs, vals):
            out[f"score_d{step.depth}_q{int(q * 100)}"] = v
    return out


def token_depths(state: RoutingState) -> np.ndarray:
    """Realized recursion depth of every row (0 if never selected)."""
    if state.family == "token_choice" and state.assigned is not None:
        return state.assigned.copy()
    depth = np.zeros(state.n_rows, dtype=np.int64)
    for step in state.steps:
        depth[step.selected_rows] += 1  # selections nest, so counting works
    return depth


def final_depth_matrix(state: RoutingState) -> np.ndarray:
    """[n_seqs, seq_len] bool: processed at the deepest recursion."""
    mat = np.zeros(state.n_rows, dtype=bool)
    if state.steps:
        mat[state.steps[-1].selected_rows] = True
    return mat.reshape(state.n_seqs, state.seq_len)


def telemetry_row(state: RoutingState, cfg: RouterConfig, per_sequence_dead=False) -> dict:
    """One flat record of router health for the metrics CSV."""
    row: dict = {}
    counts = depth_counts(state)
    for r, c in enumerate(counts, 1):
        row[f"depth{r}_count"] = int(c)
    row.update(score_quantiles(state))
    row["max_violation"] = max_violation(assignment_counts(state))
    row["entropy"] = selection_entropy(mean_depth_distribution(state))
    row["sampling_accuracy"] = sampling_accuracy(state, cfg)
    row["dead_token_ratio"] = dead_token_ratio(
        final_depth_matrix(state), per_sequence=per_sequence_dead
    )
    return row
