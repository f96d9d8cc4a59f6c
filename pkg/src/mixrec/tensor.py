"""Dense tensors with reverse-mode automatic differentiation.

Minimal by design: numpy holds the raw arrays, this module owns the graph.
Every operation records its parents and a backward closure; ``backward()``
walks the graph once in reverse topological order and accumulates gradients
into ``.grad``. Only float32/float64 are supported and dtypes never mix
silently.

Non-finite values are treated as bugs, not data: after every op the output
is checked and a FloatingPointError naming the op is raised immediately
(disable with ``finite_check(False)`` if an experiment needs to run hot).
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels

_CHECK_FINITE = True


def finite_check(enabled: bool) -> None:
    """Globally enable/disable the per-op NaN/Inf guard."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _guard(data, op):
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    return data


def _as_array(value, dtype):
    arr = np.asarray(value, dtype=dtype)
    return arr


class Tensor:
    """A numpy array plus the autograd bookkeeping attached to it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward_fn

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's data, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph walk ----------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulates d(self)/d(leaf) into every reachable ``.grad``.

        ``grad`` defaults to ones and must match this tensor's shape; for the
        usual scalar loss that is just 1.0.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ValueError("backward seed shape mismatch")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))

        self._accum(grad)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def _accum(self, grad) -> None:
        # own the buffer on first write: later += must not mutate a shared array
        if self.grad is None:
            self.grad = np.array(grad, copy=True)
        else:
            self.grad += grad

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        if isinstance(value.data, np.ndarray) and value.data.dtype != like.data.dtype:
            raise TypeError(
                f"dtype mismatch: {value.data.dtype} vs {like.data.dtype}"
            )
        return value
    return Tensor(_as_array(value, like.data.dtype))


def _make(data, parents, backward_fn, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(
        _guard(data, op),
        requires_grad=req,
        _parents=tuple(p for p in parents if p.requires_grad),
        _backward_fn=backward_fn if req else None,
    )


def _unbroadcast(grad, shape):
    """Sums ``grad`` back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic --------------------------------------------------------------


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    a = _wrap(a, b)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "add")


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _wrap(b, a)
    a = _wrap(a, b)
    with np.errstate(invalid="ignore", over="ignore"):
        out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward_fn, "mul")


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False):
    """2-D matrix product ``a @ b`` (or ``a @ b.T`` with ``transpose_b``)."""
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
    bd = b.data.T if transpose_b else b.data
    # inf * 0 inside a poisoned product warns before the finite guard trips
    with np.errstate(invalid="ignore", over="ignore"):
        out_data = a.data @ bd

    def backward_fn(g):
        if a.requires_grad:
            a._accum(g @ bd.T)
        if b.requires_grad:
            gb = a.data.T @ g
            b._accum(gb.T if transpose_b else gb)

    return _make(out_data, (a, b), backward_fn, "matmul")


def tsum(x: Tensor, axis=None):
    out_data = x.data.sum(axis=axis)

    def backward_fn(g):
        if axis is None:
            x._accum(np.broadcast_to(g, x.data.shape).copy())
        else:
            x._accum(np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return _make(out_data, (x,), backward_fn, "sum")


def tmean(x: Tensor, axis=None):
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


# -- pointwise nonlinearities ------------------------------------------------


def sigmoid(x: Tensor):
    with np.errstate(over="ignore"):
        out_data = 1.0 / (1.0 + np.exp(-x.data))

    def backward_fn(g):
        x._accum(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward_fn, "sigmoid")


def tanh(x: Tensor):
    out_data = np.tanh(x.data)

    def backward_fn(g):
        x._accum(g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), backward_fn, "tanh")


def silu(x: Tensor):
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * sig

    def backward_fn(g):
        x._accum(g * sig * (1.0 + x.data * (1.0 - sig)))

    return _make(out_data, (x,), backward_fn, "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor):
    """tanh-approximated GELU (used only inside MLP router heads)."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out_data = 0.5 * xd * (1.0 + th)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        dx = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner
        x._accum(g * dx)

    return _make(out_data, (x,), backward_fn, "gelu")


def softmax(x: Tensor, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        x._accum(out_data * (g - inner))

    return _make(out_data, (x,), backward_fn, "softmax")


def logsumexp(x: Tensor, axis=-1):
    mx = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - mx)
    s = e.sum(axis=axis, keepdims=True)
    out_data = np.squeeze(mx + np.log(s), axis=axis)
    soft = e / s

    def backward_fn(g):
        x._accum(np.expand_dims(g, axis) * soft)

    return _make(out_data, (x,), backward_fn, "logsumexp")


# -- normalization and attention --------------------------------------------


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5):
    y, inv_rms = _kernels.rmsnorm_forward(
        np.ascontiguousarray(x.data), np.ascontiguousarray(gain.data), eps
    )

    def backward_fn(g):
        dx, dgain = _kernels.rmsnorm_backward(
            np.ascontiguousarray(g), np.ascontiguousarray(x.data),
            np.ascontiguousarray(gain.data), inv_rms,
        )
        if x.requires_grad:
            x._accum(dx)
        if gain.requires_grad:
            gain._accum(dgain)

    return _make(y, (x, gain), backward_fn, "rmsnorm")


def _to_heads(flat, n_heads, d_head):
    n = flat.shape[0]
    return np.ascontiguousarray(flat.reshape(n, n_heads, d_head).transpose(1, 0, 2))


def _from_heads(stacked):
    h, n, dh = stacked.shape
    return stacked.transpose(1, 0, 2).reshape(n, h * dh)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    q_pos,
    k_pos,
    q_seq,
    k_seq,
    n_heads: int,
    n_kv_heads: int,
    d_head: int,
):
    """Masked scaled-dot-product attention over arbitrary row subsets.

    q is [nq, n_heads*d_head]; k/v are [nk, n_kv_heads*d_head]. Visibility:
    same sequence id and key position <= query position. Rows can be any
    subset of a batch (routing selects them), hence explicit positions.
    """
    q_pos = np.ascontiguousarray(q_pos, dtype=np.int64)
    k_pos = np.ascontiguousarray(k_pos, dtype=np.int64)
    q_seq = np.ascontiguousarray(q_seq, dtype=np.int64)
    k_seq = np.ascontiguousarray(k_seq, dtype=np.int64)
    qh = _to_heads(q.data, n_heads, d_head)
    kh = _to_heads(k.data, n_kv_heads, d_head)
    vh = _to_heads(v.data, n_kv_heads, d_head)
    scale = 1.0 / math.sqrt(d_head)
    out, probs = _kernels.attention_forward(qh, kh, vh, q_pos, k_pos, q_seq, k_seq, scale)

    def backward_fn(g):
        gh = _to_heads(g, n_heads, d_head)
        dq, dk, dv = _kernels.attention_backward(
            np.ascontiguousarray(gh), probs, qh, kh, vh, scale
        )
        if q.requires_grad:
            q._accum(_from_heads(dq))
        if k.requires_grad:
            k._accum(_from_heads(dk))
        if v.requires_grad:
            v._accum(_from_heads(dv))

    return _make(_from_heads(out), (q, k, v), backward_fn, "attention")


def rope(x: Tensor, pos, n_heads: int, d_head: int, base: float = 10000.0):
    """Rotary position encoding applied per head over absolute positions.

    Uses the half-split rotation: the first d_head/2 lanes pair with the
    last d_head/2. Angles are computed in float64 for every row so that a
    row's encoding never depends on which other rows are in the batch.
    """
    if d_head % 2:
        raise ValueError("rotary encoding needs an even head dimension")
    pos = np.asarray(pos, dtype=np.float64)
    half = d_head // 2
    freqs = base ** (-np.arange(0, half, dtype=np.float64) * 2.0 / d_head)
    ang = pos[:, None] * freqs[None, :]
    cos = np.cos(ang).astype(x.data.dtype)[:, None, :]
    sin = np.sin(ang).astype(x.data.dtype)[:, None, :]

    n = x.data.shape[0]
    xh = x.data.reshape(n, n_heads, d_head)
    x1, x2 = xh[..., :half], xh[..., half:]
    out = np.empty_like(xh)
    out[..., :half] = x1 * cos - x2 * sin
    out[..., half:] = x2 * cos + x1 * sin

    def backward_fn(g):
        gh = g.reshape(n, n_heads, d_head)
        g1, g2 = gh[..., :half], gh[..., half:]
        dx = np.empty_like(gh)
        dx[..., :half] = g1 * cos + g2 * sin
        dx[..., half:] = g2 * cos - g1 * sin
        x._accum(dx.reshape(n, n_heads * d_head))

    return _make(out.reshape(n, n_heads * d_head), (x,), backward_fn, "rope")


# -- gathers, scatters, shaping ---------------------------------------------


def embedding(table: Tensor, ids):
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def backward_fn(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        table._accum(dt)

    return _make(out_data, (table,), backward_fn, "embedding")


def take_rows(x: Tensor, idx):
    idx = np.asarray(idx, dtype=np.int64)
    out_data = x.data[idx]

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        x._accum(dx)

    return _make(out_data, (x,), backward_fn, "take_rows")


def index_add_rows(x: Tensor, idx, y: Tensor):
    """x with y added into rows ``idx`` (idx must not repeat)."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("index_add_rows requires unique row indices")
    out_data = x.data.copy()
    out_data[idx] += y.data

    def backward_fn(g):
        if x.requires_grad:
            x._accum(g)
        if y.requires_grad:
            y._accum(g[idx])

    return _make(out_data, (x, y), backward_fn, "index_add_rows")


def scale_rows(x: Tensor, s: Tensor):
    """Each row of x multiplied by the matching scalar in s ([n] vector)."""
    s = _wrap(s, x)
    out_data = x.data * s.data[:, None]

    def backward_fn(g):
        if x.requires_grad:
            x._accum(g * s.data[:, None])
        if s.requires_grad:
            s._accum((g * x.data).sum(axis=1))

    return _make(out_data, (x, s), backward_fn, "scale_rows")


def gather_cols(x: Tensor, idx):
    """out[i] = x[i, idx[i]] for a 2-D x."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    out_data = x.data[rows, idx]

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[rows, idx] = g
        x._accum(dx)

    return _make(out_data, (x,), backward_fn, "gather_cols")


def concat_rows(parts):
    parts = list(parts)
    out_data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accum(g[a:b])

    return _make(out_data, tuple(parts), backward_fn, "concat_rows")


def slice_rows(x: Tensor, start: int, stop: int):
    out_data = x.data[start:stop].copy()

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        x._accum(dx)

    return _make(out_data, (x,), backward_fn, "slice_rows")


# -- losses ------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.data.shape[0]
    mx = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - mx)
    z = e.sum(axis=1, keepdims=True)
    logp = logits.data - mx - np.log(z)
    out_data = np.asarray(-logp[np.arange(n), targets].mean(), dtype=logits.data.dtype)
    soft = e / z

    def backward_fn(g):
        dl = soft.copy()
        dl[np.arange(n), targets] -= 1.0
        logits._accum(dl * (g / n))

    return _make(out_data, (logits,), backward_fn, "cross_entropy")


def binary_cross_entropy(probs: Tensor, targets, clamp: float = 1e-7):
    """Mean BCE of probabilities against constant 0/1 targets.

    Probabilities are clamped to [clamp, 1-clamp] inside the logs; the
    clamp is straight-through for gradients so saturated scores still move.
    """
    targets = np.asarray(targets, dtype=probs.data.dtype)
    p = np.clip(probs.data, clamp, 1.0 - clamp)
    n = probs.data.size
    out_data = np.asarray(
        -(targets * np.log(p) + (1.0 - targets) * np.log1p(-p)).mean(),
        dtype=probs.data.dtype,
    )

    def backward_fn(g):
        dp = (-targets / p + (1.0 - targets) / (1.0 - p)) / n
        probs._accum(dp.astype(probs.data.dtype) * g)

    return _make(out_data, (probs,), backward_fn, "binary_cross_entropy")
