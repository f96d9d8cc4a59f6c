"""Pure-numpy kernels: masked grouped-query attention and RMS normalization.

These are the reference implementations. The compiled extension in
``_core.pyx`` mirrors the exact signatures and must agree numerically;
``_kernels/__init__`` picks whichever is available.

Array layout conventions:
  q        [Hq, nq, dh]   query heads
  k, v     [Hkv, nk, dh]  key/value heads; Hq = n_rep * Hkv, query head h
                          reads kv head h // n_rep
  q_pos    [nq] int64     absolute position of each query row
  k_pos    [nk] int64     absolute position of each key row
  q_seq    [nq] int64     sequence id of each query row
  k_seq    [nk] int64     sequence id of each key row

A query attends key j iff the sequence ids match and k_pos[j] <= q_pos[i].
Rows may be arbitrary subsets of a batch, so the mask is rebuilt from the
position/sequence arrays on every call rather than assumed triangular.
"""

import numpy as np

BACKEND_NAME = "numpy"


def _allowed_mask(q_pos, k_pos, q_seq, k_seq):
    return (q_seq[:, None] == k_seq[None, :]) & (k_pos[None, :] <= q_pos[:, None])


def attention_forward(q, k, v, q_pos, k_pos, q_seq, k_seq, scale):
    """Returns (out [Hq, nq, dh], probs [Hq, nq, nk]).

    probs is kept for the backward pass. Raises ValueError if any query row
    has no visible key, since its softmax would be undefined.
    """
    hq, nq, dh = q.shape
    hkv, nk, _ = k.shape
    n_rep = hq // hkv
    mask = _allowed_mask(q_pos, k_pos, q_seq, k_seq)
    if nq and not mask.any(axis=1).all():
        raise ValueError("attention query with no visible key")

    kx = np.repeat(k, n_rep, axis=0)
    vx = np.repeat(v, n_rep, axis=0)
    scores = np.einsum("hid,hjd->hij", q, kx) * scale
    neg = np.finfo(q.dtype).min
    scores = np.where(mask[None, :, :], scores, neg)
    scores -= scores.max(axis=2, keepdims=True)
    expd = np.exp(scores)
    expd *= mask[None, :, :]
    probs = expd / expd.sum(axis=2, keepdims=True)
    out = np.einsum("hij,hjd->hid", probs, vx)
    return out, probs


def attention_backward(dout, probs, q, k, v, scale):
    """Returns (dq, dk, dv) given the saved softmax probabilities."""
    hq = q.shape[0]
    hkv = k.shape[0]
    n_rep = hq // hkv

    kx = np.repeat(k, n_rep, axis=0)
    vx = np.repeat(v, n_rep, axis=0)
    dp = np.einsum("hid,hjd->hij", dout, vx)
    dvx = np.einsum("hij,hid->hjd", probs, dout)
    # softmax backward; masked entries have probs == 0 and contribute nothing
    inner = (dp * probs).sum(axis=2, keepdims=True)
    ds = probs * (dp - inner)
    dq = np.einsum("hij,hjd->hid", ds, kx) * scale
    dkx = np.einsum("hij,hid->hjd", ds, q) * scale
    dk = dkx.reshape(hkv, n_rep, *dkx.shape[1:]).sum(axis=1)
    dv = dvx.reshape(hkv, n_rep, *dvx.shape[1:]).sum(axis=1)
    return dq, dk, dv


def rmsnorm_forward(x, gain, eps):
    """Returns (y, inv_rms [n]) for x [n, d] and gain [d]."""
    ms = np.mean(x * x, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    y = x * inv * gain
    return y, inv[:, 0].copy()


def rmsnorm_backward(dy, x, gain, inv_rms):
    """Returns (dx, dgain)."""
    inv = inv_rms[:, None]
    dgain = (dy * x * inv).sum(axis=0)
    a = dy * gain
    d = x.shape[1]
    proj = (a * x).sum(axis=1, keepdims=True) / d
    dx = a * inv - x * (inv**3) * proj
    return dx, dgain
