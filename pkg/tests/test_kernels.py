"""Numerical parity between the compiled kernels and the numpy fallback."""

import numpy as np
import pytest

from mixrec import _kernels

BACKENDS = _kernels.get_backends()
HAVE_COMPILED = "compiled" in BACKENDS


def _attention_inputs(rng, dtype, hq=4, hkv=2, nq=7, nk=11, dh=6):
    q = rng.normal(size=(hq, nq, dh)).astype(dtype)
    k = rng.normal(size=(hkv, nk, dh)).astype(dtype)
    v = rng.normal(size=(hkv, nk, dh)).astype(dtype)
    k_pos = np.concatenate([np.arange(6), np.arange(5)]).astype(np.int64)
    k_seq = np.concatenate([np.zeros(6), np.ones(5)]).astype(np.int64)
    pick = rng.choice(nk, size=nq, replace=False)
    pick.sort()
    q_pos = k_pos[pick].copy()
    q_seq = k_seq[pick].copy()
    return q, k, v, q_pos, k_pos, q_seq, k_seq


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled kernels unavailable")
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
def test_attention_parity(dtype, tol):
    rng = np.random.default_rng(7)
    q, k, v, q_pos, k_pos, q_seq, k_seq = _attention_inputs(rng, dtype)
    scale = 1.0 / np.sqrt(q.shape[2])
    dout = rng.normal(size=q.shape).astype(dtype)
    outs = {}
    for name, mod in BACKENDS.items():
        out, probs = mod.attention_forward(q, k, v, q_pos, k_pos, q_seq, k_seq, scale)
        dq, dk, dv = mod.attention_backward(dout, probs, q, k, v, scale)
        outs[name] = (out, probs, dq, dk, dv)
    for a, b in zip(outs["numpy"], outs["compiled"]):
        np.testing.assert_allclose(a, b, atol=tol, rtol=tol)


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled kernels unavailable")
@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12)])
def test_rmsnorm_parity(dtype, tol):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(9, 12)).astype(dtype)
    gain = rng.normal(size=12).astype(dtype) + 1.0
    dy = rng.normal(size=(9, 12)).astype(dtype)
    res = {}
    for name, mod in BACKENDS.items():
        y, inv = mod.rmsnorm_forward(x, gain, 1e-5)
        dx, dgain = mod.rmsnorm_backward(dy, x, gain, inv)
        res[name] = (y, inv, dx, dgain)
    for a, b in zip(res["numpy"], res["compiled"]):
        np.testing.assert_allclose(a, b, atol=tol, rtol=tol)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_attention_probs_respect_mask(backend):
    rng = np.random.default_rng(11)
    q, k, v, q_pos, k_pos, q_seq, k_seq = _attention_inputs(rng, np.float64)
    mod = BACKENDS[backend]
    _, probs = mod.attention_forward(q, k, v, q_pos, k_pos, q_seq, k_seq, 0.5)
    allowed = (q_seq[:, None] == k_seq[None, :]) & (k_pos[None, :] <= q_pos[:, None])
    assert (probs[:, ~allowed] == 0).all()
    np.testing.assert_allclose(probs.sum(axis=2), 1.0, atol=1e-12)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_attention_single_query_matches_batch_row(backend):
    # decode-style single-row call must reproduce the batched row closely
    rng = np.random.default_rng(5)
    q, k, v, q_pos, k_pos, q_seq, k_seq = _attention_inputs(rng, np.float64)
    mod = BACKENDS[backend]
    full, _ = mod.attention_forward(q, k, v, q_pos, k_pos, q_seq, k_seq, 0.4)
    i = 3
    one, _ = mod.attention_forward(
        np.ascontiguousarray(q[:, i : i + 1]), k, v,
        q_pos[i : i + 1], k_pos, q_seq[i : i + 1], k_seq, 0.4,
    )
    np.testing.assert_allclose(one[:, 0], full[:, i], atol=1e-13)
