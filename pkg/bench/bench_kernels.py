#!/usr/bin/env python3
"""Times the hot kernels on every importable backend.

Runs causal self-attention and rmsnorm, forward and backward, on the
compiled extension and the numpy fallback, then prints per-call times and
the compiled-over-numpy speedup. Also checks that both backends agree to
float tolerance on identical inputs, so a miscompiled extension fails loudly
here before it corrupts a training run.

Usage: python3 bench/bench_kernels.py [--reps N] [--warmup N]
"""

import argparse
import time

import numpy as np

from mixrec._kernels import get_backends


def _attention_case(n_seqs, seq_len, n_heads, n_kv_heads, d_head, dtype, rng):
    nq = n_seqs * seq_len
    q = rng.normal(size=(n_heads, nq, d_head)).astype(dtype)
    k = rng.normal(size=(n_kv_heads, nq, d_head)).astype(dtype)
    v = rng.normal(size=(n_kv_heads, nq, d_head)).astype(dtype)
    pos = np.tile(np.arange(seq_len, dtype=np.int64), n_seqs)
    seq = np.repeat(np.arange(n_seqs, dtype=np.int64), seq_len)
    scale = 1.0 / np.sqrt(d_head)
    dout = rng.normal(size=(n_heads, nq, d_head)).astype(dtype)
    return q, k, v, pos, seq, scale, dout


def _time(fn, reps, warmup):
    for _ in range(warmup):
        fn()
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_attention(backends, label, shape, dtype, reps, warmup):
    rng = np.random.default_rng(7)
    q, k, v, pos, seq, scale, dout = _attention_case(*shape, dtype, rng)
    rows = {}
    outs = {}
    for name, mod in backends.items():
        out, probs = mod.attention_forward(q, k, v, pos, pos, seq, seq, scale)
        outs[name] = out
        fwd = _time(lambda: mod.attention_forward(q, k, v, pos, pos, seq, seq, scale),
                    reps, warmup)
        bwd = _time(lambda: mod.attention_backward(dout, probs, q, k, v, scale),
                    reps, warmup)
        rows[name] = (fwd, bwd)
    _report(f"attention {label}", rows, outs)


def bench_rmsnorm(backends, label, n, d, dtype, reps, warmup):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(n, d)).astype(dtype)
    gain = rng.normal(size=d).astype(dtype)
    dy = rng.normal(size=(n, d)).astype(dtype)
    rows = {}
    outs = {}
    for name, mod in backends.items():
        y, inv = mod.rmsnorm_forward(x, gain, 1e-6)
        outs[name] = y
        fwd = _time(lambda: mod.rmsnorm_forward(x, gain, 1e-6), reps, warmup)
        bwd = _time(lambda: mod.rmsnorm_backward(dy, x, gain, inv), reps, warmup)
        rows[name] = (fwd, bwd)
    _report(f"rmsnorm {label}", rows, outs)


def _report(label, rows, outs):
    print(f"\n{label}")
    for name, (fwd, bwd) in rows.items():
        print(f"  {name:<9} forward {fwd * 1e3:8.3f} ms   backward {bwd * 1e3:8.3f} ms")
    if len(rows) == 2:
        nf, nb = rows["numpy"]
        cf, cb = rows["compiled"]
        diff = float(np.abs(outs["numpy"] - outs["compiled"]).max())
        print(f"  speedup   forward {nf / cf:7.2f}x     backward {nb / cb:7.2f}x")
        print(f"  max |numpy - compiled| = {diff:.2e}")
        if diff > 1e-4:
            raise SystemExit(f"backend mismatch on {label}: {diff:.3e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20, help="timed repetitions (best-of)")
    ap.add_argument("--warmup", type=int, default=3)
    args = ap.parse_args()

    backends = get_backends()
    print(f"backends available: {', '.join(backends)}")
    if "compiled" not in backends:
        print("compiled extension not importable; timing the fallback only")

    # (n_seqs, seq_len, n_heads, n_kv_heads, d_head)
    bench_attention(backends, "B=8 T=128 H=4/2 dh=16 (toy training shape)",
                    (8, 128, 4, 2, 16), np.float32, args.reps, args.warmup)
    bench_attention(backends, "B=1 T=512 H=8/4 dh=64", (1, 512, 8, 4, 64),
                    np.float32, max(args.reps // 4, 3), args.warmup)
    bench_rmsnorm(backends, "n=1024 d=64 (toy training shape)", 1024, 64,
                  np.float32, args.reps, args.warmup)
    bench_rmsnorm(backends, "n=4096 d=512", 4096, 512, np.float32,
                  max(args.reps // 4, 3), args.warmup)


if __name__ == "__main__":
    main()
