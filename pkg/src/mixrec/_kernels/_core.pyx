# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: masked grouped-query attention and RMS normalization.

Same contracts as ``_numpy``; see that module for the layout notes. The
compiled path walks only the keys each query is allowed to see, so it skips
the cross-sequence and acausal work the dense fallback merely masks out.
"""

import numpy as np

cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, sqrt

cnp.import_array()

BACKEND_NAME = "compiled"


def attention_forward(
    floating[:, :, ::1] q,
    floating[:, :, ::1] k,
    floating[:, :, ::1] v,
    cnp.int64_t[::1] q_pos,
    cnp.int64_t[::1] k_pos,
    cnp.int64_t[::1] q_seq,
    cnp.int64_t[::1] k_seq,
    double scale,
):
    cdef Py_ssize_t hq = q.shape[0], nq = q.shape[1], dh = q.shape[2]
    cdef Py_ssize_t hkv = k.shape[0], nk = k.shape[1]
    cdef Py_ssize_t n_rep = hq // hkv
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((hq, nq, dh), dtype=dtype)
    probs_arr = np.zeros((hq, nq, nk), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef floating[:, :, ::1] probs = probs_arr
    cdef double[::1] row = np.empty(nk, dtype=np.float64)

    cdef Py_ssize_t h, g, i, j, d
    cdef double acc, mx, ssum, p
    cdef cnp.int64_t qp, qs
    cdef bint any_key
    for h in range(hq):
        g = h // n_rep
        for i in range(nq):
            qp = q_pos[i]
            qs = q_seq[i]
            mx = -1e308
            any_key = False
            for j in range(nk):
                if k_seq[j] != qs or k_pos[j] > qp:
                    continue
                acc = 0.0
                for d in range(dh):
                    acc += <double> q[h, i, d] * <double> k[g, j, d]
                row[j] = acc * scale
                if not any_key or row[j] > mx:
                    mx = row[j]
                any_key = True
            if not any_key:
                raise ValueError("attention query with no visible key")
            ssum = 0.0
            for j in range(nk):
                if k_seq[j] != qs or k_pos[j] > qp:
                    continue
                row[j] = exp(row[j] - mx)
                ssum += row[j]
            for j in range(nk):
                if k_seq[j] != qs or k_pos[j] > qp:
                    continue
                p = row[j] / ssum
                probs[h, i, j] = <floating> p
                for d in range(dh):
                    out[h, i, d] += <floating> (p * <double> v[g, j, d])
    return out_arr, probs_arr


def attention_backward(
    floating[:, :, ::1] dout,
    floating[:, :, ::1] probs,
    floating[:, :, ::1] q,
    floating[:, :, ::1] k,
    floating[:, :, ::1] v,
    double scale,
):
    cdef Py_ssize_t hq = q.shape[0], nq = q.shape[1], dh = q.shape[2]
    cdef Py_ssize_t hkv = k.shape[0], nk = k.shape[1]
    cdef Py_ssize_t n_rep = hq // hkv
    dtype = np.float32 if floating is float else np.float64
    dq_arr = np.zeros((hq, nq, dh), dtype=dtype)
    dk_arr = np.zeros((hkv, nk, dh), dtype=dtype)
    dv_arr = np.zeros((hkv, nk, dh), dtype=dtype)
    cdef floating[:, :, ::1] dq = dq_arr
    cdef floating[:, :, ::1] dk = dk_arr
    cdef floating[:, :, ::1] dv = dv_arr
    cdef double[::1] dp = np.empty(nk, dtype=np.float64)

    cdef Py_ssize_t h, g, i, j, d
    cdef double inner, ds, pij
    for h in range(hq):
        g = h // n_rep
        for i in range(nq):
            inner = 0.0
            for j in range(nk):
                pij = probs[h, i, j]
                if pij == 0.0:
                    dp[j] = 0.0
                    continue
                ds = 0.0
                for d in range(dh):
                    ds += <double> dout[h, i, d] * <double> v[g, j, d]
                dp[j] = ds
                inner += ds * pij
                for d in range(dh):
                    dv[g, j, d] += <floating> (pij * <double> dout[h, i, d])
            for j in range(nk):
                pij = probs[h, i, j]
                if pij == 0.0:
                    continue
                ds = pij * (dp[j] - inner) * scale
                for d in range(dh):
                    dq[h, i, d] += <floating> (ds * <double> k[g, j, d])
                    dk[g, j, d] += <floating> (ds * <double> q[h, i, d])
    return dq_arr, dk_arr, dv_arr


def rmsnorm_forward(floating[:, ::1] x, floating[::1] gain, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    inv_arr = np.empty(n, dtype=dtype)
    cdef floating[:, ::1] y = y_arr
    cdef floating[::1] inv = inv_arr
    cdef Py_ssize_t i, j
    cdef double ms, s
    for i in range(n):
        ms = 0.0
        for j in range(d):
            ms += <double> x[i, j] * <double> x[i, j]
        s = 1.0 / sqrt(ms / d + eps)
        inv[i] = <floating> s
        for j in range(d):
            y[i, j] = <floating> (<double> x[i, j] * s * <double> gain[j])
    return y_arr, inv_arr


def rmsnorm_backward(
    floating[:, ::1] dy,
    floating[:, ::1] x,
    floating[::1] gain,
    floating[::1] inv_rms,
):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    dgain_arr = np.zeros(d, dtype=dtype)
    cdef floating[:, ::1] dx = dx_arr
    cdef floating[::1] dgain = dgain_arr
    cdef Py_ssize_t i, j
    cdef double inv, proj, a
    for i in range(n):
        inv = inv_rms[i]
        proj = 0.0
        for j in range(d):
            a = <double> dy[i, j] * <double> gain[j]
            proj += a * <double> x[i, j]
            dgain[j] += <floating> (<double> dy[i, j] * <double> x[i, j] * inv)
        proj /= d
        for j in range(d):
            a = <double> dy[i, j] * <double> gain[j]
            dx[i, j] = <floating> (a * inv - <double> x[i, j] * inv * inv * inv * proj)
    return dx_arr, dgain_arr
