import numpy as np
import pytest

from mixrec.tensor import Tensor


def central_diff_grad(scalar_fn, arrays, eps=1e-6):
    """Central-difference gradients of ``scalar_fn()`` w.r.t. each array.

    ``scalar_fn`` must recompute the scalar from the arrays' current
    contents. Arrays are perturbed in place and restored. float64 only.
    """
    grads = []
    for arr in arrays:
        assert arr.dtype == np.float64, "finite differences need float64"
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            fp = scalar_fn()
            flat[i] = keep - eps
            fm = scalar_fn()
            flat[i] = keep
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return np.abs(a - b).max(initial=0.0) / denom


def check_op_grad(build_scalar, params, tol=1e-6, eps=1e-6):
    """Compares autograd against central differences for one op graph.

    ``build_scalar`` maps a list of Tensors (wrapping ``params``) to a
    scalar Tensor. Asserts max relative error below ``tol`` per input.
    """
    tensors = [Tensor(p, requires_grad=True) for p in params]
    out = build_scalar(tensors)
    out.backward()

    def forward():
        fresh = [Tensor(p) for p in params]
        return float(build_scalar(fresh).data)

    fd = central_diff_grad(forward, params, eps=eps)
    for t, g in zip(tensors, fd):
        assert t.grad is not None, "missing gradient"
        err = rel_err(t.grad, g)
        assert err < tol, f"gradient mismatch: rel err {err:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
