"""Shared fixtures and independent reference implementations.

The oracles here are deliberately naive (nested loops, elementwise
accumulation) and never call into the library's vectorized paths, so they
stay valid as independent checks.
"""

import numpy as np
import pytest

from condconv.tensor import precision


@pytest.fixture
def f64():
    """Run a test in float64: finite differences are unreliable in 32-bit."""
    with precision("float64"):
        yield


# ---------------------------------------------------------------------------
# loop oracles


def pad_same(x, k, stride):
    _, h, w, _ = x.shape
    ho, wo = -(-h // stride), -(-w // stride)
    ph = max((ho - 1) * stride + k - h, 0)
    pw = max((wo - 1) * stride + k - w, 0)
    return np.pad(x, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2), (0, 0)))


def conv2d_loop(x, kernel, stride=1, padding="valid"):
    """Six-nested-loop direct cross-correlation."""
    k = kernel.shape[0]
    if padding == "same":
        b, h, w, _ = x.shape
        ho, wo = -(-h // stride), -(-w // stride)
        x = pad_same(x, k, stride)
    else:
        b, h, w, _ = x.shape
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    cin, cout = kernel.shape[2], kernel.shape[3]
    out = np.zeros((b, ho, wo, cout), dtype=x.dtype)
    for bi in range(b):
        for i in range(ho):
            for j in range(wo):
                for co in range(cout):
                    acc = 0.0
                    for u in range(k):
                        for v in range(k):
                            for ci in range(cin):
                                acc += x[bi, i * stride + u, j * stride + v, ci] * kernel[u, v, ci, co]
                    out[bi, i, j, co] = acc
    return out


def depthwise_loop(x, kernel, stride=1, padding="valid"):
    """Per-channel direct filtering."""
    k = kernel.shape[0]
    if padding == "same":
        b, h, w, c = x.shape
        ho, wo = -(-h // stride), -(-w // stride)
        x = pad_same(x, k, stride)
    else:
        b, h, w, c = x.shape
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((b, ho, wo, c), dtype=x.dtype)
    for bi in range(b):
        for i in range(ho):
            for j in range(wo):
                for ci in range(c):
                    acc = 0.0
                    for u in range(k):
                        for v in range(k):
                            acc += x[bi, i * stride + u, j * stride + v, ci] * kernel[u, v, ci, 0]
                    out[bi, i, j, ci] = acc
    return out


def matmul_loop(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def gap_loop(x):
    b, h, w, c = x.shape
    out = np.zeros((b, c), dtype=x.dtype)
    for bi in range(b):
        for ci in range(c):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += x[bi, i, j, ci]
            out[bi, ci] = acc / (h * w)
    return out


# ---------------------------------------------------------------------------
# numeric helpers


def max_rel_err(a, b, floor=1.0):
    """Max |a-b| scaled by max(|a|, |b|, floor) elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def scale_rel_err(a, b):
    """Max |a-b| normalized by the larger output magnitude (scale-relative)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-30)
    return float(np.abs(a - b).max() / scale)


def finite_difference(f, param, h=1e-3):
    """Central-difference gradient of scalar f() w.r.t. the array `param`.

    `f` must read `param` by reference (the same array object is mutated).
    """
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = param[idx]
        param[idx] = orig + h
        fp = f()
        param[idx] = orig - h
        fm = f()
        param[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return grad
