"""Differentiable operations over :class:`~condconv.tensor.Tensor`.

Convolutions use im2col plus matrix multiply; padding ``same`` follows
``pad_total = max((H_out - 1) * stride + k - H, 0)`` split floor-left /
ceil-right. There is no implicit broadcasting: the only shape-bending ops are
the explicit ``add_bias``, ``channel_scale_shift`` and ``batch_scale``.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from .tensor import ShapeError, Tensor, check_same_shape

__all__ = [
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_bias",
    "channel_scale_shift",
    "batch_scale",
    "matmul",
    "reshape",
    "concat0",
    "concat_features",
    "index0",
    "column",
    "tsum",
    "mean",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "conv2d",
    "depthwise_conv2d",
    "conv2d_per_example",
    "depthwise_conv2d_per_example",
    "matmul_per_example",
    "global_average_pool",
    "fully_connected",
    "cross_entropy_with_logits",
    "conv_output_size",
    "pad_amounts",
]


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    check_same_shape(a, b, "add")
    return Tensor.result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    check_same_shape(a, b, "sub")
    return Tensor.result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    check_same_shape(a, b, "mul")
    return Tensor.result(
        a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul"
    )


def neg(a: Tensor) -> Tensor:
    return Tensor.result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    return Tensor.result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x[B, D] + bias[D]`` — the one permitted broadcast."""
    if x.ndim != 2 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: got x {x.shape} and bias {bias.shape}")
    return Tensor.result(
        x.data + bias.data[None, :],
        (x, bias),
        lambda g: (g, g.sum(axis=0)),
        "add_bias",
    )


def channel_scale_shift(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine ``x * gamma + beta`` on NHWC input."""
    if x.ndim != 4 or gamma.ndim != 1 or beta.ndim != 1:
        raise ShapeError(
            f"channel_scale_shift: got x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    c = x.shape[3]
    if gamma.shape[0] != c or beta.shape[0] != c:
        raise ShapeError(
            f"channel_scale_shift: channel count {c} vs gamma {gamma.shape}, beta {beta.shape}"
        )
    out = x.data * gamma.data + beta.data

    def backward(g):
        return (
            g * gamma.data,
            (g * x.data).sum(axis=(0, 1, 2)),
            g.sum(axis=(0, 1, 2)),
        )

    return Tensor.result(out, (x, gamma, beta), backward, "channel_scale_shift")


def batch_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale every example ``x[b]`` by the scalar ``s[b]``."""
    if s.ndim != 1 or x.shape[0] != s.shape[0]:
        raise ShapeError(f"batch_scale: got x {x.shape} and s {s.shape}")
    shp = (x.shape[0],) + (1,) * (x.ndim - 1)
    sb = s.data.reshape(shp)
    axes = tuple(range(1, x.ndim))

    def backward(g):
        return (g * sb, (g * x.data).sum(axis=axes))

    return Tensor.result(x.data * sb, (x, s), backward, "batch_scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: got {a.shape} @ {b.shape}")
    return Tensor.result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
        "matmul",
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.data.shape
    return Tensor.result(
        x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape"
    )


def concat0(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0 (the batch axis)."""
    if not parts:
        raise ValueError("concat0 of zero tensors")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise ShapeError(f"concat0: trailing shapes differ ({p.shape[1:]} vs {tail})")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return Tensor.result(
        np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward, "concat0"
    )


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two [B, D] tensors along the feature axis."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_features: got {a.shape} and {b.shape}")
    d1 = a.shape[1]

    def backward(g):
        return (g[:, :d1], g[:, d1:])

    return Tensor.result(
        np.concatenate([a.data, b.data], axis=1), (a, b), backward, "concat_features"
    )


def index0(x: Tensor, i: int) -> Tensor:
    """Select index ``i`` along axis 0, dropping the axis."""
    i = int(i)

    def backward(g):
        out = np.zeros_like(x.data)
        out[i] = g
        return (out,)

    return Tensor.result(np.array(x.data[i]), (x,), backward, "index0")


def column(x: Tensor, j: int) -> Tensor:
    """Column ``x[:, j]`` of a 2-D tensor as a vector."""
    if x.ndim != 2:
        raise ShapeError(f"column: expected 2-D tensor, got {x.shape}")
    j = int(j)

    def backward(g):
        out = np.zeros_like(x.data)
        out[:, j] = g
        return (out,)

    return Tensor.result(x.data[:, j].copy(), (x,), backward, "column")


def tsum(x: Tensor) -> Tensor:
    """Sum over all elements, producing a scalar."""
    shape = x.data.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.result(np.array(x.data.sum()), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum (not where) so NaN inputs propagate to the loss
    return Tensor.result(
        np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu"
    )


def sigmoid(x: Tensor) -> Tensor:
    # stable in both tails; clamped into the open interval so the range
    # contract (0, 1) survives float saturation at extreme inputs
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    one = x.data.dtype.type(1)
    np.clip(out, np.finfo(x.data.dtype).tiny, np.nextafter(one, -one), out=out)
    return Tensor.result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor.result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor.result(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# convolution machinery


def conv_output_size(extent: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-extent // stride)  # ceil
    if padding == "valid":
        return (extent - k) // stride + 1
    raise ValueError(f"unknown padding {padding!r}")


def pad_amounts(extent: int, k: int, stride: int, padding: str) -> Tuple[int, int]:
    if padding == "valid":
        return 0, 0
    out = conv_output_size(extent, k, stride, "same")
    total = max((out - 1) * stride + k - extent, 0)
    lo = total // 2
    return lo, total - lo


def _check_conv_pre(h: int, w: int, k: int, stride: int, padding: str) -> None:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding == "valid" and (k > h or k > w):
        raise ShapeError(
            f"kernel extent {k} exceeds input extent ({h}, {w}) with valid padding"
        )


def _pad_input(x: np.ndarray, k: int, stride: int, padding: str) -> np.ndarray:
    _, h, w, _ = x.shape
    ph = pad_amounts(h, k, stride, padding)
    pw = pad_amounts(w, k, stride, padding)
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch tensor [B, Ho, Wo, k, k, C] gathered from the padded input."""
    b, _, _, c = xp.shape
    patches = np.empty((b, ho, wo, k, k, c), dtype=xp.dtype)
    for u in range(k):
        for v in range(k):
            patches[:, :, :, u, v, :] = xp[
                :, u : u + stride * (ho - 1) + 1 : stride,
                v : v + stride * (wo - 1) + 1 : stride, :,
            ]
    return patches


def _col2im(
    dpatches: np.ndarray, xp_shape: Tuple[int, ...], k: int, stride: int
) -> np.ndarray:
    """Scatter-add patch gradients back onto the padded input."""
    ho, wo = dpatches.shape[1], dpatches.shape[2]
    dxp = np.zeros(xp_shape, dtype=dpatches.dtype)
    for u in range(k):
        for v in range(k):
            dxp[
                :, u : u + stride * (ho - 1) + 1 : stride,
                v : v + stride * (wo - 1) + 1 : stride, :,
            ] += dpatches[:, :, :, u, v, :]
    return dxp


def _crop_pad(dxp: np.ndarray, orig_shape: Tuple[int, ...], k: int, stride: int,
              padding: str) -> np.ndarray:
    _, h, w, _ = orig_shape
    ph_lo, _ = pad_amounts(h, k, stride, padding)
    pw_lo, _ = pad_amounts(w, k, stride, padding)
    return dxp[:, ph_lo : ph_lo + h, pw_lo : pw_lo + w, :]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation of NHWC input with a [k, k, Cin, Cout] kernel."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected NHWC input, got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d: expected square [k,k,Cin,Cout] kernel, got {kernel.shape}")
    if x.shape[3] != kernel.shape[2]:
        raise ShapeError(
            f"conv2d: input channels {x.shape} do not match kernel {kernel.shape}"
        )
    b, h, w, cin = x.shape
    k, _, _, cout = kernel.shape
    _check_conv_pre(h, w, k, stride, padding)
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)

    xp = _pad_input(x.data, k, stride, padding)
    patches = _im2col(xp, k, stride, ho, wo)
    pmat = patches.reshape(b * ho * wo, k * k * cin)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out = (pmat @ kmat).reshape(b, ho, wo, cout)

    def backward(g):
        gmat = g.reshape(b * ho * wo, cout)
        dkernel = (pmat.T @ gmat).reshape(kernel.data.shape)
        dpatches = (gmat @ kmat.T).reshape(b, ho, wo, k, k, cin)
        dxp = _col2im(dpatches, xp.shape, k, stride)
        return (_crop_pad(dxp, x.data.shape, k, stride, padding), dkernel)

    return Tensor.result(out, (x, kernel), backward, "conv2d")


def depthwise_conv2d(
    x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "valid"
) -> Tensor:
    """Channel-wise filtering with a [k, k, C, 1] kernel."""
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv2d: expected NHWC input, got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[3] != 1:
        raise ShapeError(
            f"depthwise_conv2d: expected [k,k,C,1] kernel, got {kernel.shape}"
        )
    if x.shape[3] != kernel.shape[2]:
        raise ShapeError(
            f"depthwise_conv2d: input channels {x.shape} do not match kernel {kernel.shape}"
        )
    b, h, w, c = x.shape
    k = kernel.shape[0]
    _check_conv_pre(h, w, k, stride, padding)
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)

    xp = _pad_input(x.data, k, stride, padding)
    patches = _im2col(xp, k, stride, ho, wo)
    kern = kernel.data[:, :, :, 0]
    out = np.einsum("bijuvc,uvc->bijc", patches, kern)

    def backward(g):
        dkern = np.einsum("bijuvc,bijc->uvc", patches, g)
        dpatches = g[:, :, :, None, None, :] * kern[None, None, None, :, :, :]
        dxp = _col2im(dpatches, xp.shape, k, stride)
        return (
            _crop_pad(dxp, x.data.shape, k, stride, padding),
            dkern[:, :, :, None],
        )

    return Tensor.result(out, (x, kernel), backward, "depthwise_conv2d")


def conv2d_per_example(
    x: Tensor, kernels: Tensor, stride: int = 1, padding: str = "valid"
) -> Tensor:
    """One convolution per example: ``kernels[b]`` applied to ``x[b]``.

    ``kernels`` has shape [B, k, k, Cin, Cout]: the materialized per-example
    kernels of a conditionally parameterized layer.
    """
    if x.ndim != 4 or kernels.ndim != 5:
        raise ShapeError(
            f"conv2d_per_example: got x {x.shape}, kernels {kernels.shape}"
        )
    if x.shape[0] != kernels.shape[0] or x.shape[3] != kernels.shape[3]:
        raise ShapeError(
            f"conv2d_per_example: x {x.shape} incompatible with kernels {kernels.shape}"
        )
    b, h, w, cin = x.shape
    k, cout = kernels.shape[1], kernels.shape[4]
    _check_conv_pre(h, w, k, stride, padding)
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)

    xp = _pad_input(x.data, k, stride, padding)
    patches = _im2col(xp, k, stride, ho, wo).reshape(b, ho * wo, k * k * cin)
    kmat = kernels.data.reshape(b, k * k * cin, cout)
    out = np.einsum("bpk,bko->bpo", patches, kmat).reshape(b, ho, wo, cout)

    def backward(g):
        gmat = g.reshape(b, ho * wo, cout)
        dkern = np.einsum("bpk,bpo->bko", patches, gmat).reshape(kernels.data.shape)
        dpatches = np.einsum("bpo,bko->bpk", gmat, kmat).reshape(b, ho, wo, k, k, cin)
        dxp = _col2im(dpatches, xp.shape, k, stride)
        return (_crop_pad(dxp, x.data.shape, k, stride, padding), dkern)

    return Tensor.result(out, (x, kernels), backward, "conv2d_per_example")


def depthwise_conv2d_per_example(
    x: Tensor, kernels: Tensor, stride: int = 1, padding: str = "valid"
) -> Tensor:
    """Per-example depthwise convolution; ``kernels`` is [B, k, k, C, 1]."""
    if x.ndim != 4 or kernels.ndim != 5 or kernels.shape[4] != 1:
        raise ShapeError(
            f"depthwise_conv2d_per_example: got x {x.shape}, kernels {kernels.shape}"
        )
    if x.shape[0] != kernels.shape[0] or x.shape[3] != kernels.shape[3]:
        raise ShapeError(
            f"depthwise_conv2d_per_example: x {x.shape} vs kernels {kernels.shape}"
        )
    b, h, w, c = x.shape
    k = kernels.shape[1]
    _check_conv_pre(h, w, k, stride, padding)
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)

    xp = _pad_input(x.data, k, stride, padding)
    patches = _im2col(xp, k, stride, ho, wo)
    kern = kernels.data[:, :, :, :, 0]
    out = np.einsum("bijuvc,buvc->bijc", patches, kern)

    def backward(g):
        dkern = np.einsum("bijuvc,bijc->buvc", patches, g)
        dpatches = g[:, :, :, None, None, :] * kern[:, None, None, :, :, :]
        dxp = _col2im(dpatches, xp.shape, k, stride)
        return (
            _crop_pad(dxp, x.data.shape, k, stride, padding),
            dkern[:, :, :, :, None],
        )

    return Tensor.result(out, (x, kernels), backward, "depthwise_conv2d_per_example")


def matmul_per_example(x: Tensor, weights: Tensor) -> Tensor:
    """``out[b] = x[b] @ weights[b]`` with x [B, Din], weights [B, Din, Dout]."""
    if x.ndim != 2 or weights.ndim != 3 or x.shape != weights.shape[:2]:
        raise ShapeError(
            f"matmul_per_example: got x {x.shape}, weights {weights.shape}"
        )
    out = np.einsum("bk,bko->bo", x.data, weights.data)

    def backward(g):
        return (
            np.einsum("bo,bko->bk", g, weights.data),
            np.einsum("bk,bo->bko", x.data, g),
        )

    return Tensor.result(out, (x, weights), backward, "matmul_per_example")


# ---------------------------------------------------------------------------
# pooling, dense layers, loss


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [B, H, W, C] -> [B, C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_average_pool: expected NHWC input, got {x.shape}")
    b, h, w, c = x.shape
    inv = 1.0 / (h * w)
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] * inv, x.data.shape).copy(),)

    return Tensor.result(out, (x,), backward, "global_average_pool")


def fully_connected(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x[B, Din] @ weights[Din, Dout] (+ bias)``."""
    out = matmul(x, weights)
    if bias is not None:
        out = add_bias(out, bias)
    return out


def cross_entropy_with_logits(logits: Tensor, labels_onehot: Tensor) -> Tensor:
    """Mean cross-entropy against (possibly soft) one-hot labels."""
    check_same_shape(logits, labels_onehot, "cross_entropy_with_logits")
    logp = log_softmax(logits, axis=-1)
    batch = logits.shape[0]
    return scale(tsum(mul(labels_onehot, logp)), -1.0 / batch)
