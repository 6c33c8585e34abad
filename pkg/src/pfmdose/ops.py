"""Differentiable operations over :class:`~pfmdose.tensor.Tensor`.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per parent. Binary elementwise ops
broadcast like numpy; the closure reduces gradients back to each operand's
shape.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

from . import kernels
from .errors import DimensionError
from .tensor import Tensor

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._make(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._make(a.data**p, (a,), backward, "power")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (g * np.sign(a.data),)

    return Tensor._make(np.abs(a.data), (a,), backward, "abs")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return Tensor._make(out, (a,), backward, "sqrt")


# -- reductions and structure ------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor._make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor._make(a.data.transpose(axes), (a,), backward, "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def euclidean_norm(a: Tensor, axis) -> Tensor:
    """sqrt(sum(a**2)) over ``axis``. Subgradient 0 is used where the norm vanishes."""
    axes = _norm_axes(axis, a.ndim)
    n = np.sqrt((a.data * a.data).sum(axis=axes))

    def backward(g):
        nk = np.expand_dims(n, axes)
        safe = np.where(nk > 0, nk, 1.0)
        scale = np.where(nk > 0, np.expand_dims(g, axes) / safe, 0.0)
        return (scale * a.data,)

    return Tensor._make(n, (a,), backward, "euclidean_norm")


# -- activations -------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._make(a.data * mask, (a,), backward, "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def backward(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return Tensor._make(x * cdf, (a,), backward, "gelu")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._make(out, (a,), backward, "sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"softmax: empty reduction axis in shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), backward, "softmax")


def softmax_rows(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {a.shape}")
    return softmax(a, axis=-1)


# -- normalization -----------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shape {gamma.shape} does not match feature size {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of a ``B x C x H x W`` batch.

    Training mode uses batch statistics and updates the running buffers in
    place (unbiased variance, as is customary); eval mode uses the buffers.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm2d: input {x.shape} vs affine {gamma.shape}")
    axes = (0, 2, 3)
    gk = gamma.data[None, :, None, None]
    bk = beta.data[None, :, None, None]
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        unbiased = var.reshape(-1) * (n / (n - 1) if n > 1 else 1.0)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def backward(g):
            gx_hat = g * gk
            gx = inv * (gx_hat - gx_hat.mean(axis=axes, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        inv = 1.0 / np.sqrt(running_var[None, :, None, None] + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv

        def backward(g):
            return g * gk * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._make(xhat * gk + bk, (x, gamma, beta), backward, "batch_norm2d")


# -- convolution -------------------------------------------------------------

def conv3x3(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (spatial size preserved).

    ``x`` is ``C x H x W`` or ``B x C x H x W``; ``w`` is ``O x C x 3 x 3``.
    """
    if x.ndim not in (3, 4) or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv3x3: bad shapes x={x.shape} w={w.shape}")
    unbatched = x.ndim == 3
    xb = x.data[None] if unbatched else x.data
    if xb.shape[1] != w.shape[1]:
        raise DimensionError(f"conv3x3: input has {xb.shape[1]} channels, kernel expects {w.shape[1]}")
    if bias.shape != (w.shape[0],):
        raise DimensionError(f"conv3x3: bias shape {bias.shape} != ({w.shape[0]},)")
    xb = np.ascontiguousarray(xb)
    out = kernels.conv3x3_forward(xb, w.data, bias.data)

    def backward(g):
        gb_ = g[None] if unbatched else g
        gx, gw, gbias = kernels.conv3x3_backward(xb, w.data, np.ascontiguousarray(gb_))
        return (gx[0] if unbatched else gx), gw, gbias

    return Tensor._make(out[0] if unbatched else out, (x, w, bias), backward, "conv3x3")
