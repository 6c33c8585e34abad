"""Pure-numpy 3x3 convolution kernels (zero padding 1, stride 1).

Arrays are batched ``B x C x H x W`` float64. These are the fallback used
when the compiled extension is unavailable, and the reference the benchmark
compares against.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(2, 3))  # B x C x H x W x 3 x 3


def conv3x3_forward(x, w, b):
    out = np.tensordot(_windows(x), w, axes=([1, 4, 5], [1, 2, 3]))  # B x H x W x O
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv3x3_backward(x, w, gout):
    """Return (grad_x, grad_w, grad_b) for ``out = conv3x3_forward(x, w, b)``."""
    gb = gout.sum(axis=(0, 2, 3))
    gw = np.tensordot(gout, _windows(x), axes=([0, 2, 3], [0, 2, 3]))
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = conv3x3_forward(gout, w_flip, np.zeros(w.shape[1]))
    return gx, np.ascontiguousarray(gw), gb
