# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3x3 convolution kernels (zero padding 1, stride 1), B x C x H x W float64.

The im2col gather runs in C; the channel contraction is a BLAS matrix
product through numpy.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _im2col(const double[:, :, :, ::1] x, double[:, :, ::1] cols) noexcept nogil:
    # cols[b, c*9 + ki*3 + kj, i*W + j] = x[b, c, i + ki - 1, j + kj - 1] (zero outside)
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t b, c, ki, kj, i, j, si, j0, j1
    cdef double* crow
    cdef const double* xrow
    for b in range(B):
        for c in range(C):
            for ki in range(3):
                for kj in range(3):
                    crow = &cols[b, c * 9 + ki * 3 + kj, 0]
                    j0 = 1 if kj == 0 else 0
                    j1 = W - 1 if kj == 2 else W
                    for i in range(H):
                        si = i + ki - 1
                        if si < 0 or si >= H:
                            for j in range(W):
                                crow[i * W + j] = 0.0
                            continue
                        xrow = &x[b, c, si, 0]
                        crow[i * W] = 0.0
                        crow[i * W + W - 1] = 0.0
                        for j in range(j0, j1):
                            crow[i * W + j] = xrow[j + kj - 1]


def _cols(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    B, C, H, W = x.shape
    cols = np.empty((B, C * 9, H * W), dtype=np.float64)
    cdef const double[:, :, :, ::1] xv = x
    cdef double[:, :, ::1] cv = cols
    with nogil:
        _im2col(xv, cv)
    return cols


def conv3x3_forward(x, w, b):
    B, C, H, W = x.shape
    O = w.shape[0]
    wm = np.ascontiguousarray(w, dtype=np.float64).reshape(O, C * 9)
    out = np.matmul(wm, _cols(x))
    out += np.asarray(b, dtype=np.float64)[None, :, None]
    return out.reshape(B, O, H, W)


def conv3x3_backward(x, w, gout):
    """Return (grad_x, grad_w, grad_b) for ``out = conv3x3_forward(x, w, b)``."""
    B, C, H, W = x.shape
    O = w.shape[0]
    g = np.ascontiguousarray(gout, dtype=np.float64).reshape(B, O, H * W)
    cols = _cols(x)
    gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(O, C, 3, 3)
    # grad_x is the correlation of grad_out with the flipped, channel-transposed kernel
    w_flip = np.ascontiguousarray(np.asarray(w, dtype=np.float64)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = np.matmul(w_flip.reshape(C, O * 9), _cols(gout)).reshape(B, C, H, W)
    gb = g.sum(axis=(0, 2))
    return gx, gw, gb
