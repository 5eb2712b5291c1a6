"""Inner-loop kernels for the spatial ops (3x3 convolution, 2x2 max-pool).

Every kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature.  The numba path is used when numba imports cleanly and the
environment variable ``MSRN_NUMBA`` is not set to ``0``.  Both paths are always
importable as ``numpy_kernels`` / ``numba_kernels`` so tests and the benchmark
can compare them directly.

Layout is channels-last: images are ``(N, H, W, C)`` and 3x3 filters are
``(3, 3, C_in, C_out)``.  Convolutions are stride 1 with zero padding 1.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def _np_conv3x3_forward(x, w):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))  # N,H,W,C,3,3
    return np.tensordot(cols, w, axes=([4, 5, 3], [0, 1, 2]))


def _np_conv3x3_backward(x, w, g):
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))
    dw = np.tensordot(cols, g, axes=([0, 1, 2], [0, 1, 2]))  # C,3,3,F
    dw = np.ascontiguousarray(dw.transpose(1, 2, 0, 3))
    dxp = np.zeros((n, h + 2, wd + 2, c))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + wd, :] += g @ w[i, j].T
    return dxp[:, 1:-1, 1:-1, :].copy(), dw


def _np_maxpool2_forward(x):
    n, h, w, c = x.shape
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    arg = np.argmax(win, axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int64)


def _np_maxpool2_backward(arg, g, in_shape):
    n, h, w, c = in_shape
    onehot = (arg[..., None] == np.arange(4)).astype(np.float64) * g[..., None]
    dx = onehot.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dx.reshape(n, h, w, c).copy()


numpy_kernels = SimpleNamespace(
    name="numpy",
    conv3x3_forward=_np_conv3x3_forward,
    conv3x3_backward=_np_conv3x3_backward,
    maxpool2_forward=_np_maxpool2_forward,
    maxpool2_backward=_np_maxpool2_backward,
)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def conv3x3_forward(x, w):
        n, h, wd, c = x.shape
        f = w.shape[3]
        out = np.zeros((n, h, wd, f))
        for b in range(n):
            for y in range(h):
                for xx in range(wd):
                    for i in range(3):
                        yy = y + i - 1
                        if yy < 0 or yy >= h:
                            continue
                        for j in range(3):
                            xc = xx + j - 1
                            if xc < 0 or xc >= wd:
                                continue
                            for ci in range(c):
                                v = x[b, yy, xc, ci]
                                for fo in range(f):
                                    out[b, y, xx, fo] += v * w[i, j, ci, fo]
        return out

    @njit(cache=True)
    def conv3x3_backward(x, w, g):
        n, h, wd, c = x.shape
        f = w.shape[3]
        dx = np.zeros((n, h, wd, c))
        dw = np.zeros((3, 3, c, f))
        for b in range(n):
            for y in range(h):
                for xx in range(wd):
                    for i in range(3):
                        yy = y + i - 1
                        if yy < 0 or yy >= h:
                            continue
                        for j in range(3):
                            xc = xx + j - 1
                            if xc < 0 or xc >= wd:
                                continue
                            for ci in range(c):
                                v = x[b, yy, xc, ci]
                                acc = 0.0
                                for fo in range(f):
                                    gv = g[b, y, xx, fo]
                                    acc += gv * w[i, j, ci, fo]
                                    dw[i, j, ci, fo] += v * gv
                                dx[b, yy, xc, ci] += acc
        return dx, dw

    @njit(cache=True)
    def maxpool2_forward(x):
        n, h, w, c = x.shape
        out = np.empty((n, h // 2, w // 2, c))
        arg = np.empty((n, h // 2, w // 2, c), dtype=np.int64)
        for b in range(n):
            for y in range(h // 2):
                for xx in range(w // 2):
                    for ch in range(c):
                        best = x[b, 2 * y, 2 * xx, ch]
                        k = 0
                        for t in range(1, 4):
                            v = x[b, 2 * y + t // 2, 2 * xx + t % 2, ch]
                            if v > best:
                                best = v
                                k = t
                        out[b, y, xx, ch] = best
                        arg[b, y, xx, ch] = k
        return out, arg

    @njit(cache=True)
    def _maxpool2_backward(arg, g, n, h, w, c):
        dx = np.zeros((n, h, w, c))
        for b in range(n):
            for y in range(h // 2):
                for xx in range(w // 2):
                    for ch in range(c):
                        k = arg[b, y, xx, ch]
                        dx[b, 2 * y + k // 2, 2 * xx + k % 2, ch] += g[b, y, xx, ch]
        return dx

    def maxpool2_backward(arg, g, in_shape):
        n, h, w, c = in_shape
        return _maxpool2_backward(arg, np.ascontiguousarray(g), n, h, w, c)

    def conv_fwd(x, w):
        return conv3x3_forward(np.ascontiguousarray(x), np.ascontiguousarray(w))

    def conv_bwd(x, w, g):
        return conv3x3_backward(
            np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(g)
        )

    def pool_fwd(x):
        return maxpool2_forward(np.ascontiguousarray(x))

    return SimpleNamespace(
        name="numba",
        conv3x3_forward=conv_fwd,
        conv3x3_backward=conv_bwd,
        maxpool2_forward=pool_fwd,
        maxpool2_backward=maxpool2_backward,
    )


try:
    numba_kernels = _build_numba_kernels()
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba_kernels = None


def numba_enabled() -> bool:
    return numba_kernels is not None and os.environ.get("MSRN_NUMBA", "1") != "0"


def active():
    """Return the kernel namespace selected by the environment."""
    return numba_kernels if numba_enabled() else numpy_kernels
