"""Hot numeric kernels for the layer ops.

Each kernel has a numba implementation and a numpy implementation with the
same signature. The module-level names (``conv1d_forward`` ...) point at one
or the other depending on :data:`scadavae._jit.USE_NUMBA`; call
:func:`set_backend` to switch at runtime (benchmarks, tests).
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _jit
from ._jit import njit

__all__ = [
    "conv1d_forward",
    "conv1d_backward",
    "maxpool1d_forward",
    "maxpool1d_backward",
    "set_backend",
    "get_backend",
]


# --------------------------------------------------------------------------
# numba kernels
# --------------------------------------------------------------------------

@njit(fastmath=True)
def _fill_cols(x, b, K, col):
    # col[t, c*K + k] = x[b, c, t + k - K//2], zero outside the series
    Ci, L = x.shape[1], x.shape[2]
    pad = K // 2
    for t in range(L):
        for c in range(Ci):
            for k in range(K):
                s = t + k - pad
                col[t, c * K + k] = x[b, c, s] if 0 <= s < L else 0.0


@njit(fastmath=True)
def _conv1d_forward_nb(x, w, bias):
    B, Ci, L = x.shape
    Co, _, K = w.shape
    J = Ci * K
    w2 = w.reshape(Co, J)
    col = np.empty((L, J))
    y = np.empty((B, Co, L))
    for b in range(B):
        _fill_cols(x, b, K, col)
        for o in range(Co):
            for t in range(L):
                acc = 0.0
                for j in range(J):
                    acc += w2[o, j] * col[t, j]
                y[b, o, t] = acc + bias[o]
    return y


@njit(fastmath=True)
def _conv1d_backward_nb(x, w, gy):
    B, Ci, L = x.shape
    Co, _, K = w.shape
    J = Ci * K
    pad = K // 2
    w2 = w.reshape(Co, J)
    col = np.empty((L, J))
    gcol = np.empty((L, J))
    gx = np.zeros((B, Ci, L))
    gw2 = np.zeros((Co, J))
    gb = np.zeros(Co)
    for b in range(B):
        _fill_cols(x, b, K, col)
        gcol[:, :] = 0.0
        for o in range(Co):
            for t in range(L):
                g = gy[b, o, t]
                gb[o] += g
                for j in range(J):
                    gw2[o, j] += g * col[t, j]
                    gcol[t, j] += g * w2[o, j]
        for t in range(L):
            for c in range(Ci):
                for k in range(K):
                    s = t + k - pad
                    if 0 <= s < L:
                        gx[b, c, s] += gcol[t, c * K + k]
    return gx, gw2.reshape(Co, Ci, K), gb


@njit
def _maxpool1d_forward_nb(x, m):
    B, C, L = x.shape
    n = L // m
    y = np.empty((B, C, n))
    idx = np.empty((B, C, n), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for j in range(n):
                base = j * m
                best = x[b, c, base]
                arg = 0
                for i in range(1, m):
                    v = x[b, c, base + i]
                    if v > best:
                        best = v
                        arg = i
                y[b, c, j] = best
                idx[b, c, j] = arg
    return y, idx


@njit
def _maxpool1d_backward_nb(gy, idx, m):
    B, C, n = gy.shape
    gx = np.zeros((B, C, n * m))
    for b in range(B):
        for c in range(C):
            for j in range(n):
                gx[b, c, j * m + idx[b, c, j]] = gy[b, c, j]
    return gx


# --------------------------------------------------------------------------
# numpy kernels
# --------------------------------------------------------------------------

def _im2col(x, K):
    B, Ci, L = x.shape
    pad = K // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(xp, K, axis=2)  # [B, Ci, L, K]
    return np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(B * L, Ci * K)


def _conv1d_forward_np(x, w, bias):
    B, Ci, L = x.shape
    Co, _, K = w.shape
    cols = _im2col(x, K)
    y = cols @ w.reshape(Co, Ci * K).T + bias
    return np.ascontiguousarray(y.reshape(B, L, Co).transpose(0, 2, 1))


def _conv1d_backward_np(x, w, gy):
    B, Ci, L = x.shape
    Co, _, K = w.shape
    pad = K // 2
    cols = _im2col(x, K)
    gy2 = np.ascontiguousarray(gy.transpose(0, 2, 1)).reshape(B * L, Co)
    gw = (gy2.T @ cols).reshape(Co, Ci, K)
    gb = gy.sum(axis=(0, 2))
    gcols = (gy2 @ w.reshape(Co, Ci * K)).reshape(B, L, Ci, K)
    gxp = np.zeros((B, Ci, L + 2 * pad))
    for k in range(K):
        gxp[:, :, k:k + L] += gcols[:, :, :, k].transpose(0, 2, 1)
    return np.ascontiguousarray(gxp[:, :, pad:pad + L]), gw, gb


def _maxpool1d_forward_np(x, m):
    B, C, L = x.shape
    blocks = x.reshape(B, C, L // m, m)
    idx = blocks.argmax(axis=3)  # first occurrence on ties
    y = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]
    return y, idx


def _maxpool1d_backward_np(gy, idx, m):
    B, C, n = gy.shape
    gx = np.zeros((B, C, n, m))
    np.put_along_axis(gx, idx[..., None], gy[..., None], axis=3)
    return gx.reshape(B, C, n * m)


_BACKENDS = {
    "numba": (_conv1d_forward_nb, _conv1d_backward_nb,
              _maxpool1d_forward_nb, _maxpool1d_backward_nb),
    "numpy": (_conv1d_forward_np, _conv1d_backward_np,
              _maxpool1d_forward_np, _maxpool1d_backward_np),
}

_backend = "numba" if _jit.USE_NUMBA else "numpy"
conv1d_forward, conv1d_backward, maxpool1d_forward, maxpool1d_backward = _BACKENDS[_backend]


def set_backend(name):
    """Switch kernels to ``"numba"`` or ``"numpy"``; returns the previous name."""
    global _backend, conv1d_forward, conv1d_backward, maxpool1d_forward, maxpool1d_backward
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {sorted(_BACKENDS)}")
    if name == "numba" and not _jit.NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    prev = _backend
    _backend = name
    conv1d_forward, conv1d_backward, maxpool1d_forward, maxpool1d_backward = _BACKENDS[name]
    return prev


def get_backend():
    return _backend
