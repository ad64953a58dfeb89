"""Hot inner loops: masked row softmax, fused LSTM pointwise step, row scatter-add.

Every kernel has a pure-numpy version, and all but the LSTM forward step also
have a numba ``@njit`` version (numpy's vectorized exp/tanh win that one).
The numba path is used when numba imports and ``REXUP_NUMBA`` is not set to
``0``/``false``/``off``. Both paths take and return C-contiguous 2-D arrays;
callers reshape.

The selected implementation is exposed at module level (``softmax_fwd`` ...).
``NUMPY_KERNELS`` and ``NUMBA_KERNELS`` give direct access to each path for
parity tests and benchmarks.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

_FLAG = os.environ.get("REXUP_NUMBA", "1").strip().lower()
_WANT_NUMBA = _FLAG not in {"0", "false", "off", "no"}


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------


def _np_softmax_fwd(x, mask):
    if mask is None:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
    else:
        big = np.where(mask, x, -np.inf)
        z = x - big.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, z, 0.0)), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_bwd(p, g):
    return p * (g - (g * p).sum(axis=1, keepdims=True))


def _np_lstm_fwd(gates, c_prev):
    h = c_prev.shape[1]
    i = 1.0 / (1.0 + np.exp(-gates[:, :h]))
    f = 1.0 / (1.0 + np.exp(-gates[:, h : 2 * h]))
    g = np.tanh(gates[:, 2 * h : 3 * h])
    o = 1.0 / (1.0 + np.exp(-gates[:, 3 * h :]))
    c = f * c_prev + i * g
    tc = np.tanh(c)
    out = np.concatenate([o * tc, c], axis=1)
    act = np.concatenate([i, f, g, o, tc], axis=1)
    return out, act


def _np_lstm_bwd(act, c_prev, g_out):
    h = c_prev.shape[1]
    i, f, g, o, tc = (act[:, k * h : (k + 1) * h] for k in range(5))
    gh = g_out[:, :h]
    gc = g_out[:, h:] + gh * o * (1.0 - tc * tc)
    d_i = gc * g * i * (1.0 - i)
    d_f = gc * c_prev * f * (1.0 - f)
    d_g = gc * i * (1.0 - g * g)
    d_o = gh * tc * o * (1.0 - o)
    return np.concatenate([d_i, d_f, d_g, d_o], axis=1), gc * f


def _np_scatter_add_rows(out, idx, src, skip):
    keep = idx != skip
    np.add.at(out, idx[keep], src[keep])
    return out


NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    softmax_fwd=_np_softmax_fwd,
    softmax_bwd=_np_softmax_bwd,
    lstm_fwd=_np_lstm_fwd,
    lstm_bwd=_np_lstm_bwd,
    scatter_add_rows=_np_scatter_add_rows,
)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------


def _build_numba():
    from numba import njit

    @njit(cache=True)
    def softmax_fwd_masked(x, mask):
        n, c = x.shape
        out = np.zeros_like(x)
        for r in range(n):
            m = -np.inf
            for k in range(c):
                if mask[r, k] and x[r, k] > m:
                    m = x[r, k]
            s = 0.0
            for k in range(c):
                if mask[r, k]:
                    e = np.exp(x[r, k] - m)
                    out[r, k] = e
                    s += e
            for k in range(c):
                out[r, k] /= s
        return out

    @njit(cache=True)
    def softmax_fwd_dense(x):
        n, c = x.shape
        out = np.empty_like(x)
        for r in range(n):
            m = x[r, 0]
            for k in range(1, c):
                if x[r, k] > m:
                    m = x[r, k]
            s = 0.0
            for k in range(c):
                e = np.exp(x[r, k] - m)
                out[r, k] = e
                s += e
            for k in range(c):
                out[r, k] /= s
        return out

    @njit(cache=True)
    def softmax_bwd(p, g):
        n, c = p.shape
        out = np.empty_like(p)
        for r in range(n):
            dot = 0.0
            for k in range(c):
                dot += g[r, k] * p[r, k]
            for k in range(c):
                out[r, k] = p[r, k] * (g[r, k] - dot)
        return out

    @njit(cache=True)
    def lstm_bwd(act, c_prev, g_out):
        n, h = c_prev.shape
        dgates = np.empty((n, 4 * h), dtype=act.dtype)
        dc_prev = np.empty((n, h), dtype=act.dtype)
        for r in range(n):
            for k in range(h):
                i = act[r, k]
                f = act[r, h + k]
                g = act[r, 2 * h + k]
                o = act[r, 3 * h + k]
                tc = act[r, 4 * h + k]
                gh = g_out[r, k]
                gc = g_out[r, h + k] + gh * o * (1.0 - tc * tc)
                dgates[r, k] = gc * g * i * (1.0 - i)
                dgates[r, h + k] = gc * c_prev[r, k] * f * (1.0 - f)
                dgates[r, 2 * h + k] = gc * i * (1.0 - g * g)
                dgates[r, 3 * h + k] = gh * tc * o * (1.0 - o)
                dc_prev[r, k] = gc * f
        return dgates, dc_prev

    @njit(cache=True)
    def scatter_add_rows(out, idx, src, skip):
        n, w = src.shape
        for r in range(n):
            j = idx[r]
            if j == skip:
                continue
            for k in range(w):
                out[j, k] += src[r, k]
        return out

    def softmax_fwd(x, mask):
        if mask is None:
            return softmax_fwd_dense(x)
        return softmax_fwd_masked(x, mask)

    return SimpleNamespace(
        name="numba",
        softmax_fwd=softmax_fwd,
        softmax_bwd=softmax_bwd,
        # a scalar loop over exp/tanh loses to numpy's vectorized ufuncs here
        lstm_fwd=_np_lstm_fwd,
        lstm_bwd=lstm_bwd,
        scatter_add_rows=scatter_add_rows,
    )


try:
    NUMBA_KERNELS = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_KERNELS = None

ACTIVE = NUMBA_KERNELS if (_WANT_NUMBA and NUMBA_KERNELS is not None) else NUMPY_KERNELS
BACKEND = ACTIVE.name

softmax_fwd = ACTIVE.softmax_fwd
softmax_bwd = ACTIVE.softmax_bwd
lstm_fwd = ACTIVE.lstm_fwd
lstm_bwd = ACTIVE.lstm_bwd
scatter_add_rows = ACTIVE.scatter_add_rows
