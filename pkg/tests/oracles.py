"""Brute-force loop references used by the test-suite. Deliberately slow and literal."""
import itertools
import math

import numpy as np


def spatial_pool_loop(F, mode):
    T, C, H, W = F.shape
    out = np.zeros((T, C))
    for t in range(T):
        for c in range(C):
            vals = [F[t, c, h, w] for h in range(H) for w in range(W)]
            out[t, c] = sum(vals) / len(vals) if mode == "avg" else max(vals)
    return out


def channel_pool_loop(F, mode):
    T, C, H, W = F.shape
    out = np.zeros((T, 1, H, W))
    for t in range(T):
        for h in range(H):
            for w in range(W):
                vals = [F[t, c, h, w] for c in range(C)]
                out[t, 0, h, w] = sum(vals) / len(vals) if mode == "avg" else max(vals)
    return out


def conv_loop(x, k):
    """Single-channel zero-padded 'same' cross-correlation for any number of axes."""
    x = np.asarray(x, dtype=float)
    k = np.asarray(k, dtype=float)
    half = [s // 2 for s in k.shape]
    out = np.zeros_like(x)
    for pos in itertools.product(*[range(s) for s in x.shape]):
        acc = 0.0
        for off in itertools.product(*[range(s) for s in k.shape]):
            src = [p + o - h for p, o, h in zip(pos, off, half)]
            if all(0 <= s < n for s, n in zip(src, x.shape)):
                acc += x[tuple(src)] * k[off]
        out[pos] = acc
    return out


def conv_multi_loop(x, w, b=None):
    """(C_in, *sp) input, (C_out, C_in, *k) weight -> (C_out, *sp)."""
    c_out = w.shape[0]
    out = np.zeros((c_out,) + x.shape[1:])
    for o in range(c_out):
        for i in range(x.shape[0]):
            out[o] += conv_loop(x[i], w[o, i])
        if b is not None:
            out[o] += b[o]
    return out


def matmul_loop(x, W, b):
    """y_j = sum_i x_i W[j, i] + b_j (torch Linear layout)."""
    return np.array([sum(x[i] * W[j, i] for i in range(len(x))) + b[j] for j in range(W.shape[0])])


def temporal_shift_loop(F, fraction):
    T, C, H, W = F.shape
    fold = int(math.floor(fraction * C)) // 2
    out = np.zeros_like(F)
    for t in range(T):
        for c in range(C):
            if c < fold:
                src = t - 1
            elif c < 2 * fold:
                src = t + 1
            else:
                src = t
            if 0 <= src < T:
                out[t, c] = F[src, c]
    return out


def sigmoid_scalar(z):
    return 1.0 / (1.0 + math.exp(-z))
