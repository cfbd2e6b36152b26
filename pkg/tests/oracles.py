"""Straight-line reference implementations used as test oracles."""

import numpy as np


def reflect_index(i, n):
    if i < 0:
        return -i
    if i >= n:
        return 2 * (n - 1) - i
    return i


def naive_conv(x, w, b):
    """Reflect-padded 'same' convolution (cross-correlation) with explicit loops."""
    c_out, c_in, k, _ = w.shape
    _, h, wd = x.shape
    r = k // 2
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                acc = b[o]
                for c in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            ii = reflect_index(i + di - r, h)
                            jj = reflect_index(j + dj - r, wd)
                            acc += w[o, c, di, dj] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))
