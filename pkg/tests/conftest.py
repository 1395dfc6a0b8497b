"""Shared numerical oracles for the test suite.

The oracles here are deliberately naive (quadruple loops, central
differences).  They were written against the op contracts before the engine
and stay independent of the engine's vectorized implementations.
"""

import numpy as np


def conv2d_direct(x, w, b):
    """Quadruple-loop same-padding cross-correlation oracle.

    x: [B, C_in, H, W]; w: [C_out, C_in, kH, kW] (odd kernels); b: [C_out].
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((bsz, cout, h, wd))
    for n in range(bsz):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                ii = i + u - ph
                                jj = j + v - pw
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += x[n, c, ii, jj] * w[o, c, u, v]
                    out[n, o, i, j] = acc + b[o]
    return out


def maxpool2d_direct(x, window):
    """Brute-force windowed maximum with floor semantics."""
    x = np.asarray(x, dtype=np.float64)
    wh, ww = window
    bsz, c, h, w = x.shape
    h2, w2 = h // wh, w // ww
    out = np.zeros((bsz, c, h2, w2))
    for n in range(bsz):
        for ch in range(c):
            for i in range(h2):
                for j in range(w2):
                    out[n, ch, i, j] = x[n, ch, i * wh : (i + 1) * wh, j * ww : (j + 1) * ww].max()
    return out


def finite_difference(f, arr, h=1e-5):
    """Central-difference gradient of scalar-valued f at arr, element by element."""
    arr = np.asarray(arr, dtype=np.float64)
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(arr)
        flat[i] = orig - h
        fm = f(arr)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-8):
    """Max |a - n| / max(|a|, |n|, floor) over all elements."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
