"""Pure-numpy versions of the compiled kernels (same signatures, same results)."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride):
    B, C, Hp, Wp = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)


def col2im(cols, B, C, Hp, Wp, kh, kw, stride):
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    patches = cols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    ys = stride * (Ho - 1) + 1
    xs = stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + ys:stride, j:j + xs:stride] += patches[:, :, i, j]
    return out


def _pairwise_sq(a, b):
    # sequential accumulation over features, matching the compiled kernel bit for bit
    s = np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    for d in range(a.shape[1]):
        diff = a[:, None, d] - b[None, :, d]
        s += diff * diff
    return s


def knn_sq_radii(pts, k, block=1024):
    n = pts.shape[0]
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        d = _pairwise_sq(pts[lo:hi], pts)
        d[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        out[lo:hi] = np.partition(d, k - 1, axis=1)[:, k - 1]
    return out


def in_any_ball(queries, centers, sq_radii, block=1024):
    out = np.zeros(queries.shape[0], dtype=np.uint8)
    for lo in range(0, queries.shape[0], block):
        d = _pairwise_sq(queries[lo:lo + block], centers)
        out[lo:lo + block] = (d <= sq_radii[None, :]).any(axis=1)
    return out
