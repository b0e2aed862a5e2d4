# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: patch extraction for convolution and k-NN ball queries."""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, int kh, int kw, int stride):
    """Unfold a padded (B, C, Hp, Wp) array into (B*Ho*Wo, C*kh*kw) rows."""
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1], Hp = xp.shape[2], Wp = xp.shape[3]
    cdef Py_ssize_t Ho = (Hp - kh) // stride + 1, Wo = (Wp - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B * Ho * Wo, C * kh * kw), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t b, c, oy, ox, i, j, row, col, y0, x0
    with nogil:
        for b in range(B):
            for oy in range(Ho):
                y0 = oy * stride
                for ox in range(Wo):
                    x0 = ox * stride
                    row = (b * Ho + oy) * Wo + ox
                    col = 0
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                out[row, col] = xp[b, c, y0 + i, x0 + j]
                                col += 1
    return out_arr


def col2im(real[:, ::1] cols, int B, int C, int Hp, int Wp, int kh, int kw, int stride):
    """Scatter-add (B*Ho*Wo, C*kh*kw) rows back into a padded (B, C, Hp, Wp) array."""
    cdef Py_ssize_t Ho = (Hp - kh) // stride + 1, Wo = (Wp - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((B, C, Hp, Wp), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, oy, ox, i, j, row, col, y0, x0
    with nogil:
        for b in range(B):
            for oy in range(Ho):
                y0 = oy * stride
                for ox in range(Wo):
                    x0 = ox * stride
                    row = (b * Ho + oy) * Wo + ox
                    col = 0
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                out[b, c, y0 + i, x0 + j] += cols[row, col]
                                col += 1
    return out_arr


cdef inline double _sqdist(const double[:, ::1] a, Py_ssize_t i,
                           const double[:, ::1] b, Py_ssize_t j, Py_ssize_t D) noexcept nogil:
    cdef double s = 0.0, diff
    cdef Py_ssize_t d
    for d in range(D):
        diff = a[i, d] - b[j, d]
        s = s + diff * diff
    return s


def knn_sq_radii(const double[:, ::1] pts, int k):
    """Squared distance from each point to its k-th nearest *other* point."""
    cdef Py_ssize_t n = pts.shape[0], D = pts.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    best_arr = np.empty(k, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] best = best_arr
    cdef Py_ssize_t i, j, m, filled
    cdef double dist
    with nogil:
        for i in range(n):
            filled = 0
            for j in range(n):
                if j == i:
                    continue
                dist = _sqdist(pts, i, pts, j, D)
                if filled < k:
                    m = filled
                    filled += 1
                elif dist < best[k - 1]:
                    m = k - 1
                else:
                    continue
                while m > 0 and best[m - 1] > dist:
                    best[m] = best[m - 1]
                    m -= 1
                best[m] = dist
            out[i] = best[k - 1]
    return out_arr


def in_any_ball(const double[:, ::1] queries, const double[:, ::1] centers,
                const double[::1] sq_radii):
    """For each query, whether some center satisfies |q - c|^2 <= r_c^2."""
    cdef Py_ssize_t m = queries.shape[0], n = centers.shape[0], D = queries.shape[1]
    out_arr = np.zeros(m, dtype=np.uint8)
    cdef cnp.uint8_t[::1] out = out_arr
    cdef Py_ssize_t q, c
    with nogil:
        for q in range(m):
            for c in range(n):
                if _sqdist(queries, q, centers, c, D) <= sq_radii[c]:
                    out[q] = 1
                    break
    return out_arr
