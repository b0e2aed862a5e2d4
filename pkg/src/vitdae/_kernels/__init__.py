"""Hot numerical kernels.

The compiled extension is used when it was built; otherwise the numpy
implementation in ``_pykernels`` is used. Set ``VITDAE_PURE_PYTHON=1`` to force
the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("VITDAE_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def im2col(xp, kh, kw, stride, impl=None):
    impl = impl or _impl
    return impl.im2col(np.ascontiguousarray(xp), int(kh), int(kw), int(stride))


def col2im(cols, shape, kh, kw, stride, impl=None):
    impl = impl or _impl
    B, C, Hp, Wp = shape
    return impl.col2im(np.ascontiguousarray(cols), B, C, Hp, Wp, int(kh), int(kw), int(stride))


def knn_sq_radii(points, k, impl=None):
    """Squared distance of every row to its k-th nearest other row."""
    impl = impl or _impl
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if not 1 <= k < pts.shape[0]:
        raise ValueError(f"k={k} must satisfy 1 <= k < n={pts.shape[0]}")
    return impl.knn_sq_radii(pts, int(k))


def in_any_ball(queries, centers, sq_radii, impl=None):
    """Boolean mask: query lies inside (or on) at least one center's ball."""
    impl = impl or _impl
    q = np.ascontiguousarray(queries, dtype=np.float64)
    c = np.ascontiguousarray(centers, dtype=np.float64)
    r = np.ascontiguousarray(sq_radii, dtype=np.float64)
    return impl.in_any_ball(q, c, r).astype(bool)


def implementations():
    """All importable kernel backends, keyed by name."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
