import os
import subprocess
import sys

import numpy as np
import pytest

from vitdae import _kernels

IMPLS = _kernels.implementations()


def test_fallback_selected_by_environment():
    env = {**os.environ, "VITDAE_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", "from vitdae import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_knn_and_balls_agree_exactly(name):
    rng = np.random.default_rng(3)
    pts, q = rng.standard_normal((70, 5)), rng.standard_normal((40, 5))
    ref_r = _kernels.knn_sq_radii(pts, 3, impl=IMPLS["python"])
    r = _kernels.knn_sq_radii(pts, 3, impl=IMPLS[name])
    assert np.array_equal(r, ref_r)
    assert np.array_equal(_kernels.in_any_ball(q, pts, r, impl=IMPLS[name]),
                          _kernels.in_any_ball(q, pts, ref_r, impl=IMPLS["python"]))


def test_knn_bounds():
    with pytest.raises(ValueError):
        _kernels.knn_sq_radii(np.zeros((3, 2)), 3)
    with pytest.raises(ValueError):
        _kernels.knn_sq_radii(np.zeros((3, 2)), 0)


def test_ball_boundary_is_inclusive():
    centers = np.array([[0.0, 0.0]])
    assert _kernels.in_any_ball(np.array([[1.0, 0.0], [1.0, 1e-4]]), centers, np.array([1.0])).tolist() == [
        True, False]
