import math

import numpy as np
import pytest

from refinelab import init as winit
from refinelab.rng import Stream


def test_kaiming_bound_is_sqrt_inverse_fan_in():
    for fan_in in (1, 9, 27, 576, 4608):
        assert winit.kaiming_bound(fan_in) == pytest.approx(math.sqrt(1.0 / fan_in), rel=1e-12)


@pytest.mark.parametrize("shape", [(64, 32, 3, 3), (128, 64, 1, 1), (10, 128)])
def test_kaiming_uniform_bound_and_moments(shape):
    fan_in = winit.fan_in_of(shape)
    w = winit.kaiming_uniform(shape, fan_in, Stream(1)).astype(np.float64)
    b = math.sqrt(1.0 / fan_in)
    assert w.shape == shape
    assert np.abs(w).max() <= b
    se = b / math.sqrt(3 * w.size)
    assert abs(w.mean()) < 5 * se
    assert w.var() == pytest.approx(b * b / 3, rel=0.05)


def test_normal_init_variance():
    w = winit.normal_init((256, 64, 3, 3), 576, Stream(2)).astype(np.float64)
    assert w.var() == pytest.approx(2 / 576, rel=0.02)


@pytest.mark.parametrize("shape", [(8, 8), (16, 4), (4, 16), (32, 16, 3, 3)])
def test_orthogonal_rows_or_columns_orthonormal(shape):
    w = winit.orthogonal_init(shape, Stream(3)).astype(np.float64).reshape(shape[0], -1)
    gram = w @ w.T if w.shape[0] <= w.shape[1] else w.T @ w
    assert np.abs(gram - np.eye(gram.shape[0])).max() <= 1e-5


@pytest.mark.parametrize("rows, cols", [(5, 3), (10, 7), (15, 4), (64, 288), (128, 576)])
def test_sparse_zero_count_per_column(rows, cols):
    w = winit.sparse_init((rows, cols), Stream(4))
    need = -(-rows // 5)  # exact ceil(rows / 5)
    assert np.all((w == 0).sum(axis=0) == need)


def test_sparse_rejects_bad_sparsity():
    with pytest.raises(ValueError):
        winit.sparse_init((4, 4), Stream(0), sparsity=1.0)


def test_one_dimensional_shape_rejected():
    with pytest.raises(ValueError):
        winit.fan_in_of((5,))


def test_draws_are_reproducible_and_float32():
    a = winit.kaiming_uniform((4, 3, 3, 3), 27, Stream(9))
    b = winit.kaiming_uniform((4, 3, 3, 3), 27, Stream(9))
    assert a.dtype == np.float32 and a.tobytes() == b.tobytes()
