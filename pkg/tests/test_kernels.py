import numpy as np
import pytest

from ppgvit import _accel, kernels


def _both(fn, *args):
    out = {}
    for name in ("numba", "numpy"):
        _accel.set_backend(name)
        out[name] = fn(*args)
    return out


@pytest.fixture(autouse=True)
def _restore():
    prev = _accel.backend()
    yield
    _accel.set_backend(prev)


def test_recurrence_paths_agree(rng):
    v = rng.standard_normal(300)
    out = _both(kernels.gaussian_recurrence, v, 0.7)
    np.testing.assert_allclose(out["numba"], out["numpy"], rtol=1e-14, atol=0)
    for r in out.values():
        assert np.array_equal(r, r.T)
        assert np.all(np.diag(r) == 1.0)


def test_frame_paths_agree(rng):
    x = rng.standard_normal(1000)
    w = np.hanning(128)
    out = _both(kernels.frame_signal, x, w, 32)
    assert np.array_equal(out["numba"], out["numpy"])
    assert out["numpy"].shape == ((1000 - 128) // 32 + 1, 128)


def test_masked_softmax_paths_agree(rng):
    s = rng.standard_normal((4, 3, 20, 20)) * 5
    m = rng.random((4, 1, 1, 20)) > 0.3
    m[..., 0] = True
    out = _both(kernels.masked_softmax, s, m)
    np.testing.assert_allclose(out["numba"], out["numpy"], rtol=1e-13, atol=1e-300)
    mb = np.broadcast_to(m, s.shape)
    for a in out.values():
        assert np.all(a[~mb] == 0.0)
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)


def test_masked_softmax_empty_row_is_zero(backend):
    out = kernels.masked_softmax(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[True, True], [False, False]]))
    assert np.all(out[1] == 0.0)
    np.testing.assert_allclose(out[0].sum(), 1.0)


def test_masked_softmax_ignores_masked_values(backend):
    s = np.array([[0.5, 1e300, -3.0]])
    m = np.array([[True, False, True]])
    a = kernels.masked_softmax(s, m)
    b = kernels.masked_softmax(np.array([[0.5, -7.0, -3.0]]), m)
    assert np.array_equal(a, b)


def test_set_backend_validation():
    with pytest.raises(ValueError):
        _accel.set_backend("cuda")
