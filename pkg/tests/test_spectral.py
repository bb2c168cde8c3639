import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from jafr import autodiff as ad
from jafr.autodiff import ContractViolation, Tensor
from jafr.spectral import (channel_mean_spectrum, dft2, magnitude_map, naive_dft2,
                           read_pgm, to_log_pgm_bytes, write_spectrum_csv, write_spectrum_pgm)

from conftest import central_diff, rel_err


def _complex(x):
    re, im = dft2(Tensor(x))
    return re.data + 1j * im.data


def test_constant_image_is_dc_only():
    out = _complex(np.full((4, 4), 0.7))
    assert out[0, 0].real == pytest.approx(16 * 0.7, abs=1e-12)
    rest = out.copy()
    rest[0, 0] = 0
    assert np.max(np.abs(rest)) < 1e-12


def test_delta_image_flat_spectrum():
    x = np.zeros((5, 6))
    x[0, 0] = 1.0
    mags = magnitude_map(*dft2(Tensor(x))).numpy()
    np.testing.assert_allclose(mags, 1.0, atol=1e-12)


@pytest.mark.parametrize("shape", [(8, 8), (5, 7), (1, 4)])
def test_matches_naive_double_sum(shape, rng):
    x = rng.normal(size=shape)
    assert np.max(np.abs(_complex(x) - naive_dft2(x))) < 1e-10


def test_matches_numpy_fft(rng):
    x = rng.normal(size=(3, 2, 16, 12))
    assert np.max(np.abs(_complex(x) - np.fft.fft2(x))) < 1e-10


def test_magnitude_examples():
    assert magnitude_map(Tensor([3.0]), Tensor([4.0])).numpy()[0] == pytest.approx(5.0, abs=1e-12)
    assert magnitude_map(Tensor([0.0]), Tensor([0.0]), eps=1e-12).numpy()[0] == pytest.approx(1e-6, rel=1e-12)
    with pytest.raises(ContractViolation):
        magnitude_map(Tensor([0.0, 1.0]), Tensor([0.0]))


def test_magnitude_sum_gradient_fd(rng):
    x0 = rng.normal(size=(6, 5))
    f = lambda v: float(magnitude_map(*dft2(Tensor(v))).numpy().sum())
    x = Tensor(x0, requires_grad=True)
    g = ad.grad(ad.tsum(magnitude_map(*dft2(x)).mags), x)
    assert rel_err(g.data, central_diff(f, x0)) < 1e-5


def test_channel_mean(rng):
    one = rng.normal(size=(1, 6, 6))
    single = magnitude_map(*dft2(Tensor(one[0]))).numpy()
    np.testing.assert_allclose(channel_mean_spectrum(Tensor(one)).numpy(), single, atol=1e-12)
    np.testing.assert_allclose(channel_mean_spectrum(Tensor(np.repeat(one, 3, axis=0))).numpy(), single, atol=1e-12)
    three = rng.normal(size=(3, 8, 8))
    oracle = np.mean([np.abs(naive_dft2(c)) for c in three], axis=0)
    assert np.max(np.abs(channel_mean_spectrum(Tensor(three)).numpy() - oracle)) < 1e-10
    with pytest.raises(ContractViolation):
        channel_mean_spectrum(Tensor(np.zeros((0, 4, 4))))


@given(arrays(np.float64, (6, 6), elements=st.floats(-5, 5)),
       arrays(np.float64, (6, 6), elements=st.floats(-5, 5)),
       st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(x, y, a, b):
    lhs = _complex(a * x + b * y)
    rhs = a * _complex(x) + b * _complex(y)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


@given(arrays(np.float64, (7, 5), elements=st.floats(-5, 5)))
def test_parseval_and_conjugate_symmetry(x):
    F = _complex(x)
    energy = np.sum(x ** 2)
    assert abs(np.sum(np.abs(F) ** 2) - 35 * energy) <= 1e-9 * max(35 * energy, 1e-300) + 1e-20
    mags = magnitude_map(*dft2(Tensor(x))).numpy()
    h, w = mags.shape
    i, j = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    np.testing.assert_allclose(mags, mags[(-i) % h, (-j) % w], atol=1e-9)


def test_exports(tmp_path, rng):
    mags = np.abs(rng.normal(size=(8, 8)))
    write_spectrum_pgm(tmp_path / "s.pgm", mags)
    px = read_pgm(tmp_path / "s.pgm")
    assert px.shape == (8, 8) and px.max() == 255
    assert to_log_pgm_bytes(mags).startswith(b"P5\n8 8\n255\n")
    write_spectrum_csv(tmp_path / "s.csv", mags)
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "s.csv", delimiter=","), mags)
