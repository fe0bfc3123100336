import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from mfchaos.norms import (
    Dictionary,
    QuadratureError,
    build_dictionary,
    default_dictionary,
    dual_norm_proxy,
    evaluate_power_sums,
    normalize_testfn,
    proxy_array,
    sobolev_norm,
)


def spectral_norm_1d(fn, r, qp, half_width=40.0, n=2**15):
    """W^{r,q'} norm on R from FFT derivatives on a wide periodic grid."""
    x = np.linspace(-half_width, half_width, n, endpoint=False)
    h = x[1] - x[0]
    k = 2 * np.pi * np.fft.fftfreq(n, d=h)
    f_hat = np.fft.fft(fn(x))
    total = 0.0
    for order in range(r + 1):
        d = np.fft.ifft((1j * k) ** order * f_hat).real
        total += np.sum(np.abs(d) ** qp) * h
    return total ** (1 / qp)


def spectral_norm_2d(fn, r, qp, half_width=20.0, n=512):
    x = np.linspace(-half_width, half_width, n, endpoint=False)
    h = x[1] - x[0]
    k = 2 * np.pi * np.fft.fftfreq(n, d=h)
    X, Y = np.meshgrid(x, x, indexing="ij")
    f_hat = np.fft.fft2(fn(X, Y))
    total = 0.0
    for a in range(r + 1):
        for b in range(r + 1 - a):
            mult = (1j * k[:, None]) ** a * (1j * k[None, :]) ** b
            d = np.fft.ifft2(mult * f_hat).real
            total += np.sum(np.abs(d) ** qp) * h * h
    return total ** (1 / qp)


def test_unit_gaussian_l2_norm_in_2d():
    tf = normalize_testfn((0.0, 0.0), 0.0, 1.0, r=0, qp=2.0, p=0.0)
    assert tf.c == pytest.approx(math.sqrt(math.pi), rel=1e-4)


def test_homogeneity():
    a = normalize_testfn(2.0, 0.0, 1.0)
    b = normalize_testfn(2.0, 0.0, 1.0, amplitude=2.0)
    assert b.c == pytest.approx(2 * a.c, rel=1e-12)
    z = np.linspace(-3, 3, 50)
    np.testing.assert_allclose(a(z), b(z), rtol=1e-12)


def test_derivatives_increase_norm():
    for xi, theta in [(0.0, 0.0), (1.0, 0.0), (3.0, math.pi / 2)]:
        c0 = normalize_testfn(xi, theta, 2.0, r=0).c
        c1 = normalize_testfn(xi, theta, 2.0, r=1).c
        assert c1 > c0


@pytest.mark.parametrize("xi,theta,sigma,r", [
    (0.0, 0.0, 1.0, 3), (2.0, 0.0, 1.0, 3), (4.0, math.pi / 2, 4.0, 3), (1.0, math.pi / 2, 2.0, 0),
    (3.0, 0.0, 2.0, 4),
])
def test_norm_matches_spectral_oracle_1d(xi, theta, sigma, r):
    qp = 12.0
    ours = sobolev_norm((xi,), theta, sigma, r, qp)
    ref = spectral_norm_1d(lambda x: np.exp(-0.5 * x**2 / sigma**2) * np.cos(xi * x + theta), r, qp)
    assert ours == pytest.approx(ref, rel=1e-4)


def test_norm_matches_spectral_oracle_2d():
    xi, theta, sigma, r, qp = (1.0, -2.0), math.pi / 2, 2.0, 2, 6.0
    ours = sobolev_norm(xi, theta, sigma, r, qp)
    ref = spectral_norm_2d(
        lambda x, y: np.exp(-0.5 * (x**2 + y**2) / sigma**2) * np.cos(xi[0] * x + xi[1] * y + theta), r, qp)
    assert ours == pytest.approx(ref, rel=1e-4)


def test_normalized_functions_lie_on_unit_sphere():
    # the weight cancels, so <z>^{-p} phi must have unit norm
    for f in default_dictionary(1).functions[::4]:
        ref = spectral_norm_1d(lambda x: (1 + x**2) ** (-f.p / 2) * f(x[:, None]), 3, 12.0)
        assert ref == pytest.approx(1.0, abs=1e-4)


def test_refinement_stability():
    for xi, sigma in [(0.0, 1.0), (4.0, 1.0), (2.0, 4.0)]:
        c = sobolev_norm((xi,), 0.0, sigma, 3, 12.0)
        fine = sobolev_norm((xi,), 0.0, sigma, 3, 12.0, rel_tol=1e-10)
        assert abs(c - fine) < 1e-4 * fine


def test_normalization_input_validation():
    with pytest.raises(ValueError):
        sobolev_norm((1.0,), 0.0, 1.0, 5, 12.0)
    with pytest.raises(ValueError):
        sobolev_norm((1.0,), 0.0, 1.0, 3, 1.5)
    with pytest.raises(ValueError):
        sobolev_norm((1.0,), 0.0, 0.0, 3, 12.0)
    with pytest.raises(QuadratureError):
        sobolev_norm((1.0,), 0.0, 1.0, 3, 12.0, max_refine=0)
    with pytest.raises(ValueError):
        normalize_testfn(0.0, math.pi / 2, 1.0)


def test_default_dictionary_shape():
    d1 = default_dictionary(1)
    assert len(d1) == 27
    assert len(set(d1.ids)) == 27
    assert len(default_dictionary(2)) == 3 * (2 * 40 + 1)


def test_dictionary_round_trip_and_validation():
    d = build_dictionary(1, freq_axis=(-1, 0, 1), sigmas=(1.0,))
    assert Dictionary.from_dict(d.to_dict()) == d
    with pytest.raises(ValueError):
        Dictionary(d.functions + d.functions[:1], d.r, d.qp, d.p, d.freq_axis, d.sigmas, d.dim)
    with pytest.raises(ValueError):
        Dictionary((), d.r, d.qp, d.p, d.freq_axis, d.sigmas, d.dim)


def test_proxy_examples():
    d = build_dictionary(1, freq_axis=(0, 1), sigmas=(1.0,))
    assert len(d) == 3
    assert dual_norm_proxy(dict.fromkeys(d.ids, 0.0), d)[0] == 0.0
    value, arg = dual_norm_proxy(dict(zip(d.ids, [0.1, -0.3, 0.2])), d)
    assert value == pytest.approx(0.3)
    assert arg == d.ids[1]
    with pytest.raises(KeyError):
        dual_norm_proxy({d.ids[0]: 1.0}, d)
    v, i = proxy_array(np.array([[0.1, -0.3, 0.2]]))
    assert v[0] == pytest.approx(0.3) and i[0] == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=27, max_size=27), st.integers(1, 26))
def test_proxy_monotone_in_dictionary(values, k):
    d = default_dictionary(1)
    pairings = dict(zip(d.ids, values))
    small = d.subset(d.ids[:k])
    assert dual_norm_proxy(pairings, small)[0] <= dual_norm_proxy(pairings, d)[0]


def test_monte_carlo_pairing_matches_quadrature():
    d = default_dictionary(1)
    rng = np.random.default_rng(3)
    z = rng.normal(1.0, 0.5, size=(10**6, 1))
    vals = d.evaluate(z)
    mc, se = vals.mean(axis=0), vals.std(axis=0, ddof=1) / 1e3
    density = lambda x: math.exp(-0.5 * ((x - 1.0) / 0.5) ** 2) / (0.5 * math.sqrt(2 * math.pi))
    for k, f in enumerate(d.functions):
        exact = integrate.quad(lambda x: f(np.array([[x]]))[0] * density(x), -6, 8, limit=200, epsabs=1e-13)[0]
        assert abs(mc[k] - exact) < 4 * se[k] + 1e-12, f.id


@pytest.mark.parametrize("dim", [1, 2])
def test_power_sum_kernel_matches_direct_evaluation(dim):
    d = build_dictionary(dim, freq_axis=(-2, 0, 1, 3), sigmas=(1.0, 2.5))
    rng = np.random.default_rng(dim)
    z = rng.normal(size=(3, 17, dim))
    center = rng.normal(scale=0.1, size=len(d))
    out = np.empty((3, len(d), 4))
    evaluate_power_sums(z, *d.tables(), d.p, center, 4, out)
    direct = d.evaluate(z) - center
    for k in range(4):
        np.testing.assert_allclose(out[..., k], np.sum(direct ** (k + 1), axis=1), rtol=1e-10, atol=1e-13)
