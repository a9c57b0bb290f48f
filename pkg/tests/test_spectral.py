import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msgwtcn.errors import ConfigError, NoConvergence, NotSymmetric, ShapeError
from msgwtcn.graph import COMBINATORIAL, NORMALIZED, laplacian
from msgwtcn.spectral import (
    build_bases, chebyshev_coeffs, chebyshev_eval, chebyshev_wavelet, diagonal_mass_ratio, eig_sym,
    exact_wavelet, gershgorin_bound, graph_fourier_convolve, heat_kernel, save_basis_csv, sparsify,
    wavelet_convolve,
)

from conftest import grid_graph, random_graph

KS = (3, 5, 10, 20, 30)


# eig_sym


def test_eig_identity():
    es = eig_sym(np.eye(3))
    np.testing.assert_allclose(es.eigenvalues, [1, 1, 1])
    np.testing.assert_allclose(es.eigenvectors.T @ es.eigenvectors, np.eye(3), atol=1e-14)


def test_eig_small_laplacians(p2, p3):
    np.testing.assert_allclose(eig_sym(laplacian(p2, NORMALIZED)).eigenvalues, [0, 2], atol=1e-14)
    lc = laplacian(p3, COMBINATORIAL)
    ev = eig_sym(lc).eigenvalues
    np.testing.assert_allclose(ev, [0, 1, 3], atol=1e-13)
    # characteristic polynomial of the P3 Laplacian: l^3 - 4 l^2 + 3 l
    assert np.abs(np.polyval([1, -4, 3, 0], ev)).max() < 1e-12


def test_eig_rejects_asymmetric():
    with pytest.raises(NotSymmetric):
        eig_sym(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ShapeError):
        eig_sym(np.ones((2, 3)))


def test_eig_no_convergence():
    m = np.array([[1.0, 0.5, 0.2], [0.5, 2.0, 0.1], [0.2, 0.1, 3.0]])
    with pytest.raises(NoConvergence):
        eig_sym(m, max_sweeps=0)


def test_eig_odd_and_diagonal_sizes():
    for n in (1, 2, 5, 8):
        d = np.diag(np.arange(n, 0, -1.0))
        np.testing.assert_array_equal(eig_sym(d).eigenvalues, np.arange(1.0, n + 1))


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_eig_matches_dense_oracle(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    m = a + a.T
    es = eig_sym(m)
    u, lam = es.eigenvectors, es.eigenvalues
    assert np.all(np.diff(lam) >= 0)
    np.testing.assert_allclose(lam, np.linalg.eigvalsh(m), atol=1e-10 * max(1, np.abs(lam).max()))
    np.testing.assert_allclose(u.T @ u, np.eye(n), atol=1e-8)
    assert np.abs(m @ u - u * lam).max() < 1e-7


def test_eig_connected_graph_has_zero_mode(rng):
    es = eig_sym(laplacian(random_graph(rng, 20), NORMALIZED))
    assert abs(es.eigenvalues[0]) < 1e-10
    assert es.eigenvalues[1] > 1e-6


# kernels and exact wavelets


def test_heat_kernel_values():
    assert heat_kernel(3.0, [0.0])[0] == 1.0
    np.testing.assert_array_equal(heat_kernel(0.0, [0.5, 2.0, 7.0]), 1.0)
    assert heat_kernel(1.0, [2.0])[0] == pytest.approx(0.1353352832366127, abs=1e-15)


def test_exact_wavelet_scale_zero(p3):
    b = exact_wavelet(laplacian(p3, NORMALIZED), 0.0)
    np.testing.assert_allclose(b.psi, np.eye(3), atol=1e-14)
    np.testing.assert_allclose(b.psi_inv, np.eye(3), atol=1e-14)


def test_exact_wavelet_p2_closed_form(p2):
    e = math.exp(-2.0)
    expected = 0.5 * np.array([[1 + e, 1 - e], [1 - e, 1 + e]])
    b = exact_wavelet(laplacian(p2, NORMALIZED), 1.0)
    np.testing.assert_allclose(b.psi, expected, atol=1e-14)
    np.testing.assert_allclose(b.psi, [[0.5677, 0.4323], [0.4323, 0.5677]], atol=1e-4)


def test_negative_scale_rejected(p2):
    with pytest.raises(ConfigError):
        exact_wavelet(laplacian(p2), -1.0)
    with pytest.raises(ConfigError):
        chebyshev_wavelet(laplacian(p2), float("nan"), 3)


@settings(max_examples=20, deadline=None)
@given(st.integers(5, 50), st.integers(0, 2**32 - 1), st.floats(0.001, 6.0))
def test_exact_identity_and_symmetry(n, seed, s):
    b = exact_wavelet(laplacian(random_graph(np.random.default_rng(seed), n), NORMALIZED), s)
    assert b.identity_error() < 1e-8
    assert np.abs(b.psi - b.psi.T).max() < 1e-10


# Chebyshev route


def test_coeffs_scale_zero():
    c = chebyshev_coeffs(0.0, 2.0, 5)
    np.testing.assert_allclose(c, [1, 0, 0, 0, 0, 0], atol=1e-12)


def test_coeffs_length_and_errors():
    assert len(chebyshev_coeffs(1.0, 2.0, 0)) == 1
    with pytest.raises(ConfigError):
        chebyshev_coeffs(1.0, 0.0, 3)
    with pytest.raises(ConfigError):
        chebyshev_coeffs(1.0, 2.0, -1)


@pytest.mark.parametrize("s", [0.85, 3.85, 5.85])
def test_truncation_error_decreases(s):
    grid = np.linspace(0.0, 2.0, 2001)
    errs = [np.abs(chebyshev_eval(chebyshev_coeffs(s, 2.0, k), grid, 2.0) - np.exp(-s * grid)).max()
            for k in range(3, 31)]
    assert all(b <= a + 1e-15 for a, b in zip(errs, errs[1:]))


def test_coeffs_match_numpy_interpolant():
    # numpy's Chebyshev-Gauss interpolant at the same node count is an
    # independent route to the same coefficients
    s, lmax, k = 2.5, 2.0, 7
    ref = np.polynomial.chebyshev.chebinterpolate(lambda x: np.exp(-s * lmax / 2 * (x + 1)), 63)
    np.testing.assert_allclose(chebyshev_coeffs(s, lmax, k), ref[:k + 1], atol=1e-13)


def test_sign_flip_product_is_one():
    grid = np.linspace(0.0, 2.0, 501)
    for s in (0.85, 3.85):
        f = chebyshev_eval(chebyshev_coeffs(s, 2.0, 40, 1), grid, 2.0)
        g = chebyshev_eval(chebyshev_coeffs(s, 2.0, 40, -1), grid, 2.0)
        assert np.abs(f * g - 1).max() < 1e-9


def test_chebyshev_scale_zero_is_identity(rng):
    lap = laplacian(random_graph(rng, 9), NORMALIZED)
    for k in (0, 1, 3, 10):
        b = chebyshev_wavelet(lap, 0.0, k, 2.0)
        np.testing.assert_array_equal(b.psi, np.eye(9))
        np.testing.assert_array_equal(b.psi_inv, np.eye(9))


def test_chebyshev_p2_high_order(p2):
    lap = laplacian(p2, NORMALIZED)
    b = chebyshev_wavelet(lap, 1.0, 30, 2.0)
    ex = exact_wavelet(lap, 1.0)
    assert np.abs(b.psi - ex.psi).max() < 1e-8
    assert np.abs(b.psi_inv - ex.psi_inv).max() < 1e-8


def test_chebyshev_order_improves_at_large_scale(rng):
    lap = laplacian(random_graph(rng, 30), NORMALIZED)
    ex = exact_wavelet(lap, 3.85)
    e3 = np.abs(chebyshev_wavelet(lap, 3.85, 3, 2.0).psi - ex.psi).max()
    e20 = np.abs(chebyshev_wavelet(lap, 3.85, 20, 2.0).psi - ex.psi).max()
    assert e20 < e3


def test_chebyshev_combinatorial_uses_gershgorin(p3):
    lap = laplacian(p3, COMBINATORIAL)
    assert gershgorin_bound(lap) == 4.0
    b = chebyshev_wavelet(lap, 0.5, 30)
    assert np.abs(b.psi - exact_wavelet(lap, 0.5).psi).max() < 1e-10


@settings(max_examples=10, deadline=None)
@given(st.integers(6, 30), st.integers(0, 2**32 - 1), st.sampled_from([0.85, 3.85, 5.85]))
def test_chebyshev_error_non_increasing_in_order(n, seed, s):
    lap = laplacian(random_graph(np.random.default_rng(seed), n), NORMALIZED)
    es = eig_sym(lap)
    ex = exact_wavelet(lap, s, es)
    # rounding slack scales with the entries being compared (psi_inv grows like e^{2s})
    for attr in ("psi", "psi_inv"):
        ref = getattr(ex, attr)
        slack = 1e-12 * max(1.0, np.abs(ref).max())
        errs = [np.abs(getattr(chebyshev_wavelet(lap, s, k, 2.0), attr) - ref).max() for k in KS]
        assert all(b <= a + slack for a, b in zip(errs, errs[1:])), (attr, errs)


# sparsification


def test_sparsify_examples(rng):
    m = rng.normal(size=(6, 6))
    out, dens = sparsify(m, 0.0)
    np.testing.assert_array_equal(out, m)
    assert dens == 1.0
    out, dens = sparsify(m, np.abs(m).max() * 1.01)
    assert not out.any() and dens == 0.0
    densities = [sparsify(m * 1e-3, t)[1] for t in (0, 1e-6, 1e-4, 1e-2)]
    assert all(b <= a for a, b in zip(densities, densities[1:]))
    with pytest.raises(ConfigError):
        sparsify(m, -1.0)


def test_sparsified_basis_records_threshold():
    g = grid_graph(4, 4)
    b = chebyshev_wavelet(laplacian(g, NORMALIZED), 0.85, 3, 2.0, sparsify_threshold=1e-2)
    assert b.sparsify_threshold == 1e-2
    assert np.all((b.psi == 0) | (np.abs(b.psi) >= 1e-2))
    assert b.density()[0] < 1.0


# convolutions


def test_fourier_convolve_examples(rng):
    g = random_graph(rng, 10)
    lap = laplacian(g, NORMALIZED)
    es = eig_sym(lap)
    x = rng.normal(size=10)
    np.testing.assert_allclose(graph_fourier_convolve(x, np.ones(10), es), x, atol=1e-12)
    np.testing.assert_array_equal(graph_fourier_convolve(x, np.zeros(10), es), 0)
    for s in (0.3, 2.0):
        y = graph_fourier_convolve(x, heat_kernel(s, es.eigenvalues), es)
        np.testing.assert_allclose(y, exact_wavelet(lap, s, es).psi @ x, atol=1e-8)
    with pytest.raises(ShapeError):
        graph_fourier_convolve(x[:5], np.ones(10), es)


def test_wavelet_convolve_examples(rng):
    g = random_graph(rng, 10)
    lap = laplacian(g, NORMALIZED)
    es = eig_sym(lap)
    b = exact_wavelet(lap, 1.3, es)
    x = rng.normal(size=10)
    np.testing.assert_allclose(wavelet_convolve(x, np.ones(10), b), x, atol=1e-8)
    np.testing.assert_array_equal(wavelet_convolve(x, np.zeros(10), b), 0)
    with pytest.raises(ShapeError):
        wavelet_convolve(x, np.ones(9), b)


def test_heat_spectrum_pushed_through_wavelet_is_double_diffusion(rng):
    # filtering by e^{-s lambda} in the Fourier domain and then applying the
    # wavelet at scale s equals one Fourier filter with e^{-2 s lambda}
    g = random_graph(rng, 10)
    lap = laplacian(g, NORMALIZED)
    es = eig_sym(lap)
    s = 0.7
    b = exact_wavelet(lap, s, es)
    x = rng.normal(size=10)
    once = graph_fourier_convolve(x, heat_kernel(s, es.eigenvalues), es)
    via_wavelet = wavelet_convolve(b.psi @ once, np.ones(10), b)
    np.testing.assert_allclose(via_wavelet, graph_fourier_convolve(x, heat_kernel(2 * s, es.eigenvalues), es),
                               atol=1e-8)


def test_locality_ordering_on_grid():
    g = grid_graph(10, 10)
    lap = laplacian(g, NORMALIZED)
    es = eig_sym(lap)
    ratios = [diagonal_mass_ratio(exact_wavelet(lap, s, es).psi) for s in (0.85, 3.85, 5.85)]
    assert ratios[0] > ratios[1] > ratios[2]


def test_build_bases_shares_repeated_scales(p3):
    bases = build_bases(p3, [0.85, 0.85, 3.85], method="exact")
    assert bases[0] is bases[1] and bases[0] is not bases[2]
    assert all(b.method == "exact" and b.sparsify_threshold == 0 for b in bases)
    cheb = build_bases(p3, [0.85], order=3)
    assert cheb[0].method == "chebyshev" and cheb[0].order == 3
    with pytest.raises(ConfigError):
        build_bases(p3, [1.0], method="bogus")


def test_save_basis_csv_roundtrip(tmp_path, p3):
    b = exact_wavelet(laplacian(p3, NORMALIZED), 0.85)
    save_basis_csv(b, tmp_path / "psi.csv", tmp_path / "inv.csv")
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "psi.csv", delimiter=","), b.psi)
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "inv.csv", delimiter=","), b.psi_inv)
