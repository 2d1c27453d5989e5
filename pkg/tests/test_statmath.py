"""Unit tests for the statistical kernel."""

import math

import numpy as np
import pytest
from scipy import integrate

from covcal import statmath
from covcal.errors import EmptyInput, InvalidInput, SingularCovariance
from covcal.statmath import (
    CovMatrix,
    EmpiricalDensity,
    NeesSeries,
    build_density,
    chi2_cdf,
    chi2_pdf,
    chi2_quantile,
    count_sigma_intervals,
    eig_symmetric,
    l2_divergence,
    mc_nees_test,
    nees,
    nees_series,
    sigma_coordinates,
)


def random_pd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n))


class TestCovMatrix:
    def test_pack_unpack_roundtrip(self):
        rng = np.random.default_rng(1)
        for n in (1, 2, 5, 9):
            mat = random_pd(rng, n)
            cov = CovMatrix.from_matrix(mat)
            assert cov.dim == n
            np.testing.assert_allclose(cov.full(), mat, atol=1e-14)
            # exact symmetry by construction
            full = cov.full()
            assert np.max(np.abs(full - full.T)) == 0.0

    def test_rejects_negative_definite(self):
        with pytest.raises(InvalidInput):
            CovMatrix.from_matrix([[1.0, 0.0], [0.0, -1.0]])

    def test_rejects_non_finite(self):
        with pytest.raises(InvalidInput):
            CovMatrix.from_matrix([[np.nan, 0.0], [0.0, 1.0]])

    def test_accepts_semidefinite(self):
        cov = CovMatrix.from_matrix([[1.0, 0.0], [0.0, 0.0]])
        assert cov.trace == 1.0


class TestEig:
    def test_diagonal(self):
        dec = eig_symmetric(np.diag([4.0, 9.0]))
        np.testing.assert_allclose(dec.eigenvalues, [9.0, 4.0])
        np.testing.assert_allclose(np.abs(dec.eigenvectors), np.eye(2)[:, ::-1])

    def test_identity(self):
        dec = eig_symmetric(np.eye(3))
        np.testing.assert_allclose(dec.eigenvalues, [1.0, 1.0, 1.0])

    def test_hand_solved_2x2(self):
        # characteristic polynomial of [[2,1],[1,2]]: (2-l)^2 - 1 = 0
        dec = eig_symmetric(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(dec.eigenvalues, [3.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(np.abs(dec.eigenvectors),
                                   np.full((2, 2), 1 / math.sqrt(2)), atol=1e-12)

    def test_reconstruction_and_orthogonality(self):
        rng = np.random.default_rng(7)
        for n in (2, 3, 6, 12):
            for _ in range(5):
                mat = random_pd(rng, n)
                dec = eig_symmetric(mat)
                rel = np.linalg.norm(dec.reconstruct() - mat) / np.linalg.norm(mat)
                assert rel < 1e-10
                gram = dec.eigenvectors.T @ dec.eigenvectors
                assert np.max(np.abs(gram - np.eye(n))) < 1e-10
                assert np.all(np.diff(dec.eigenvalues) <= 0)

    def test_non_finite_raises(self):
        with pytest.raises(InvalidInput):
            eig_symmetric(np.array([[np.inf, 0.0], [0.0, 1.0]]))


class TestSigmaCoordinates:
    def test_axis_aligned(self):
        nu = sigma_coordinates([2.0, 3.0], [0.0, 0.0], np.diag([4.0, 9.0]))
        np.testing.assert_allclose(np.abs(nu), [1.0, 1.0], atol=1e-12)

    def test_zero_difference(self):
        rng = np.random.default_rng(3)
        sigma = random_pd(rng, 4)
        nu = sigma_coordinates(np.ones(4), np.ones(4), sigma)
        np.testing.assert_allclose(nu, 0.0, atol=1e-12)

    def test_agrees_with_explicit_inverse(self):
        # oracle: ||nu||^2 must equal d^T Sigma^{-1} d with the explicit
        # 2x2 inverse of [[2,1],[1,2]] = (1/3) [[2,-1],[-1,2]]
        d = np.array([1.0, 1.0])
        explicit = d @ (np.array([[2.0, -1.0], [-1.0, 2.0]]) / 3.0) @ d
        nu = sigma_coordinates(d, np.zeros(2), np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert abs(float(nu @ nu) - explicit) < 1e-12

    def test_singular_raises(self):
        with pytest.raises(SingularCovariance):
            sigma_coordinates([1.0, 0.0], [0.0, 0.0], np.diag([1.0, 0.0]))

    def test_matches_nees(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = rng.integers(2, 8)
            sigma = random_pd(rng, n)
            v = rng.standard_normal(n)
            u = rng.standard_normal(n)
            nu = sigma_coordinates(v, u, sigma)
            assert abs(float(nu @ nu) - nees(v - u, sigma)) < 1e-10


class TestCountSigmaIntervals:
    def test_zeros(self):
        counts = count_sigma_intervals(np.zeros((3, 2)))
        np.testing.assert_allclose(counts.per_dim, 100.0)

    def test_empty_raises(self):
        with pytest.raises(EmptyInput):
            count_sigma_intervals(np.zeros((0, 2)))

    def test_standard_normal_convergence(self):
        # oracle: the normal CDF gives 68.2689, 95.4500, 99.7300
        rng = np.random.default_rng(2024)
        nus = rng.standard_normal((1_000_000, 2))
        counts = count_sigma_intervals(nus)
        expected = np.array([68.2689, 95.4500, 99.7300])
        assert np.max(np.abs(counts.per_dim - expected)) < 0.2

    def test_whitened_gaussian_draws(self):
        # draws from N(0, Sigma) whitened through sigma_coordinates must be
        # standard normal per dimension
        rng = np.random.default_rng(5)
        sigma = random_pd(rng, 3)
        chol = np.linalg.cholesky(sigma)
        samples = rng.standard_normal((1_000_000, 3)) @ chol.T
        dec = eig_symmetric(sigma)
        nus = (samples @ dec.eigenvectors) / np.sqrt(dec.eigenvalues)
        counts = count_sigma_intervals(nus)
        expected = np.array([68.2689, 95.4500, 99.7300])
        assert np.max(np.abs(counts.per_dim - expected)) < 0.2


class TestNees:
    def test_identity(self):
        assert nees([1.0, 0.0], np.eye(2)) == pytest.approx(1.0, abs=1e-14)

    def test_zero_error(self):
        assert nees(np.zeros(3), np.eye(3)) == 0.0

    def test_hand_inverse(self):
        # diag(1, 4): 1/1 + 4/4 = 2
        assert nees([1.0, 2.0], np.diag([1.0, 4.0])) == pytest.approx(2.0, abs=1e-14)

    def test_singular_raises(self):
        with pytest.raises(SingularCovariance):
            nees([1.0, 1.0], np.zeros((2, 2)))

    def test_near_singular_regularizes(self, caplog):
        import logging

        with caplog.at_level(logging.WARNING, logger="covcal.statmath"):
            value = nees([1.0, 0.0], np.diag([1.0, 0.0]))
        assert value > 0
        assert any("regularized" in r.message for r in caplog.records)

    def test_series_matches_scalar(self):
        rng = np.random.default_rng(9)
        n = 4
        errors = rng.standard_normal((50, n))
        covs = np.stack([statmath.pack_upper(random_pd(rng, n)) for _ in range(50)])
        series = nees_series(errors, covs)
        for k in range(50):
            expected = nees(errors[k], statmath.unpack_upper(covs[k], n))
            assert series.values[k] == pytest.approx(expected, rel=1e-12)


class TestChi2:
    def test_pdf_at_zero_dof2(self):
        assert chi2_pdf(0.0, 2) == pytest.approx(0.5, abs=1e-14)

    def test_pdf_closed_form_dof2(self):
        # chi2_2 density is exp(-x/2)/2
        xs = np.linspace(0.0, 20.0, 100)
        np.testing.assert_allclose(chi2_pdf(xs, 2), np.exp(-xs / 2.0) / 2.0,
                                   atol=1e-14)

    def test_pdf_value(self):
        assert chi2_pdf(2.0, 2) == pytest.approx(math.exp(-1.0) / 2.0, rel=1e-12)

    def test_pdf_integrates_to_one(self):
        total, err = integrate.quad(lambda x: chi2_pdf(x, 9), 0.0, np.inf)
        assert abs(total - 1.0) < 1e-6

    def test_quantile_closed_form_dof2(self):
        # chi2_2 CDF is 1 - exp(-x/2), so the quantile is -2 ln(1-p)
        assert chi2_quantile(0.5, 2) == pytest.approx(2.0 * math.log(2.0), abs=1e-9)
        assert chi2_quantile(0.95, 2) == pytest.approx(-2.0 * math.log(0.05), abs=1e-9)
        assert chi2_quantile(0.95, 2) == pytest.approx(5.99146, abs=1e-5)

    def test_quantile_cdf_roundtrip(self):
        for dof in (1, 2, 5, 9):
            for x0 in (0.5, 2.0, 7.5, 20.0):
                p = chi2_cdf(x0, dof)
                assert chi2_quantile(p, dof) == pytest.approx(x0, abs=1e-8)

    def test_invalid_args(self):
        with pytest.raises(InvalidInput):
            chi2_pdf(-1.0, 2)
        with pytest.raises(InvalidInput):
            chi2_quantile(0.0, 2)
        with pytest.raises(InvalidInput):
            chi2_quantile(1.5, 2)
        with pytest.raises(InvalidInput):
            chi2_pdf(1.0, 0)


class TestMcNeesTest:
    def test_iid_chi2_coverage(self):
        rng = np.random.default_rng(31)
        dof, m, steps = 3, 8, 10_000
        runs = [NeesSeries(values=rng.chisquare(dof, steps), dof=dof)
                for _ in range(m)]
        result = mc_nees_test(runs, confidence=0.95)
        assert result.dof_total == m * dof
        assert abs(100.0 * result.fraction_in_interval - 95.0) < 2.0

    def test_all_zero_below_lower(self):
        runs = [NeesSeries(values=np.zeros(100), dof=2) for _ in range(5)]
        result = mc_nees_test(runs, confidence=0.95)
        assert not np.any(result.in_interval)
        assert np.all(result.sums < result.lower)

    def test_empty_raises(self):
        with pytest.raises(EmptyInput):
            mc_nees_test([])


class TestBuildDensity:
    def test_single_bin_mass(self):
        series = NeesSeries(values=np.full(10, 3.0), dof=2)
        density = build_density(series, bins=1)
        width = density.bin_edges[1] - density.bin_edges[0]
        assert density.bin_heights[0] == pytest.approx(1.0 / width)

    def test_integrates_to_one(self):
        rng = np.random.default_rng(4)
        series = NeesSeries(values=rng.chisquare(5, 1000), dof=5)
        density = build_density(series)
        total = np.sum(density.bin_heights * density.widths)
        assert abs(total - 1.0) < 1e-12

    def test_support_covers_quantile(self):
        series = NeesSeries(values=np.array([0.1, 0.2]), dof=9)
        density = build_density(series)
        assert density.bin_edges[-1] >= chi2_quantile(0.999, 9)

    def test_heights_match_pdf(self):
        # sampling oracle: bin heights of 1e6 chi-square draws within
        # 3 standard errors of the density at bin centers
        rng = np.random.default_rng(99)
        n = 1_000_000
        series = NeesSeries(values=rng.chisquare(9, n), dof=9)
        density = build_density(series)
        pdf = chi2_pdf(density.centers, 9)
        se = np.sqrt(pdf / (n * density.widths))
        usable = pdf * n * density.widths > 20  # skip near-empty bins
        dev = np.abs(density.bin_heights - pdf)[usable]
        # a few 3-sigma excursions among ~hundreds of bins are expected;
        # demand 99% inside
        assert np.mean(dev < 3.0 * se[usable]) > 0.99

    def test_two_seeds_close(self):
        rng1 = np.random.default_rng(17)
        rng2 = np.random.default_rng(18)
        grid = np.linspace(0.0, 40.0, 4001)

        def step_density(values):
            d = build_density(NeesSeries(values=values, dof=9))
            idx = np.clip(
                np.searchsorted(d.bin_edges, grid, side="right") - 1,
                0, len(d.bin_heights) - 1,
            )
            heights = d.bin_heights[idx]
            heights[grid >= d.bin_edges[-1]] = 0.0
            return heights

        p1 = step_density(rng1.chisquare(9, 1_000_000))
        p2 = step_density(rng2.chisquare(9, 1_000_000))
        div = math.sqrt(np.trapezoid((p1 - p2) ** 2, grid))
        assert div < 0.02

    def test_empty_raises(self):
        with pytest.raises(EmptyInput):
            build_density(NeesSeries(values=np.zeros(0), dof=2))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(55)
        values = rng.chisquare(4, 5000)
        d1 = build_density(NeesSeries(values=values, dof=4))
        d2 = build_density(NeesSeries(values=rng.permutation(values), dof=4))
        np.testing.assert_array_equal(d1.bin_heights, d2.bin_heights)
        assert l2_divergence(d1, 4) == l2_divergence(d2, 4)


class TestL2Divergence:
    def test_matches_quadrature_oracle(self):
        # independent oracle: integrate (p - q)^2 with adaptive quadrature
        # over each bin and the tail regions
        rng = np.random.default_rng(41)
        series = NeesSeries(values=rng.chisquare(4, 400), dof=4)
        density = build_density(series)

        total = 0.0
        for i in range(len(density.bin_heights)):
            h = density.bin_heights[i]
            val, _ = integrate.quad(
                lambda x, h=h: (h - chi2_pdf(x, 4)) ** 2,
                density.bin_edges[i], density.bin_edges[i + 1],
            )
            total += val
        tail, _ = integrate.quad(
            lambda x: chi2_pdf(x, 4) ** 2, density.bin_edges[-1], np.inf, limit=200
        )
        total += tail
        assert l2_divergence(density, 4) == pytest.approx(math.sqrt(total), rel=1e-8)

    def test_discretized_pdf_converges_to_zero(self):
        # the bin-averaged pdf is the L2-optimal step function; its
        # divergence is the within-bin approximation error and shrinks as
        # the grid refines
        dof = 9
        far = chi2_quantile(1.0 - 1e-12, dof)
        divs = []
        for bins in (250, 1000, 4000):
            edges = np.linspace(0.0, far, bins + 1)
            heights = np.diff(chi2_cdf(edges, dof)) / np.diff(edges)
            density = EmpiricalDensity(
                bin_edges=edges, bin_heights=heights, sample_count=0
            )
            divs.append(l2_divergence(density, dof))
        assert divs[0] > divs[1] > divs[2]
        assert divs[2] < 1e-3

    def test_32k_chi2_9_scale(self):
        # the paper-sized test set: well-calibrated NEES must read as a
        # small divergence
        rng = np.random.default_rng(2718)
        series = NeesSeries(values=rng.chisquare(9, 32_470), dof=9)
        div = l2_divergence(build_density(series), 9)
        assert div < 0.15

    def test_point_mass_is_maximal(self):
        # all NEES at zero: no overlap with chi2, divergence near
        # sqrt(int pemp^2 + int pchi^2)
        series = NeesSeries(values=np.zeros(1000), dof=4)
        density = build_density(series, bins=50)
        div = l2_divergence(density, 4)
        assert div > 1.0  # spike of height 1/width dominates

    def test_disjoint_support_exact(self):
        # NEES far to the right of chi2_4: divergence is exactly
        # sqrt(sum h^2 w + int pdf^2) with int pdf^2 = 1/8 for 4 dof
        rng = np.random.default_rng(6)
        series = NeesSeries(values=1e4 + 100.0 * rng.random(100_000), dof=4)
        density = build_density(series)
        spike = float(np.sum(density.bin_heights**2 * density.widths))
        div = l2_divergence(density, 4)
        assert div == pytest.approx(math.sqrt(spike + 0.125), rel=1e-10)

    def test_no_overlap_asymptote_matches_tables(self):
        # a density spread thinly far from the chi-square support leaves
        # only the pure chi-square term: sqrt(1/8) = 0.35355 for 4 dof and
        # 0.26973 for 9 dof, the saturation values seen in badly
        # miscalibrated covariance rows
        rng = np.random.default_rng(8)
        for dof, limit in ((4, 0.3535), (9, 0.2697)):
            values = 1e5 * (1.0 + rng.random(100_000))
            div = l2_divergence(build_density(NeesSeries(values=values, dof=dof)), dof)
            assert div == pytest.approx(limit, abs=2e-3)

    def test_dof_one_rejected(self):
        series = NeesSeries(values=np.array([1.0, 2.0, 3.0]), dof=1)
        with pytest.raises(InvalidInput):
            l2_divergence(build_density(series), 1)

    def test_tail_closed_form(self):
        # quadrature oracle for the analytic tail term
        for dof in (1, 2, 5, 9):
            t = 5.0
            expected, _ = integrate.quad(
                lambda x: chi2_pdf(x, dof) ** 2, t, np.inf, limit=200
            )
            assert statmath._chi2_sq_tail(t, dof) == pytest.approx(expected, rel=1e-9)


class TestEmpiricalDensityInvariants:
    def test_rejects_bad_edges(self):
        with pytest.raises(InvalidInput):
            EmpiricalDensity(
                bin_edges=np.array([0.0, 1.0, 1.0]),
                bin_heights=np.array([0.5, 0.5]),
                sample_count=2,
            )

    def test_rejects_unnormalized(self):
        with pytest.raises(InvalidInput):
            EmpiricalDensity(
                bin_edges=np.array([0.0, 1.0, 2.0]),
                bin_heights=np.array([0.2, 0.2]),
                sample_count=5,
            )


def test_determinism():
    rng = np.random.default_rng(123)
    values = rng.chisquare(4, 10_000)
    d1 = build_density(NeesSeries(values=values.copy(), dof=4))
    d2 = build_density(NeesSeries(values=values.copy(), dof=4))
    assert l2_divergence(d1, 4) == l2_divergence(d2, 4)
    mat = random_pd(rng, 5)
    dec1 = eig_symmetric(mat)
    dec2 = eig_symmetric(mat.copy())
    np.testing.assert_array_equal(dec1.eigenvalues, dec2.eigenvalues)
    np.testing.assert_array_equal(dec1.eigenvectors, dec2.eigenvectors)
