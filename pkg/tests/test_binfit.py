import math

import numpy as np
import pytest
from scipy import stats

import cdeboost as cb
from cdeboost.binfit import (
    BinGrid,
    BinnedSample,
    CarryingDensity,
    degrees_of_freedom,
    density_at,
    discretize,
    fit_poisson,
    lambda_for_df,
)


@pytest.fixture(scope="module")
def gaussian_setup():
    rng = np.random.default_rng(7)
    y = rng.standard_normal(10_000)
    grid = BinGrid.from_data(y, 40)
    basis = cb.build_basis(y, 10)
    kappa = CarryingDensity.from_data(y)
    binned = discretize(y, grid)
    return y, grid, basis, kappa, binned


class TestBinGrid:
    def test_midpoints_and_width(self):
        grid = BinGrid(n_bins=4, lo=0.0, hi=2.0)
        assert grid.width == 0.5
        assert np.allclose(grid.midpoints, [0.25, 0.75, 1.25, 1.75])

    def test_boundary_value_goes_right(self):
        # half-open bins, so an interior edge belongs to the bin on its right
        grid = BinGrid(n_bins=2, lo=0.0, hi=1.0)
        sample = discretize([0.5], grid)
        assert list(sample.counts) == [0, 1]

    def test_top_edge_is_closed(self):
        grid = BinGrid(n_bins=5, lo=0.0, hi=1.0)
        assert grid.bin_index([1.0])[0] == 4
        assert grid.bin_index([0.0])[0] == 0

    def test_out_of_range_rejected(self):
        grid = BinGrid(n_bins=5, lo=0.0, hi=1.0)
        with pytest.raises(ValueError):
            discretize([1.2], grid)

    def test_all_mass_in_one_bin(self):
        grid = BinGrid(n_bins=8, lo=0.0, hi=8.0)
        sample = discretize(np.full(100, grid.midpoints[2]), grid)
        assert sample.counts[2] == 100 and sample.n == 100

    def test_uniform_counts_within_binomial_band(self):
        rng = np.random.default_rng(123)
        y = rng.uniform(0.0, 1.0, 10_000)
        grid = BinGrid(n_bins=20, lo=0.0, hi=1.0)
        sample = discretize(y, grid)
        sigma = math.sqrt(10_000 * 0.05 * 0.95)
        assert np.all(np.abs(sample.counts - 500) < 5 * sigma)


class TestFitPoisson:
    def test_equal_counts_uniform_kappa_gives_flat_fit(self):
        grid = BinGrid(n_bins=10, lo=0.0, hi=1.0)
        basis = cb.build_basis(np.linspace(0, 1, 50), 5)
        binned = BinnedSample(counts=np.full(10, 7), n=70)
        fit = fit_poisson(binned, basis, grid, CarryingDensity(kind="uniform"), 0.0)
        assert np.max(np.abs(fit.beta)) < 1e-8
        assert np.allclose(fit.cell_probs, 0.1, atol=1e-10)

    def test_gaussian_recovery_tv(self, gaussian_setup):
        y, grid, basis, kappa, binned = gaussian_setup
        lam, fit = lambda_for_df(5.0, binned, basis, grid, kappa)
        true_mass = np.diff(stats.norm.cdf(grid.edges))
        true_mass /= true_mass.sum()
        tv = 0.5 * np.abs(fit.cell_probs - true_mass).sum()
        assert tv < 0.05

    def test_bimodal_mixture_recovered(self):
        rng = np.random.default_rng(10)
        comp = rng.random(400) < 0.5
        y = np.where(comp, rng.normal(-1.0, 0.5, 400), rng.normal(1.0, 0.5, 400))
        grid = BinGrid.from_data(y, 40)
        basis = cb.build_basis(y, 10)
        kappa = CarryingDensity.from_data(y)
        binned = discretize(y, grid)
        _, fit = lambda_for_df(5.0, binned, basis, grid, kappa)
        d = fit.cell_probs / grid.width
        peaks = [i for i in range(1, 39) if d[i] > d[i - 1] and d[i] > d[i + 1]]
        assert len(peaks) == 2

    def test_kkt_matches_binned_moments(self, gaussian_setup):
        y, grid, basis, kappa, binned = gaussian_setup
        fit = fit_poisson(binned, basis, grid, kappa, 0.0)
        z = basis.evaluate(grid.midpoints)
        observed = binned.counts @ z / binned.n
        model = fit.cell_probs @ z
        assert np.max(np.abs(observed - model)) < 1e-6

    def test_probabilities_normalized_and_positive(self, gaussian_setup):
        _, grid, basis, kappa, binned = gaussian_setup
        for lam in (0.0, 0.5, 50.0):
            fit = fit_poisson(binned, basis, grid, kappa, lam)
            assert abs(fit.cell_probs.sum() - 1.0) < 1e-10
            assert np.all(fit.cell_probs > 0)

    def test_objective_trace_monotone(self, gaussian_setup):
        _, grid, basis, kappa, binned = gaussian_setup
        fit = fit_poisson(binned, basis, grid, kappa, 1.0, record_trace=True)
        assert np.all(np.diff(fit.objective_trace) >= 0.0)

    def test_all_zero_counts_rejected(self, gaussian_setup):
        _, grid, basis, kappa, _ = gaussian_setup
        empty = BinnedSample(counts=np.zeros(grid.n_bins, dtype=int), n=0)
        with pytest.raises(ValueError):
            fit_poisson(empty, basis, grid, kappa, 0.0)

    def test_unpenalized_directions_cost_nothing(self, gaussian_setup):
        _, grid, basis, kappa, binned = gaussian_setup
        fit = fit_poisson(binned, basis, grid, kappa, 3.0)
        bumped = fit.beta.copy()
        bumped[0] += 5.0  # first transformed direction carries zero penalty
        assert basis.penalties @ fit.beta**2 == basis.penalties @ bumped**2


class TestDegreesOfFreedom:
    def test_unpenalized_df_equals_k(self, gaussian_setup):
        _, grid, basis, kappa, binned = gaussian_setup
        fit = fit_poisson(binned, basis, grid, kappa, 0.0)
        assert abs(fit.df - basis.k) < 1e-8

    def test_infinite_ridge_leaves_two_directions(self, gaussian_setup):
        _, grid, basis, kappa, binned = gaussian_setup
        fit = fit_poisson(binned, basis, grid, kappa, 0.0)
        z = basis.evaluate(grid.midpoints)
        mu = fit.cell_probs * binned.n
        df = degrees_of_freedom(z, mu, 1e14, basis.penalties)
        assert abs(df - 2.0) < 1e-3

    def test_strictly_decreasing_in_ridge(self, gaussian_setup):
        _, grid, basis, kappa, binned = gaussian_setup
        dfs = [fit_poisson(binned, basis, grid, kappa, lam).df for lam in (0.1, 1.0, 10.0)]
        assert dfs[0] > dfs[1] > dfs[2]


class TestLambdaForDf:
    def test_target_k_gives_zero(self, gaussian_setup):
        _, grid, basis, kappa, binned = gaussian_setup
        lam, fit = lambda_for_df(float(basis.k), binned, basis, grid, kappa)
        assert lam == 0.0
        assert abs(fit.df - basis.k) < 1e-8

    def test_target_hit_within_tolerance(self, gaussian_setup):
        _, grid, basis, kappa, binned = gaussian_setup
        lam, fit = lambda_for_df(5.0, binned, basis, grid, kappa)
        assert abs(fit.df - 5.0) < 0.01
        refit = fit_poisson(binned, basis, grid, kappa, lam)
        assert abs(refit.df - 5.0) < 0.01

    def test_low_target_brackets_correctly(self, gaussian_setup):
        _, grid, basis, kappa, binned = gaussian_setup
        lam, fit = lambda_for_df(2.5, binned, basis, grid, kappa)
        assert lam > 0 and np.isfinite(lam)
        assert fit_poisson(binned, basis, grid, kappa, lam / 2).df > 2.5
        assert fit_poisson(binned, basis, grid, kappa, lam * 2).df < 2.5

    def test_out_of_range_target_rejected(self, gaussian_setup):
        _, grid, basis, kappa, binned = gaussian_setup
        for bad in (2.0, 1.0, basis.k + 1.0):
            with pytest.raises(ValueError):
                lambda_for_df(bad, binned, basis, grid, kappa)


class TestDensityAt:
    def test_uniform_density(self):
        grid = BinGrid(n_bins=10, lo=0.0, hi=2.0)
        basis = cb.build_basis(np.linspace(0, 2, 50), 4)
        binned = BinnedSample(counts=np.full(10, 5), n=50)
        fit = fit_poisson(binned, basis, grid, CarryingDensity(kind="uniform"), 0.0)
        assert np.allclose(density_at(fit, grid, [0.3, 1.7]), 0.5, atol=1e-8)

    def test_standard_normal_peak(self, gaussian_setup):
        _, grid, basis, kappa, binned = gaussian_setup
        lam, fit = lambda_for_df(5.0, binned, basis, grid, kappa)
        peak = density_at(fit, grid, [0.0])[0]
        assert abs(peak - stats.norm.pdf(0.0)) < 0.1 * stats.norm.pdf(0.0)

    def test_outside_grid_is_zero(self, gaussian_setup):
        _, grid, basis, kappa, binned = gaussian_setup
        fit = fit_poisson(binned, basis, grid, kappa, 0.0)
        with pytest.warns(UserWarning):
            val = density_at(fit, grid, [grid.hi + 1.0])
        assert val[0] == 0.0
