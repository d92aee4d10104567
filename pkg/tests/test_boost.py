import json

import numpy as np
import pytest
from scipy import optimize

import cdeboost as cb
from cdeboost.binfit import BinGrid, CarryingDensity, discretize, fit_poisson
from cdeboost.boost import (
    BoostConfig,
    _softmax_rows,
    boost_node_fit,
    fit,
    region_residuals,
    surrogate_matrix,
)
from cdeboost.simdata import SimSpec, generate
from cdeboost.tree import quad_solver, scan_best_split, TreeConfig, node_fit, _stabilized


def random_instance(seed, n=30, n_bins=8, k=3):
    """Small heterogeneous tilt state with responses on the bin midpoints."""
    rng = np.random.default_rng(seed)
    grid = BinGrid(n_bins=n_bins, lo=-2.0, hi=2.0)
    basis = cb.build_basis(np.linspace(-2, 2, 25), k)
    design = basis.evaluate(grid.midpoints)
    betas = 0.5 * rng.standard_normal((n, k))
    logw = betas @ design.T
    rows = _softmax_rows(logw)
    bin_idx = rng.integers(0, n_bins, size=n)
    counts = np.bincount(bin_idx, minlength=n_bins)
    return grid, basis, design, rows, bin_idx, counts


def exact_objective(gamma, rows, counts_z, design):
    logits = np.log(rows) + design @ gamma
    m = logits.max(axis=1, keepdims=True)
    lognorm = (m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))).sum()
    return counts_z @ gamma - lognorm


class TestBoostNodeFit:
    def test_homogeneous_rows_reduce_to_plain_fit(self):
        # constant tilt state: one pass of the loop equals the histogram fit
        rng = np.random.default_rng(0)
        y = rng.standard_normal(300)
        grid = BinGrid.from_data(y, 20)
        basis = cb.build_basis(y, 6)
        kappa = CarryingDensity.from_data(y)
        design = basis.evaluate(grid.midpoints)
        base = kappa.log_density(grid.midpoints) + np.log(grid.width)
        rows = _softmax_rows(np.tile(base, (300, 1)))
        counts = discretize(y, grid).counts
        res = boost_node_fit(rows, counts, design, 2.0, basis.penalties, inner_eps=1e-8)
        plain = fit_poisson(discretize(y, grid), basis, grid, kappa, 2.0)
        assert np.max(np.abs(res.gamma - plain.beta)) < 1e-8

    def test_matched_counts_give_zero_update(self):
        grid, basis, design, rows, bin_idx, _ = random_instance(5)
        counts = rows.sum(axis=0)  # bin counts exactly matching the tilt state
        res = boost_node_fit(rows, counts, design, 0.0, basis.penalties)
        assert res.n_inner == 1
        assert np.linalg.norm(res.gamma) <= 1e-5

    def test_rows_sum_to_one_at_exit(self):
        grid, basis, design, rows, bin_idx, counts = random_instance(6)
        res = boost_node_fit(rows, counts, design, 0.1, basis.penalties)
        assert np.max(np.abs(res.tilted.sum(axis=1) - 1.0)) < 1e-8

    def test_gamma0_matches_normalizers(self):
        grid, basis, design, rows, bin_idx, counts = random_instance(7)
        res = boost_node_fit(rows, counts, design, 0.0, basis.penalties)
        norm = rows @ np.exp(design @ res.gamma)
        assert np.allclose(res.gamma0, -np.log(norm), atol=1e-12)

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_exit_matches_generic_convex_solver(self, seed):
        grid, basis, design, rows, bin_idx, counts = random_instance(seed)
        res = boost_node_fit(rows, counts, design, 0.0, basis.penalties, inner_eps=1e-7)
        counts_z = counts @ design
        # KKT: observed statistic totals match the tilted model's
        model_mean = (res.tilted @ design).sum(axis=0)
        assert np.max(np.abs(counts_z - model_mean)) / counts.sum() < 1e-6
        sol = optimize.minimize(
            lambda g: -exact_objective(g, rows, counts_z, design),
            np.zeros(basis.k),
            method="BFGS",
            options={"gtol": 1e-10},
        )
        ours = exact_objective(res.gamma, rows, counts_z, design)
        assert ours >= -sol.fun - 1e-4


class TestResiduals:
    def test_zero_mean_at_unpenalized_exit(self):
        grid, basis, design, rows, bin_idx, counts = random_instance(9)
        res = boost_node_fit(rows, counts, design, 0.0, basis.penalties, inner_eps=1e-8)
        resid, _ = region_residuals(res.tilted, design, bin_idx)
        # counts came from bin_idx, so mean residual obeys the KKT
        assert np.max(np.abs(resid.mean(axis=0))) < 1e-6

    def test_single_sample_residual(self):
        grid, basis, design, rows, bin_idx, counts = random_instance(11, n=1)
        res = boost_node_fit(rows, counts, design, 0.0, basis.penalties)
        resid, predicted = region_residuals(res.tilted, design, bin_idx)
        assert np.allclose(resid[0], design[bin_idx[0]] - predicted[0])

    def test_matches_brute_force_expectation(self):
        grid, basis, design, rows, bin_idx, counts = random_instance(12)
        res = boost_node_fit(rows, counts, design, 0.05, basis.penalties)
        resid, _ = region_residuals(res.tilted, design, bin_idx)
        brute = np.array(
            [design[bin_idx[i]] - res.tilted[i] @ design for i in range(rows.shape[0])]
        )
        assert np.allclose(resid, brute, atol=1e-12)

    def test_penalized_exit_matches_ridge_gradient(self):
        grid, basis, design, rows, bin_idx, counts = random_instance(13)
        lam = 0.4
        res = boost_node_fit(rows, counts, design, lam, basis.penalties, inner_eps=1e-9)
        resid, _ = region_residuals(res.tilted, design, bin_idx)
        n = rows.shape[0]
        expected = 2.0 * lam / n * basis.penalties * res.gamma
        assert np.max(np.abs(resid.mean(axis=0) - expected)) < 1e-6


class TestBoostSplitGain:
    def test_equal_residual_means_give_zero(self):
        grid, basis, design, rows, bin_idx, counts = random_instance(20, n=60)
        res = boost_node_fit(rows, counts, design, 0.0, basis.penalties)
        resid, predicted = region_residuals(res.tilted, design, bin_idx)
        m = surrogate_matrix(res.tilted, predicted, design, 0.0, basis.penalties)
        solve = quad_solver(m)
        d = np.zeros(basis.k)
        assert solve(d)[0] == 0.0

    def test_constant_state_matches_tree_gain(self):
        # with a constant tilt state and midpoint-supported responses the
        # boosting criterion coincides with the stand-alone tree criterion
        rng = np.random.default_rng(21)
        grid = BinGrid(n_bins=12, lo=-3.0, hi=3.0)
        basis = cb.build_basis(np.linspace(-3, 3, 40), 5)
        kappa = CarryingDensity(kind="uniform")
        bin_idx = rng.integers(0, 12, size=200)
        y = grid.midpoints[bin_idx]
        x = rng.uniform(-1, 1, size=(200, 3))
        lam = 0.01
        design = basis.evaluate(grid.midpoints)
        base = kappa.log_density(grid.midpoints) + np.log(grid.width)
        rows = _softmax_rows(np.tile(base, (200, 1)))
        counts = np.bincount(bin_idx, minlength=12)
        res = boost_node_fit(rows, counts, design, lam * 200, basis.penalties, inner_eps=1e-10)
        resid, predicted = region_residuals(res.tilted, design, bin_idx)
        m_boost = surrogate_matrix(res.tilted, predicted, design, lam, basis.penalties)
        cfg = TreeConfig()
        best_boost = scan_best_split(x, resid, quad_solver(m_boost), cfg)

        stats = node_fit(y, basis, grid, kappa, lam)
        m_tree = _stabilized(stats.hessian, lam, basis.penalties)
        best_tree = scan_best_split(x, design[bin_idx], quad_solver(m_tree), cfg)
        assert best_boost.feature == best_tree.feature
        assert best_boost.threshold == pytest.approx(best_tree.threshold)
        assert best_boost.gain == pytest.approx(best_tree.gain, rel=1e-6)

    def test_influential_features_found_after_warmup(self):
        hits = 0
        runs = 30
        for seed in range(runs):
            X, y = generate(SimSpec(kind="lggmd", n=1000, seed=300 + seed))
            cfg = BoostConfig(n_trees=51, eta=0.01, validation_fraction=0.0)
            model = fit(X, y, cfg)
            root = model.trees[-1].root
            if root.feature in (0, 1, 2):
                hits += 1
        assert hits >= int(0.9 * runs)


class TestFit:
    def test_single_depth_zero_tree_equals_global_fit(self):
        rng = np.random.default_rng(30)
        y = rng.standard_normal(400)
        x = rng.uniform(-1, 1, size=(400, 3))
        cfg = BoostConfig(
            n_trees=1, eta=1.0, max_depth=0, df=10.0, n_basis=10,
            validation_fraction=0.0,
        )
        model = fit(x, y, cfg)
        grid, dens = model.predict_density(x[:1])
        plain = fit_poisson(
            discretize(y, model.grid), model.basis, model.grid, model.kappa, 0.0
        )
        assert np.max(np.abs(dens[0] - plain.cell_probs / grid.width)) < 1e-6

    def test_rows_stay_normalized_and_loglik_mostly_monotone(self):
        X, y = generate(SimSpec(kind="lgd", n=400, seed=40))
        cfg = BoostConfig(n_trees=120, eta=0.05, validation_fraction=0.0)
        model = fit(X, y, cfg)
        ll = np.asarray(model.diagnostics["train_loglik"])
        steps = np.diff(np.concatenate([[model.diagnostics["baseline_train_loglik"]], ll]))
        assert np.mean(steps >= -1e-9) >= 0.99
        grid, dens = model.predict_density(X[:25])
        assert np.max(np.abs(dens.sum(axis=1) * grid.width - 1.0)) < 1e-8

    def test_heteroscedastic_spread_ordering(self):
        # estimated conditional sd should grow with |x2|
        wins = 0
        for seed in range(5):
            X, y = generate(SimSpec(kind="hetero", n=800, seed=50 + seed))
            cfg = BoostConfig(n_trees=300, eta=0.05, validation_fraction=0.2, seed=seed,
                              early_stop_patience=100)
            model = fit(X, y, cfg)
            x_wide = np.zeros((1, 10)); x_wide[0, :2] = (0.0, 0.9)
            x_narrow = np.zeros((1, 10)); x_narrow[0, :2] = (0.0, 0.3)
            sds = []
            for x in (x_wide, x_narrow):
                grid, dens = model.predict_density(x)
                p = dens[0] * grid.width
                m = p @ grid.midpoints
                sds.append(np.sqrt(p @ (grid.midpoints - m) ** 2))
            if sds[0] > sds[1]:
                wins += 1
        assert wins >= 4

    def test_validation_selection_recorded(self):
        X, y = generate(SimSpec(kind="lgd", n=500, seed=60))
        cfg = BoostConfig(n_trees=60, eta=0.05, validation_fraction=0.25, seed=3)
        model = fit(X, y, cfg)
        val = model.diagnostics["val_loglik"]
        base = model.diagnostics["baseline_val_loglik"]
        best = int(np.argmax([base] + val))
        assert model.selected_trees == best

    def test_determinism(self, tmp_path):
        X, y = generate(SimSpec(kind="lgd", n=300, seed=70))
        cfg = BoostConfig(n_trees=25, eta=0.05, validation_fraction=0.2, seed=1)
        m1 = fit(X, y, cfg)
        m2 = fit(X, y, cfg)
        d1, d2 = m1.to_dict(), m2.to_dict()
        d1["meta"] = d2["meta"] = {}
        assert json.dumps(d1) == json.dumps(d2)

    def test_input_validation(self):
        X, y = generate(SimSpec(kind="lgd", n=100, seed=80))
        with pytest.raises(ValueError):
            fit(X[:50], y, BoostConfig(n_trees=2))
        bad = y.copy(); bad[3] = np.nan
        with pytest.raises(ValueError):
            fit(X, bad, BoostConfig(n_trees=2))
        with pytest.raises(ValueError):
            BoostConfig(eta=0.0)
        with pytest.raises(ValueError):
            BoostConfig(n_trees=0)


class TestPrediction:
    @pytest.fixture(scope="class")
    def model(self):
        X, y = generate(SimSpec(kind="lgd", n=600, seed=90))
        return fit(X, y, BoostConfig(n_trees=150, eta=0.05, validation_fraction=0.2,
                                     early_stop_patience=60, seed=2))

    def test_zero_trees_is_carrying_density(self):
        rng = np.random.default_rng(91)
        y = rng.standard_normal(200)
        x = rng.uniform(-1, 1, size=(200, 2))
        model = fit(x, y, BoostConfig(n_trees=1, eta=0.01, validation_fraction=0.0))
        grid, dens = model.predict_density(x[:1], n_trees=0)
        base = np.exp(model.kappa.log_density(grid.midpoints))
        base = base / (base.sum() * grid.width)
        assert np.allclose(dens[0], base, atol=1e-10)

    def test_density_rows_normalized(self, model):
        rng = np.random.default_rng(92)
        xs = rng.uniform(-1, 1, size=(50, 20))
        grid, dens = model.predict_density(xs, n_bins=50)
        assert np.max(np.abs(dens.sum(axis=1) * grid.width - 1.0)) < 1e-8

    def test_cdf_properties(self, model):
        rng = np.random.default_rng(93)
        xs = rng.uniform(-1, 1, size=(10, 20))
        ys = np.linspace(model.grid.lo - 1, model.grid.hi + 1, 40)
        vals = model.predict_cdf(xs, ys)
        assert np.all(np.diff(vals, axis=1) >= -1e-12)
        assert np.allclose(vals[:, 0], 0.0)
        assert np.allclose(model.predict_cdf(xs, [model.grid.hi])[:, 0], 1.0)

    def test_quantiles_monotone_and_median_centers(self, model):
        rng = np.random.default_rng(94)
        xs = rng.uniform(-1, 1, size=(10, 20))
        qs = model.predict_quantiles(xs, [0.1, 0.25, 0.5, 0.75, 0.9])
        assert np.all(np.diff(qs, axis=1) >= 0)
        grid, dens = model.predict_density(xs, n_bins=50)
        means = (dens * grid.width) @ grid.midpoints
        assert np.max(np.abs(qs[:, 2] - means)) < 0.35

    def test_quantile_level_validation(self, model):
        with pytest.raises(ValueError):
            model.predict_quantiles(np.zeros((1, 20)), [0.0, 0.5])

    def test_feature_count_mismatch(self, model):
        with pytest.raises(ValueError):
            model.predict_density(np.zeros((2, 3)))

    def test_serialization_bitwise_roundtrip(self, model, tmp_path):
        path = tmp_path / "model.json"
        cb.save_model(model, path)
        clone = cb.load_model(path)
        rng = np.random.default_rng(95)
        xs = rng.uniform(-1, 1, size=(100, 20))
        g1, d1 = model.predict_density(xs)
        g2, d2 = clone.predict_density(xs)
        assert np.array_equal(d1, d2)
        q1 = model.predict_quantiles(xs, [0.05, 0.5, 0.95])
        q2 = clone.predict_quantiles(xs, [0.05, 0.5, 0.95])
        assert np.array_equal(q1, q2)

    def test_unknown_schema_rejected(self, model, tmp_path):
        d = model.to_dict()
        d["schema_version"] = 99
        with pytest.raises(ValueError):
            cb.BoostModel.from_dict(d)
