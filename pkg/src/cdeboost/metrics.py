"""Evaluation metrics for conditional density, CDF and quantile estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .binfit import BinGrid

PROB_FLOOR = 1e-12  # floor on bin masses before taking logs
AAE_GRID_SIZE = 100


@dataclass
class EvalReport:
    """Flat summary of one evaluation run; serializes to JSON or a CSV row."""

    n_test: int
    loglik: float
    n_clamped: int
    n_floored: int
    loglik_null: Optional[float] = None
    loglik_oracle: Optional[float] = None
    goodness_of_fit: Optional[float] = None
    aae: Optional[float] = None
    cvm: Optional[float] = None
    quantile_losses: dict = field(default_factory=dict)
    intervals: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "n_test": self.n_test,
            "loglik": self.loglik,
            "n_clamped": self.n_clamped,
            "n_floored": self.n_floored,
            "loglik_null": self.loglik_null,
            "loglik_oracle": self.loglik_oracle,
            "goodness_of_fit": self.goodness_of_fit,
            "aae": self.aae,
            "cvm": self.cvm,
            "quantile_losses": {str(k): v for k, v in self.quantile_losses.items()},
            "intervals": {
                str(k): {"coverage": v[0], "width": v[1]} for k, v in self.intervals.items()
            },
        }

    def to_csv_row(self):
        row = {
            "n_test": self.n_test,
            "loglik": self.loglik,
            "loglik_null": self.loglik_null,
            "loglik_oracle": self.loglik_oracle,
            "goodness_of_fit": self.goodness_of_fit,
            "aae": self.aae,
            "cvm": self.cvm,
            "n_clamped": self.n_clamped,
            "n_floored": self.n_floored,
        }
        for level, loss in self.quantile_losses.items():
            row[f"qloss_{level}"] = loss
        for nominal, (cov, width) in self.intervals.items():
            row[f"coverage_{nominal}"] = cov
            row[f"width_{nominal}"] = width
        return row


def _density_matrix(model_or_grid, X, n_bins):
    """Normalize the two accepted inputs to (grid, densities)."""
    if hasattr(model_or_grid, "predict_density"):
        return model_or_grid.predict_density(X, n_bins=n_bins)
    grid, dens = model_or_grid
    return grid, np.atleast_2d(np.asarray(dens, dtype=float))


def loglik(model_or_grid, X, y, n_bins=50):
    """Mean log density at the test points, read piecewise-constant from bins.

    Responses outside the readout grid are clamped to the boundary bin, and
    bin masses are floored at ``PROB_FLOOR`` before the log.  Returns
    ``(value, n_clamped, n_floored)``.
    """
    y = np.asarray(y, dtype=float)
    grid, dens = _density_matrix(model_or_grid, X, n_bins)
    if dens.shape[0] == 1 and y.shape[0] > 1:
        dens = np.broadcast_to(dens, (y.shape[0], dens.shape[1]))
    n_clamped = int(np.sum((y < grid.lo) | (y > grid.hi)))
    idx = grid.bin_index(y, clamp=True)
    masses = dens[np.arange(y.shape[0]), idx] * grid.width
    n_floored = int(np.sum(masses < PROB_FLOOR))
    masses = np.maximum(masses, PROB_FLOOR)
    value = float(np.mean(np.log(masses / grid.width)))
    return value, n_clamped, n_floored


def gaussian_null_loglik(train_y, test_y) -> float:
    """Test log-likelihood of the marginal Gaussian fitted to the training response."""
    train_y = np.asarray(train_y, dtype=float)
    test_y = np.asarray(test_y, dtype=float)
    mu = float(np.mean(train_y))
    sd = float(np.std(train_y))
    if sd <= 0:
        raise ValueError("degenerate training response for the null model")
    z = (test_y - mu) / sd
    return float(np.mean(-0.5 * z * z - math.log(sd * math.sqrt(2.0 * math.pi))))


def goodness_of_fit(loglik_method, loglik_null, loglik_oracle) -> float:
    """(method - null) / (oracle - null); 1 means oracle-level fit, 0 the null."""
    denom = loglik_oracle - loglik_null
    if denom <= 0:
        raise ValueError("oracle log-likelihood must exceed the null's")
    return (loglik_method - loglik_null) / denom


def _level_grid(m):
    return np.arange(1, m + 1) / (m + 1.0)


def aae(cdf_fn, true_quantile_fn, X, m=AAE_GRID_SIZE) -> float:
    """Mean |F_hat(q(u|x)|x) - u| over test points and an even level grid.

    ``cdf_fn(x, q_vector)`` evaluates the estimated conditional CDF and
    ``true_quantile_fn(x, levels)`` the exact quantiles; the true CDF at its
    own quantile is the level itself.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    levels = _level_grid(m)
    total = 0.0
    for i in range(X.shape[0]):
        q = true_quantile_fn(X[i], levels)
        total += float(np.mean(np.abs(cdf_fn(X[i], q) - levels)))
    return total / X.shape[0]


def cvm(cdf_fn, true_quantile_fn, X, m=AAE_GRID_SIZE) -> float:
    """Mean squared deviation version of :func:`aae`."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    levels = _level_grid(m)
    total = 0.0
    for i in range(X.shape[0]):
        q = true_quantile_fn(X[i], levels)
        total += float(np.mean((cdf_fn(X[i], q) - levels) ** 2))
    return total / X.shape[0]


def quantile_loss(estimates, y, tau) -> float:
    """Mean pinball loss (y - q)(tau - 1{y < q}) at level tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError("quantile level must lie in (0, 1)")
    estimates = np.asarray(estimates, dtype=float)
    y = np.asarray(y, dtype=float)
    diff = y - estimates
    return float(np.mean(diff * (tau - (diff < 0.0))))


def interval_stats(model, X, y, nominal, n_bins=50):
    """Coverage and mean width of the central prediction interval."""
    if not 0.0 < nominal < 1.0:
        raise ValueError("nominal level must lie in (0, 1)")
    y = np.asarray(y, dtype=float)
    lo_level = (1.0 - nominal) / 2.0
    q = model.predict_quantiles(X, [lo_level, 1.0 - lo_level], n_bins=n_bins)
    covered = (y >= q[:, 0]) & (y <= q[:, 1])
    return float(np.mean(covered)), float(np.mean(q[:, 1] - q[:, 0]))


def quantiles_to_density(cdf_values, edges):
    """Per-bin densities from CDF values at the bin edges.

    ``cdf_values`` may be the CDF evaluated at ``edges`` or a callable to
    evaluate there.  A non-monotone CDF is rejected.
    """
    edges = np.asarray(edges, dtype=float)
    vals = cdf_values(edges) if callable(cdf_values) else np.asarray(cdf_values, dtype=float)
    if vals.shape[0] != edges.shape[0]:
        raise ValueError("need one CDF value per bin edge")
    if np.any(np.diff(vals) < 0):
        raise ValueError("CDF values must be non-decreasing")
    return np.diff(vals) / np.diff(edges)


def evaluate_model(
    model,
    X,
    y,
    oracle=None,
    quantile_levels=(0.05, 0.25, 0.5, 0.75, 0.95),
    nominal_levels=(0.9,),
    n_bins=50,
) -> EvalReport:
    """Full evaluation of a fitted model on a test set.

    ``oracle``, when given, is a :class:`~cdeboost.simdata.SimSpec`-like
    object offering exact densities and quantiles; without it the
    truth-dependent metrics (goodness of fit, AAE, CVM) are omitted.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    value, n_clamped, n_floored = loglik(model, X, y, n_bins=n_bins)
    null_ll = None
    if hasattr(model, "train_mean") and model.train_sd > 0:
        z = (y - model.train_mean) / model.train_sd
        null_ll = float(
            np.mean(-0.5 * z * z - math.log(model.train_sd * math.sqrt(2.0 * math.pi)))
        )

    report = EvalReport(
        n_test=int(y.shape[0]),
        loglik=value,
        n_clamped=n_clamped,
        n_floored=n_floored,
        loglik_null=null_ll,
    )

    if oracle is not None:
        from . import simdata

        report.loglik_oracle = simdata.oracle_loglik(oracle, X, y)
        if null_ll is not None:
            report.goodness_of_fit = goodness_of_fit(value, null_ll, report.loglik_oracle)

        def cdf_fn(x, q):
            return model.predict_cdf(x[None, :], q, n_bins=n_bins)[0]

        def quant_fn(x, levels):
            return simdata.oracle_quantile(oracle, x, levels)

        report.aae = aae(cdf_fn, quant_fn, X)
        report.cvm = cvm(cdf_fn, quant_fn, X)

    if quantile_levels:
        q = model.predict_quantiles(X, list(quantile_levels), n_bins=n_bins)
        for j, tau in enumerate(quantile_levels):
            report.quantile_losses[tau] = quantile_loss(q[:, j], y, tau)
    for nominal in nominal_levels:
        report.intervals[nominal] = interval_stats(model, X, y, nominal, n_bins=n_bins)
    return report
