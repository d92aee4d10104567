"""Boosted conditional density estimation.

The conditional density is modeled as kappa(y) exp(z(y)' beta(x) - psi) with
the natural parameter beta(x) built additively from shallow trees.  Each
iteration fits one tree whose leaves carry small coefficient modifiers; the
per-sample bin probabilities (the "tilt state") are updated multiplicatively
and renormalized, so earlier trees never need re-evaluation during training.

Node fitting alternates a Poisson regression against the region's averaged
bin probabilities with per-sample renormalization until the modifier stops
moving.  Split search scores candidates by a quadratic form in the children's
mean sufficient-statistic residuals, normalized by the region-average
statistic covariance (plus ridge and a small diagonal stabilizer).
"""

from __future__ import annotations

import datetime
import json
import math
from dataclasses import asdict, dataclass, field
from types import SimpleNamespace
from typing import Optional

import numpy as np

from . import pretreat
from .basis import SplineBasis, build_basis
from .binfit import BinGrid, BinnedSample, CarryingDensity, discretize, fit_poisson, lambda_for_df, newton_poisson
from .errors import ConvergenceError, NumericError
from .pretreat import CenteringModel, MeanConfig, TransformRecord
from .tree import (
    HESSIAN_STABILIZER,
    DensityTree,
    TreeConfig,
    TreeNode,
    quad_solver,
    scan_best_split,
)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class BoostConfig:
    """Hyperparameters of the boosted density fit."""

    n_trees: int = 2000
    eta: float = 0.01
    max_depth: int = 2
    df: float = 5.0
    n_basis: int = 10
    n_bins: int = 40
    min_node: int = 10
    n_candidates: int = 30
    gain_threshold: float = 0.0
    inner_eps: float = 1e-5
    inner_max_iter: int = 100
    carrying: str = "gaussian"
    validation_fraction: float = 0.2
    early_stop_patience: Optional[int] = None
    penalized_surrogate: bool = True
    transform: Optional[str] = None  # None | "boxcox" | "log"
    shift_nonpositive: bool = False
    center: bool = False
    seed: int = 0
    n_threads: int = 1

    def __post_init__(self):
        if not (0.0 < self.eta <= 1.0):
            raise ValueError("learning rate must lie in (0, 1]")
        if self.n_trees < 1:
            raise ValueError("need at least one boosting iteration")
        if self.carrying not in ("gaussian", "uniform"):
            raise ValueError("carrying density must be 'gaussian' or 'uniform'")
        if self.transform not in (None, "boxcox", "log"):
            raise ValueError("transform must be None, 'boxcox' or 'log'")
        if not (0.0 <= self.validation_fraction < 1.0):
            raise ValueError("validation fraction must lie in [0, 1)")
        if self.n_threads < 1:
            raise ValueError("thread cap must be at least 1")


def _softmax_rows(logw):
    m = logw.max(axis=1, keepdims=True)
    e = np.exp(logw - m)
    return e / e.sum(axis=1, keepdims=True)


def _exact_region_newton(log_rows, counts_z, n, design, lam_total, penalties, gamma, max_iter=50):
    """Damped Newton on the region objective with per-sample normalizers.

    The alternating scheme below is a fixed-point iteration whose surrogate
    curvature (covariance of the row mixture) can far exceed the objective's
    true curvature (mean per-sample covariance) when rows are heterogeneous,
    driving its contraction rate toward one on small regions.  This solver
    polishes the same unique maximizer directly; the caller re-verifies the
    exit rule with a genuine alternation step afterwards.
    """
    k = design.shape[1]

    def state(g):
        logits = log_rows + (design @ g)[None, :]
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        s = e.sum(axis=1)
        obj = float(counts_z @ g - (m[:, 0] + np.log(s)).sum() - lam_total * penalties @ (g * g))
        return e / s[:, None], obj

    tilted, obj = state(gamma)
    for _ in range(max_iter):
        meanz = tilted @ design
        grad = counts_z - meanz.sum(axis=0) - 2.0 * lam_total * penalties * gamma
        if np.max(np.abs(grad)) <= 1e-7 * max(n, 1.0):
            break
        colsum = tilted.sum(axis=0)
        hess = (
            design.T @ (colsum[:, None] * design)
            - meanz.T @ meanz
            + 2.0 * lam_total * np.diag(penalties)
        )
        hess[np.diag_indices(k)] += 1e-12 * max(np.trace(hess), 1.0)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise NumericError("singular curvature in region fit") from exc
        size = 1.0
        for _ in range(40):
            cand = gamma + size * step
            cand_tilted, cand_obj = state(cand)
            if np.isfinite(cand_obj) and cand_obj >= obj:
                gamma, tilted, obj = cand, cand_tilted, cand_obj
                break
            size *= 0.5
        else:
            break
    return gamma


def boost_node_fit(rows, counts, design, lam_total, penalties, inner_eps=1e-5, inner_max_iter=100):
    """Fit one region's modifier against heterogeneous per-sample probabilities.

    ``rows`` holds each region sample's current bin probabilities.  The loop
    alternates (a) a Poisson regression of the region's bin counts on the
    statistics with the averaged tilted probabilities as offset, ridge
    centered on the accumulated modifier, and (b) per-sample renormalization,
    stopping once an alternation step moves the modifier by no more than
    ``inner_eps``.  When the alternation contracts slowly it is polished by
    :func:`_exact_region_newton` toward the same maximizer, after which the
    exit rule is still checked by a genuine alternation step.  Returns the
    modifier ``gamma``, the per-sample log-normalizers ``gamma0``, and the
    tilted rows at exit (each summing to one).
    """
    rows = np.asarray(rows, dtype=float)
    counts = np.asarray(counts, dtype=float)
    k = design.shape[1]
    gamma = np.zeros(k)
    delta_norm = np.inf
    prev_norm = np.inf
    log_rows = None
    counts_z = counts @ design
    n = float(counts.sum())
    for n_inner in range(1, inner_max_iter + 1):
        factor = np.exp(np.clip(design @ gamma, -700.0, 700.0))
        tilt = rows * factor
        norms = tilt.sum(axis=1)
        pbar = (tilt / norms[:, None]).mean(axis=0)
        res = newton_poisson(
            counts, design, np.log(pbar), lam_total, penalties, ridge_center=gamma
        )
        gamma = gamma + res.beta
        delta_norm = float(np.linalg.norm(res.beta))
        if delta_norm <= inner_eps:
            factor = np.exp(np.clip(design @ gamma, -700.0, 700.0))
            tilt = rows * factor
            norms = tilt.sum(axis=1)
            return SimpleNamespace(
                gamma=gamma,
                gamma0=-np.log(norms),
                tilted=tilt / norms[:, None],
                n_inner=n_inner,
                delta_norm=delta_norm,
            )
        if n_inner >= 2 and delta_norm > 0.5 * prev_norm:
            if log_rows is None:
                with np.errstate(divide="ignore"):
                    log_rows = np.log(rows)
            gamma = _exact_region_newton(
                log_rows, counts_z, n, design, lam_total, penalties, gamma
            )
        prev_norm = delta_norm
    raise ConvergenceError(
        f"region fit's normalization loop exceeded {inner_max_iter} iterations "
        f"(last |dgamma| = {delta_norm:.3e})",
        beta=gamma,
        gradient_norm=delta_norm,
        n_iter=inner_max_iter,
    )


def region_residuals(tilted, design, bin_idx_local):
    """Per-sample sufficient-statistic residuals z_b(i) - E_tilted[z]."""
    predicted = tilted @ design
    return design[bin_idx_local] - predicted, predicted


def surrogate_matrix(tilted, predicted, design, lam, penalties, penalized=True):
    """Region-average statistic covariance, stabilized and optionally ridged."""
    n = tilted.shape[0]
    k = design.shape[1]
    pbar = tilted.mean(axis=0)
    hbar = design.T @ (pbar[:, None] * design) - predicted.T @ predicted / n
    eps = HESSIAN_STABILIZER * np.trace(hbar) / k
    m = hbar + eps * np.eye(k)
    if penalized:
        m = m + 2.0 * lam * np.diag(penalties)
    return m


def _grow_boost_tree(X, bin_idx, probs, design, lam, penalties, config: BoostConfig):
    """One boosting tree; leaves carry unscaled modifiers."""
    tree_cfg = TreeConfig(
        max_depth=config.max_depth,
        min_node=config.min_node,
        n_candidates=config.n_candidates,
        gain_threshold=config.gain_threshold,
    )
    n_bins = design.shape[0]
    gains = np.zeros(X.shape[1])

    def build(idx, depth):
        counts = np.bincount(bin_idx[idx], minlength=n_bins)
        node = boost_node_fit(
            probs[idx],
            counts,
            design,
            lam * idx.size,
            penalties,
            inner_eps=config.inner_eps,
            inner_max_iter=config.inner_max_iter,
        )
        if depth >= config.max_depth or idx.size < 2 * config.min_node:
            return TreeNode(value=node.gamma)
        resid, predicted = region_residuals(node.tilted, design, bin_idx[idx])
        m = surrogate_matrix(
            node.tilted, predicted, design, lam, penalties, config.penalized_surrogate
        )
        best = scan_best_split(X[idx], resid, quad_solver(m), tree_cfg)
        if best is None:
            return TreeNode(value=node.gamma)
        gains[best.feature] += best.gain
        mask = X[idx, best.feature] <= best.threshold
        return TreeNode(
            feature=best.feature,
            threshold=best.threshold,
            left=build(idx[mask], depth + 1),
            right=build(idx[~mask], depth + 1),
        )

    root = build(np.arange(X.shape[0]), 0)
    return DensityTree(root=root, gains=gains)


@dataclass
class BoostModel:
    """Fitted conditional density model."""

    basis: SplineBasis
    grid: BinGrid
    kappa: CarryingDensity
    eta: float
    lam: float  # per-sample ridge; regions multiply by their sample count
    ridge_total: float
    trees: list
    selected_trees: int
    n_features: int
    transform: Optional[TransformRecord]
    centering: Optional[CenteringModel]
    train_mean: float
    train_sd: float
    output_lo: float
    output_hi: float
    diagnostics: dict
    config: dict
    meta: dict = field(default_factory=dict)

    # ----- internal-space machinery -------------------------------------

    def _check_features(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(
                f"model expects {self.n_features} covariates, got {X.shape[1]}"
            )
        return X

    def natural_params(self, X, n_trees=None):
        """beta(x) = eta * sum of leaf modifiers over the selected tree prefix."""
        X = self._check_features(X)
        n_trees = self.selected_trees if n_trees is None else n_trees
        beta = np.zeros((X.shape[0], self.basis.k))
        for tr in self.trees[:n_trees]:
            for idx, gamma in tr.assign(X):
                beta[idx] += gamma
        return self.eta * beta

    def _internal_grid(self, n_bins=None) -> BinGrid:
        if n_bins is None or n_bins == self.grid.n_bins:
            return self.grid
        return BinGrid(n_bins=n_bins, lo=self.grid.lo, hi=self.grid.hi)

    def _cell_probs(self, X, igrid, n_trees=None):
        """Per-sample bin masses on an internal-space grid, rows sum to one."""
        beta = self.natural_params(X, n_trees=n_trees)
        mids = igrid.midpoints
        design = self.basis.evaluate(mids)
        logw = self.kappa.log_density(mids)[None, :] + beta @ design.T
        return _softmax_rows(logw)

    def _shift(self, X):
        if self.centering is None:
            return np.zeros(X.shape[0])
        return self.centering.predict(X)

    # ----- public prediction surface ------------------------------------

    @property
    def has_pretreatment(self) -> bool:
        return self.transform is not None or self.centering is not None

    def predict_density(self, X, n_bins=None, out_grid=None, n_trees=None):
        """Densities on a bin grid, one row per covariate vector.

        Returns ``(grid, densities)``.  Without pretreatment the grid lives on
        the model's internal response scale.  With pretreatment the output
        grid is in original response units: centered fits shift bin masses
        back (mass-preserving), transformed fits evaluate at output midpoints
        with the Jacobian applied.  Rows integrate to one over the grid
        except for mass shifted outside it by centering.
        """
        X = self._check_features(X)
        igrid = self._internal_grid(n_bins)
        probs = self._cell_probs(X, igrid, n_trees=n_trees)
        if not self.has_pretreatment and out_grid is None:
            return igrid, probs / igrid.width
        if out_grid is None:
            out_grid = BinGrid(
                n_bins=igrid.n_bins, lo=self.output_lo, hi=self.output_hi
            )
        shift = self._shift(X)
        dens = np.zeros((X.shape[0], out_grid.n_bins))
        if self.transform is None:
            edges = igrid.edges
            out_edges = out_grid.edges
            for i in range(X.shape[0]):
                masses = pretreat.shift_rebin(probs[i], edges, shift[i], out_edges)
                dens[i] = masses / out_grid.width
        else:
            mids = out_grid.midpoints
            t = self.transform.forward(mids)
            jac = np.abs(self.transform.deriv(mids))
            for i in range(X.shape[0]):
                r = t - shift[i]
                inside = (r >= igrid.lo) & (r <= igrid.hi)
                if np.any(inside):
                    idx = igrid.bin_index(r[inside])
                    dens[i, inside] = probs[i, idx] / igrid.width * jac[inside]
        return out_grid, dens

    def predict_cdf(self, X, y_points, n_bins=50, n_trees=None):
        """CDF values with within-bin linear interpolation; shape (n, m)."""
        X = self._check_features(X)
        y_points = np.atleast_1d(np.asarray(y_points, dtype=float))
        igrid = self._internal_grid(n_bins)
        probs = self._cell_probs(X, igrid, n_trees=n_trees)
        cum = np.cumsum(probs, axis=1)
        shift = self._shift(X)
        if self.transform is not None:
            t = self.transform.forward(y_points)
        else:
            t = y_points
        r = t[None, :] - shift[:, None]
        pos = (r - igrid.lo) / igrid.width
        idx = np.clip(np.floor(pos).astype(int), 0, igrid.n_bins - 1)
        frac = np.clip(pos - idx, 0.0, 1.0)
        before = np.where(idx > 0, np.take_along_axis(cum, np.maximum(idx - 1, 0), axis=1), 0.0)
        mass = np.take_along_axis(probs, idx, axis=1)
        out = before + mass * frac
        out[r < igrid.lo] = 0.0
        out[r > igrid.hi] = 1.0
        return np.clip(out, 0.0, 1.0)

    def predict_quantiles(self, X, levels, n_bins=50, n_trees=None):
        """Quantiles by inverse interpolation of the bin masses; shape (n, m)."""
        X = self._check_features(X)
        levels = np.atleast_1d(np.asarray(levels, dtype=float))
        if np.any(levels <= 0.0) or np.any(levels >= 1.0):
            raise ValueError("quantile levels must lie strictly inside (0, 1)")
        igrid = self._internal_grid(n_bins)
        probs = self._cell_probs(X, igrid, n_trees=n_trees)
        cum = np.cumsum(probs, axis=1)
        n = X.shape[0]
        out = np.empty((n, levels.shape[0]))
        for i in range(n):
            idx = np.searchsorted(cum[i], levels, side="left")
            idx = np.clip(idx, 0, igrid.n_bins - 1)
            before = np.where(idx > 0, cum[i][np.maximum(idx - 1, 0)], 0.0)
            mass = probs[i][idx]
            frac = np.where(mass > 0, (levels - before) / np.where(mass > 0, mass, 1.0), 0.0)
            out[i] = igrid.lo + (idx + np.clip(frac, 0.0, 1.0)) * igrid.width
        shift = self._shift(X)
        out = out + shift[:, None]
        if self.transform is not None:
            out = self.transform.inverse(out)
        return out

    # ----- persistence ---------------------------------------------------

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "meta": self.meta,
            "config": self.config,
            "basis": self.basis.to_dict(),
            "grid": self.grid.to_dict(),
            "carrying": self.kappa.to_dict(),
            "eta": self.eta,
            "lambda_per_sample": self.lam,
            "ridge_total": self.ridge_total,
            "n_features": self.n_features,
            "selected_trees": self.selected_trees,
            "trees": [t.to_dict() for t in self.trees],
            "transform": None if self.transform is None else self.transform.to_dict(),
            "centering": None if self.centering is None else self.centering.to_dict(),
            "train_mean": self.train_mean,
            "train_sd": self.train_sd,
            "output_range": [self.output_lo, self.output_hi],
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported model schema version {version!r}")
        return cls(
            basis=SplineBasis.from_dict(d["basis"]),
            grid=BinGrid.from_dict(d["grid"]),
            kappa=CarryingDensity.from_dict(d["carrying"]),
            eta=float(d["eta"]),
            lam=float(d["lambda_per_sample"]),
            ridge_total=float(d["ridge_total"]),
            trees=[DensityTree.from_dict(t) for t in d["trees"]],
            selected_trees=int(d["selected_trees"]),
            n_features=int(d["n_features"]),
            transform=None
            if d["transform"] is None
            else TransformRecord.from_dict(d["transform"]),
            centering=None
            if d["centering"] is None
            else CenteringModel.from_dict(d["centering"]),
            train_mean=float(d["train_mean"]),
            train_sd=float(d["train_sd"]),
            output_lo=float(d["output_range"][0]),
            output_hi=float(d["output_range"][1]),
            diagnostics=d["diagnostics"],
            config=d["config"],
            meta=d.get("meta", {}),
        )


def save_model(model: BoostModel, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, indent=1)
        fh.write("\n")


def load_model(path) -> BoostModel:
    with open(path, "r", encoding="utf-8") as fh:
        return BoostModel.from_dict(json.load(fh))


def fit(X, y, config: BoostConfig = BoostConfig(), X_val=None, y_val=None) -> BoostModel:
    """Train a boosted conditional density model.

    A validation part (either supplied or split off per
    ``config.validation_fraction``) scores every boosting prefix; prediction
    then uses the best prefix.  Pretreatments are fit on the training part
    only and applied to both parts.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise ValueError("covariates and responses disagree in length")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise ValueError("covariates and responses must be finite")
    n, d = X.shape
    if n < 2 * config.min_node:
        raise ValueError("not enough samples to fit")

    rng = np.random.default_rng(config.seed)
    if X_val is None and config.validation_fraction > 0.0:
        n_val = int(round(config.validation_fraction * n))
        perm = rng.permutation(n)
        val_idx, tr_idx = perm[:n_val], perm[n_val:]
        X_tr, y_tr = X[tr_idx], y[tr_idx]
        X_val, y_val = X[val_idx], y[val_idx]
    else:
        X_tr, y_tr = X, y
        if X_val is not None:
            X_val = np.atleast_2d(np.asarray(X_val, dtype=float))
            y_val = np.asarray(y_val, dtype=float)
    has_val = X_val is not None and X_val.shape[0] > 0

    # Pretreatments, fit on the training part only.
    transform = None
    work_tr, work_val = y_tr, (y_val if has_val else None)
    if config.transform == "boxcox":
        transform = pretreat.select_boxcox(y_tr, shift=config.shift_nonpositive)
    elif config.transform == "log":
        shift = 0.0
        if np.min(y_tr) <= 0:
            if not config.shift_nonpositive:
                raise ValueError("log transform needs positive responses; enable shift")
            shift = 1.0 - float(np.min(y_tr))
        transform = TransformRecord(kind="log", power=0.0, shift=shift)
    if transform is not None:
        work_tr = transform.forward(y_tr)
        work_val = transform.forward(y_val) if has_val else None
    centering = None
    if config.center:
        centering = pretreat.fit_mean(
            X_tr, work_tr, MeanConfig(seed=config.seed + 1)
        )
        work_tr = work_tr - centering.predict(X_tr)
        if has_val:
            work_val = work_val - centering.predict(X_val)

    n_tr = work_tr.shape[0]
    grid = BinGrid.from_data(work_tr, config.n_bins)
    basis = build_basis(work_tr, config.n_basis)
    if config.carrying == "gaussian":
        kappa = CarryingDensity.from_data(work_tr)
    else:
        kappa = CarryingDensity(kind="uniform")

    binned = discretize(work_tr, grid)
    if config.df >= basis.k - 1e-12:
        ridge_total = 0.0
        fit_poisson(binned, basis, grid, kappa, 0.0)  # surfaces degenerate data early
    else:
        ridge_total, _ = lambda_for_df(config.df, binned, basis, grid, kappa)
    lam = ridge_total / n_tr

    mids = grid.midpoints
    design = basis.evaluate(mids)
    base_log = kappa.log_density(mids) + math.log(grid.width)
    bin_tr = grid.bin_index(work_tr)
    logw_tr = np.tile(base_log, (n_tr, 1))
    probs_tr = _softmax_rows(logw_tr)
    row_ix = np.arange(n_tr)
    if has_val:
        bin_val = grid.bin_index(work_val, clamp=True)
        logw_val = np.tile(base_log, (work_val.shape[0], 1))
        probs_val = _softmax_rows(logw_val)
        row_ix_val = np.arange(work_val.shape[0])

    def mean_ll(probs, rows, bins):
        return float(np.mean(np.log(probs[rows, bins] / grid.width)))

    base_train_ll = mean_ll(probs_tr, row_ix, bin_tr)
    base_val_ll = mean_ll(probs_val, row_ix_val, bin_val) if has_val else None

    trees = []
    train_ll, val_ll = [], []
    best_val, best_t = (base_val_ll, 0) if has_val else (None, 0)
    for t in range(config.n_trees):
        tree = _grow_boost_tree(X_tr, bin_tr, probs_tr, design, lam, basis.penalties, config)
        trees.append(tree)
        for idx, gamma in tree.assign(X_tr):
            logw_tr[idx] += design @ (config.eta * gamma)
        probs_tr = _softmax_rows(logw_tr)
        train_ll.append(mean_ll(probs_tr, row_ix, bin_tr))
        if has_val:
            for idx, gamma in tree.assign(X_val):
                logw_val[idx] += design @ (config.eta * gamma)
            probs_val = _softmax_rows(logw_val)
            ll = mean_ll(probs_val, row_ix_val, bin_val)
            val_ll.append(ll)
            if ll > best_val:
                best_val, best_t = ll, t + 1
            elif (
                config.early_stop_patience is not None
                and t + 1 - best_t >= config.early_stop_patience
            ):
                break

    selected = best_t if has_val else len(trees)
    diagnostics = {
        "baseline_train_loglik": base_train_ll,
        "train_loglik": train_ll,
        "baseline_val_loglik": base_val_ll,
        "val_loglik": val_ll if has_val else None,
        "n_train": int(n_tr),
        "n_val": int(X_val.shape[0]) if has_val else 0,
    }
    cfg = asdict(config)
    return BoostModel(
        basis=basis,
        grid=grid,
        kappa=kappa,
        eta=config.eta,
        lam=lam,
        ridge_total=ridge_total,
        trees=trees,
        selected_trees=selected,
        n_features=d,
        transform=transform,
        centering=centering,
        train_mean=float(np.mean(y)),
        train_sd=float(np.std(y)),
        output_lo=float(np.min(y)),
        output_hi=float(np.max(y)),
        diagnostics=diagnostics,
        config=cfg,
        meta={"created": datetime.datetime.now(datetime.timezone.utc).isoformat()},
    )
