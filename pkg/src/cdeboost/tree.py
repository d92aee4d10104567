"""Density trees: recursive partitioning with per-node histogram fits.

Each node fits the unconditional density model to its own samples.  Split
search scores a candidate by a quadratic form in the difference of mean
sufficient statistics between the two children, normalized by the node's
statistic covariance plus the ridge; that score approximates the penalized
log-likelihood improvement from refitting both children, at a fraction of
the cost.  The covariance is read off the fitted cell probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import binfit
from .errors import NumericError

HESSIAN_STABILIZER = 1e-3  # epsilon * tr(H)/k added to the diagonal before inversion


@dataclass(frozen=True)
class TreeConfig:
    max_depth: int = 2
    min_node: int = 10
    n_candidates: int = 30
    gain_threshold: float = 0.0


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    gain: float
    n_left: int
    n_right: int


@dataclass
class TreeNode:
    """Internal node (feature/threshold/children) or leaf (value vector)."""

    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    value: Optional[np.ndarray] = None

    @property
    def is_leaf(self) -> bool:
        return self.value is not None

    def to_dict(self):
        if self.is_leaf:
            return {"leaf": np.asarray(self.value).tolist()}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if "leaf" in d:
            return cls(value=np.asarray(d["leaf"], dtype=float))
        return cls(
            feature=int(d["feature"]),
            threshold=float(d["threshold"]),
            left=cls.from_dict(d["left"]),
            right=cls.from_dict(d["right"]),
        )


@dataclass
class DensityTree:
    """A fitted tree plus the realized split gains per feature."""

    root: TreeNode
    gains: np.ndarray

    def assign(self, X):
        """Yield (row-index array, leaf value) pairs partitioning X."""
        X = np.asarray(X, dtype=float)
        out = []

        def walk(node, idx):
            if node.is_leaf:
                out.append((idx, node.value))
                return
            mask = X[idx, node.feature] <= node.threshold
            walk(node.left, idx[mask])
            walk(node.right, idx[~mask])

        walk(self.root, np.arange(X.shape[0]))
        return out

    def leaf_values(self, X):
        """Leaf value for each row of X, shape (n, k)."""
        X = np.asarray(X, dtype=float)
        width = np.asarray(self.root.value).shape[0] if self.root.is_leaf else None
        first = self.root
        while not first.is_leaf:
            first = first.left
        width = np.asarray(first.value).shape[0]
        out = np.empty((X.shape[0], width))
        for idx, value in self.assign(X):
            out[idx] = value
        return out

    def n_leaves(self) -> int:
        def count(node):
            return 1 if node.is_leaf else count(node.left) + count(node.right)

        return count(self.root)

    def to_dict(self):
        return {"root": self.root.to_dict(), "gains": self.gains.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(root=TreeNode.from_dict(d["root"]), gains=np.asarray(d["gains"], dtype=float))


@dataclass(frozen=True)
class NodeStats:
    """Node summary used by the split score."""

    n: int
    zbar: np.ndarray
    beta_hat: np.ndarray
    hessian: np.ndarray
    fit: binfit.LindseyFit


def statistic_covariance(cell_probs, design):
    """Covariance of the sufficient statistics under the fitted bin masses."""
    mean = cell_probs @ design
    return design.T @ (cell_probs[:, None] * design) - np.outer(mean, mean)


def node_fit(y_node, basis, grid, kappa, lam_per_sample, init=None) -> NodeStats:
    """Histogram fit of one node; ridge scales with the node's sample count."""
    y_node = np.asarray(y_node, dtype=float)
    binned = binfit.discretize(y_node, grid)
    fit = binfit.fit_poisson(binned, basis, grid, kappa, lam_per_sample * binned.n, init=init)
    design = basis.evaluate(grid.midpoints)
    hessian = statistic_covariance(fit.cell_probs, design)
    zbar = basis.evaluate(y_node).mean(axis=0)
    return NodeStats(n=binned.n, zbar=zbar, beta_hat=fit.beta, hessian=hessian, fit=fit)


def _stabilized(hessian, lam, penalties):
    k = hessian.shape[0]
    eps = HESSIAN_STABILIZER * np.trace(hessian) / k
    return hessian + 2.0 * lam * np.diag(penalties) + eps * np.eye(k)


def quad_solver(matrix):
    """Cholesky-backed map d -> d' M^-1 d for the split score."""
    try:
        factor = scipy.linalg.cho_factor(matrix, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericError("split normalization matrix is singular after stabilization") from exc

    def solve(d):
        d = np.atleast_2d(d)
        sol = scipy.linalg.cho_solve(factor, d.T)
        return np.einsum("ij,ji->i", d, sol)

    return solve


def split_gain(stats: NodeStats, zbar_left, zbar_right, n_left, n_right, lam, penalties):
    """Quadratic improvement score of one candidate split, in log-likelihood units."""
    if min(n_left, n_right) <= 0:
        return 0.0
    d = np.asarray(zbar_left, dtype=float) - np.asarray(zbar_right, dtype=float)
    solve = quad_solver(_stabilized(stats.hessian, lam, np.asarray(penalties, dtype=float)))
    n = n_left + n_right
    return float(n_left * n_right / (2.0 * n) * solve(d)[0])


def candidate_thresholds(x, n_candidates):
    """Distinct thresholds at equally spaced quantiles of the node's values."""
    probs = np.arange(1, n_candidates + 1) / (n_candidates + 1)
    return np.unique(np.quantile(x, probs))


def _thresholds_from_sorted(xs, n_candidates):
    """Same quantile rule as :func:`candidate_thresholds`, on presorted values."""
    probs = np.arange(1, n_candidates + 1) / (n_candidates + 1)
    pos = probs * (xs.shape[0] - 1)
    left = np.floor(pos).astype(int)
    frac = pos - left
    right = np.minimum(left + 1, xs.shape[0] - 1)
    return np.unique(xs[left] * (1.0 - frac) + xs[right] * frac)


def scan_best_split(X_node, vectors, solve, config: TreeConfig):
    """One left-to-right pass per feature over the candidate thresholds.

    ``vectors`` holds one statistic vector per sample (sufficient statistics
    for stand-alone trees, residuals for boosting, plain responses for mean
    regression).  The gain of a candidate is
    n_L n_R / (2 n) * d' M^-1 d with d the difference of child means; rows
    with fewer than ``min_node`` samples on either side score zero.  Ties
    resolve to the smallest feature index, then the smallest threshold.
    """
    X_node = np.asarray(X_node, dtype=float)
    vectors = np.asarray(vectors, dtype=float)
    n, d = X_node.shape
    best = None
    best_gain = config.gain_threshold
    for j in range(d):
        x = X_node[:, j]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        thresholds = _thresholds_from_sorted(xs, config.n_candidates)
        if thresholds.size == 0:
            continue
        csum = np.cumsum(vectors[order], axis=0)
        total = csum[-1]
        n_left = np.searchsorted(xs, thresholds, side="right")
        ok = (n_left >= config.min_node) & (n - n_left >= config.min_node)
        if not np.any(ok):
            continue
        nl = n_left[ok]
        sums_left = csum[nl - 1]
        diffs = sums_left / nl[:, None] - (total - sums_left) / (n - nl)[:, None]
        gains = nl * (n - nl) / (2.0 * n) * solve(diffs)
        for thr, nl_i, gain in zip(thresholds[ok], nl, gains):
            if gain > best_gain:
                best_gain = gain
                best = SplitCandidate(
                    feature=j,
                    threshold=float(thr),
                    gain=float(gain),
                    n_left=int(nl_i),
                    n_right=int(n - nl_i),
                )
    return best


def grow_tree(X, y, basis, grid, kappa, lam_per_sample, config: TreeConfig) -> DensityTree:
    """Grow a stand-alone density tree; leaves carry per-node coefficients."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    if n < 2 * config.min_node:
        raise ValueError("not enough samples to grow a tree")
    z_all = basis.evaluate(y)
    gains = np.zeros(d)

    def build(idx, depth, init):
        stats = node_fit(y[idx], basis, grid, kappa, lam_per_sample, init=init)
        if depth >= config.max_depth or idx.size < 2 * config.min_node:
            return TreeNode(value=stats.beta_hat)
        solve = quad_solver(_stabilized(stats.hessian, lam_per_sample, basis.penalties))
        best = scan_best_split(X[idx], z_all[idx], solve, config)
        if best is None:
            return TreeNode(value=stats.beta_hat)
        gains[best.feature] += best.gain
        mask = X[idx, best.feature] <= best.threshold
        warm = (stats.beta_hat, stats.fit.beta0)
        return TreeNode(
            feature=best.feature,
            threshold=best.threshold,
            left=build(idx[mask], depth + 1, warm),
            right=build(idx[~mask], depth + 1, warm),
        )

    root = build(np.arange(n), 0, None)
    return DensityTree(root=root, gains=gains)


def importance(trees) -> np.ndarray:
    """Per-feature share of the realized split gains, normalized to sum to 1."""
    trees = list(trees)
    if not trees:
        raise ValueError("need at least one tree")
    total = np.sum([t.gains for t in trees], axis=0)
    s = total.sum()
    if s <= 0:
        import warnings

        warnings.warn("no realized split gain; returning uniform importance scores")
        return np.full(total.shape[0], 1.0 / total.shape[0])
    return total / s
