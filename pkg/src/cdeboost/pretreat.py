"""Optional response pretreatments: power transforms and mean centering.

A Box-Cox style transform pulls heavy-tailed responses toward marginal
normality before binning.  Centering subtracts a boosted-tree estimate of
the conditional mean so the density learner only has to model shape around
a common location; estimated densities are shifted back afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tree import DensityTree, TreeConfig, TreeNode, scan_best_split

BOXCOX_POWERS = np.round(np.arange(-2.0, 2.0 + 1e-9, 0.1), 10)


@dataclass(frozen=True)
class TransformRecord:
    """Invertible response transform with its derivative for density readout."""

    kind: str = "identity"  # identity | log | boxcox
    power: float = 1.0
    shift: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "log", "boxcox"):
            raise ValueError(f"unknown transform kind {self.kind!r}")

    def forward(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "identity":
            return y + 0.0
        v = y + self.shift
        if np.any(v <= 0):
            raise ValueError("transform requires positive values; supply a shift")
        if self.kind == "log":
            return np.log(v)
        return (v**self.power - 1.0) / self.power

    def inverse(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "identity":
            return t + 0.0
        if self.kind == "log":
            return np.exp(t) - self.shift
        return (self.power * t + 1.0) ** (1.0 / self.power) - self.shift

    def deriv(self, y):
        """dT/dy, the Jacobian applied when mapping densities back."""
        y = np.asarray(y, dtype=float)
        if self.kind == "identity":
            return np.ones_like(y)
        v = y + self.shift
        if self.kind == "log":
            return 1.0 / v
        return v ** (self.power - 1.0)

    def to_dict(self):
        return {"kind": self.kind, "power": self.power, "shift": self.shift}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], power=float(d["power"]), shift=float(d["shift"]))


def select_boxcox(y, shift: bool = False) -> TransformRecord:
    """Pick the power in [-2, 2] (step 0.1) maximizing Gaussian profile likelihood.

    The criterion is the profile log-likelihood of the transformed sample under
    a fitted normal, including the transform Jacobian.  Power zero means log.
    Non-positive responses are rejected unless ``shift`` requests the offset
    c = 1 - min(y).
    """
    y = np.asarray(y, dtype=float)
    if y.size < 2 or np.ptp(y) == 0:
        raise ValueError("need a non-constant sample to choose a transform")
    c = 0.0
    if np.min(y) <= 0:
        if not shift:
            raise ValueError("responses must be positive for a power transform; enable shift")
        c = 1.0 - float(np.min(y))
    v = y + c
    logs = np.log(v)
    n = y.size
    best_p, best_ll = None, -np.inf
    for p in BOXCOX_POWERS:
        t = logs if p == 0.0 else (v**p - 1.0) / p
        var = float(np.var(t))
        if var <= 0:
            continue
        ll = -0.5 * n * math.log(var) + (p - 1.0) * float(logs.sum())
        if ll > best_ll:
            best_ll, best_p = ll, float(p)
    if best_p is None:
        raise ValueError("profile likelihood degenerate for every candidate power")
    kind = "log" if best_p == 0.0 else "boxcox"
    return TransformRecord(kind=kind, power=best_p, shift=c)


@dataclass(frozen=True)
class MeanConfig:
    n_trees: int = 500
    eta: float = 0.1
    max_depth: int = 2
    min_node: int = 10
    n_candidates: int = 30
    validation_fraction: float = 0.2
    patience: int = 50
    seed: int = 0


@dataclass
class CenteringModel:
    """Boosted squared-error trees estimating the conditional mean."""

    init: float
    eta: float
    trees: list
    selected_trees: int
    val_mse: Optional[np.ndarray] = None

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        out = np.full(X.shape[0], self.init)
        for t in self.trees[: self.selected_trees]:
            out += self.eta * t.leaf_values(X)[:, 0]
        return out

    def to_dict(self):
        return {
            "init": self.init,
            "eta": self.eta,
            "selected_trees": self.selected_trees,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            init=float(d["init"]),
            eta=float(d["eta"]),
            trees=[DensityTree.from_dict(t) for t in d["trees"]],
            selected_trees=int(d["selected_trees"]),
        )


def _sum_of_squares_solve(diffs):
    diffs = np.atleast_2d(diffs)
    return np.einsum("ij,ij->i", diffs, diffs)


def _grow_mean_tree(X, residual, config: TreeConfig):
    """Variance-reduction regression tree on the current residuals."""
    gains = np.zeros(X.shape[1])

    def build(idx, depth):
        r = residual[idx]
        if depth >= config.max_depth or idx.size < 2 * config.min_node:
            return TreeNode(value=np.array([r.mean()]))
        best = scan_best_split(X[idx], r[:, None], _sum_of_squares_solve, config)
        if best is None:
            return TreeNode(value=np.array([r.mean()]))
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


def fit_mean(X, y, config: MeanConfig = MeanConfig()) -> CenteringModel:
    """Gradient-boosted conditional-mean estimator with validation-picked length.

    Iteration 0 (the constant training mean) competes with every boosted
    prefix, so on pure noise the selected model collapses to the sample mean.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n < 20:
        raise ValueError("need at least 20 samples to fit the centering model")
    rng = np.random.default_rng(config.seed)
    n_val = int(round(config.validation_fraction * n))
    perm = rng.permutation(n)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    X_tr, y_tr = X[tr_idx], y[tr_idx]
    X_val, y_val = X[val_idx], y[val_idx]

    tree_cfg = TreeConfig(
        max_depth=config.max_depth,
        min_node=config.min_node,
        n_candidates=config.n_candidates,
        gain_threshold=0.0,
    )
    init = float(y_tr.mean())
    pred_tr = np.full(y_tr.shape[0], init)
    pred_val = np.full(y_val.shape[0], init)
    trees = []
    val_mse = [float(np.mean((y_val - pred_val) ** 2))] if n_val else [float("nan")]
    best_t, best_mse = 0, val_mse[0]
    for t in range(config.n_trees):
        if y_tr.shape[0] < 2 * config.min_node:
            break
        tree = _grow_mean_tree(X_tr, y_tr - pred_tr, tree_cfg)
        trees.append(tree)
        pred_tr += config.eta * tree.leaf_values(X_tr)[:, 0]
        if n_val:
            pred_val += config.eta * tree.leaf_values(X_val)[:, 0]
            mse = float(np.mean((y_val - pred_val) ** 2))
            val_mse.append(mse)
            if mse < best_mse - 1e-12:
                best_mse, best_t = mse, t + 1
            elif config.patience and t + 1 - best_t >= config.patience:
                break
    selected = best_t if n_val else len(trees)
    return CenteringModel(
        init=init,
        eta=config.eta,
        trees=trees,
        selected_trees=selected,
        val_mse=np.asarray(val_mse) if n_val else None,
    )


def apply_centering(model: CenteringModel, X, y):
    """Residuals y - h(x) used as the density learner's response."""
    return np.asarray(y, dtype=float) - model.predict(X)


def shift_rebin(masses, edges, shift, out_edges):
    """Move bin masses by a constant shift onto a new grid, preserving mass.

    The source density is treated as piecewise constant; each shifted source
    bin deposits mass into the destination bins proportionally to overlap.
    Mass shifted outside the destination grid is dropped.
    """
    masses = np.asarray(masses, dtype=float)
    src_lo = np.asarray(edges[:-1], dtype=float) + shift
    src_hi = np.asarray(edges[1:], dtype=float) + shift
    out_edges = np.asarray(out_edges, dtype=float)
    out = np.zeros(out_edges.shape[0] - 1)
    width = src_hi - src_lo
    for lo, hi, m, w in zip(src_lo, src_hi, masses, width):
        if m == 0.0 or w <= 0.0:
            continue
        a = np.searchsorted(out_edges, lo, side="right") - 1
        b = np.searchsorted(out_edges, hi, side="left")
        for j in range(max(a, 0), min(b, out.shape[0])):
            overlap = min(hi, out_edges[j + 1]) - max(lo, out_edges[j])
            if overlap > 0:
                out[j] += m * overlap / w
    return out
