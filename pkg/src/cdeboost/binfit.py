"""Unconditional density estimation on a histogram grid.

A sample is discretized into B equal-width bins; the bin counts are then
treated as Poisson responses and regressed on the spline statistics with
the carrying density's log as an offset.  Maximizing that Poisson
likelihood (plus the diagonal roughness ridge) is the discrete stand-in
for maximum-likelihood density estimation: the normalizing constant is
absorbed by the regression intercept.

The ridge strength is parameterized through the effective degrees of
freedom tr((H + 2*lam*Omega)^-1 H) - 1, with the intercept padded in
unpenalized; ``lambda_for_df`` inverts that relationship by bisection.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .errors import ConvergenceError, NumericError

NEWTON_MAX_ITER = 100
NEWTON_MAX_HALVINGS = 30
NEWTON_GRAD_RTOL = 1e-8
NEWTON_STEP_TOL = 1e-10
DF_TOL = 0.01


@dataclass(frozen=True)
class BinGrid:
    """B equal-width bins spanning [lo, hi].

    Bins are half-open on the right, except the last bin which is closed,
    so every point of [lo, hi] maps to exactly one bin.
    """

    n_bins: int
    lo: float
    hi: float

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError("need at least 2 bins")
        if not self.hi > self.lo:
            raise ValueError("bin grid range must have hi > lo")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n_bins

    @property
    def midpoints(self) -> np.ndarray:
        return self.lo + (np.arange(self.n_bins) + 0.5) * self.width

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_bins + 1)

    def bin_index(self, y, clamp: bool = False) -> np.ndarray:
        """0-based bin index of each response; raises if out of range unless clamped."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if not clamp and (np.any(y < self.lo) or np.any(y > self.hi)):
            raise ValueError("response outside the bin grid range; widen the grid or pretransform")
        idx = np.floor((y - self.lo) / self.width).astype(int)
        return np.clip(idx, 0, self.n_bins - 1)

    def to_dict(self):
        return {"n_bins": self.n_bins, "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d):
        return cls(n_bins=int(d["n_bins"]), lo=float(d["lo"]), hi=float(d["hi"]))

    @classmethod
    def from_data(cls, y, n_bins: int) -> "BinGrid":
        y = np.asarray(y, dtype=float)
        return cls(n_bins=n_bins, lo=float(np.min(y)), hi=float(np.max(y)))


@dataclass(frozen=True)
class CarryingDensity:
    """Baseline density kappa(y) that the exponential tilt multiplies."""

    kind: str = "uniform"
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian"):
            raise ValueError(f"unknown carrying density kind {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValueError("gaussian carrying density needs sigma > 0")

    def log_density(self, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if self.kind == "uniform":
            return np.zeros_like(y)
        return -0.5 * ((y - self.mu) / self.sigma) ** 2 - math.log(
            self.sigma * math.sqrt(2.0 * math.pi)
        )

    @classmethod
    def from_data(cls, y) -> "CarryingDensity":
        """Gaussian matched to the sample mean and standard deviation."""
        y = np.asarray(y, dtype=float)
        sd = float(np.std(y))
        if sd <= 0:
            raise ValueError("cannot match a gaussian carrying density to constant data")
        return cls(kind="gaussian", mu=float(np.mean(y)), sigma=sd)

    def to_dict(self):
        return {"kind": self.kind, "mu": self.mu, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], mu=float(d["mu"]), sigma=float(d["sigma"]))


@dataclass(frozen=True)
class BinnedSample:
    """Per-bin counts of a discretized sample."""

    counts: np.ndarray
    n: int


@dataclass(frozen=True)
class LindseyFit:
    """Result of one penalized Poisson density fit.

    ``beta`` are coefficients on the transformed spline statistics, ``beta0``
    the unpenalized intercept, ``lam`` the total ridge multiplier applied to
    sum_j penalty_j * beta_j^2, and ``cell_probs`` the normalized bin masses
    proportional to kappa(y_b) exp(z_b' beta).
    """

    beta: np.ndarray
    beta0: float
    lam: float
    cell_probs: np.ndarray
    df: float
    gradient_norm_at_exit: float
    n_iter: int
    objective_trace: np.ndarray


def discretize(y, grid: BinGrid) -> BinnedSample:
    """Count responses per bin; every response must lie inside the grid."""
    idx = grid.bin_index(y)
    counts = np.bincount(idx, minlength=grid.n_bins)
    return BinnedSample(counts=counts, n=int(counts.sum()))


def _penalty(lam, omega, coef):
    return lam * float(omega @ (coef * coef))


def newton_poisson(
    counts,
    design,
    log_offset,
    lam,
    omega,
    ridge_center=None,
    init=None,
    record_trace=False,
):
    """Penalized Poisson regression of bin counts on the spline statistics.

    Maximizes sum_b counts_b * eta_b - sum_b exp(eta_b) - lam * sum_j
    omega_j (center_j + beta_j)^2 over (beta0, beta), where eta_b =
    log_offset_b + design_b' beta + beta0.  ``ridge_center`` shifts the
    ridge so the penalty applies to an accumulated coefficient rather than
    this fit's increment (used by the boosting inner loop); it defaults to
    zero.  Newton steps are halved while they would decrease the objective.
    """
    counts = np.asarray(counts, dtype=float)
    design = np.asarray(design, dtype=float)
    log_offset = np.asarray(log_offset, dtype=float)
    n_bins, k = design.shape
    omega = np.zeros(k) if omega is None else np.asarray(omega, dtype=float)
    center = np.zeros(k) if ridge_center is None else np.asarray(ridge_center, dtype=float)
    n = counts.sum()
    if n <= 0:
        raise ValueError("all bin counts are zero; nothing to fit")

    if init is None:
        beta = np.zeros(k)
        beta0 = math.log(n / np.exp(log_offset).sum())
    else:
        beta = np.array(init[0], dtype=float)
        beta0 = float(init[1])

    def mu_of(beta, beta0):
        eta = log_offset + design @ beta + beta0
        return np.exp(np.clip(eta, -700.0, 700.0))

    def objective(beta, beta0, mu):
        eta = log_offset + design @ beta + beta0
        return float(counts @ eta - mu.sum() - _penalty(lam, omega, center + beta))

    mu = mu_of(beta, beta0)
    obj = objective(beta, beta0, mu)
    trace = [obj] if record_trace else None
    grad_norm = np.inf
    n_iter = 0

    for n_iter in range(1, NEWTON_MAX_ITER + 1):
        grad_beta = design.T @ (counts - mu) - 2.0 * lam * omega * (center + beta)
        grad0 = n - mu.sum()
        grad_norm = max(float(np.max(np.abs(grad_beta))), abs(float(grad0)))
        if grad_norm < NEWTON_GRAD_RTOL * n:
            break

        wz = mu[:, None] * design
        hess = np.empty((k + 1, k + 1))
        hess[0, 0] = mu.sum()
        hess[0, 1:] = wz.sum(axis=0)
        hess[1:, 0] = hess[0, 1:]
        hess[1:, 1:] = design.T @ wz + 2.0 * lam * np.diag(omega)
        rhs = np.concatenate(([grad0], grad_beta))
        try:
            step = np.linalg.solve(hess, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericError("singular Hessian in Poisson fit") from exc

        size = 1.0
        accepted = False
        for _ in range(NEWTON_MAX_HALVINGS + 1):
            cand_beta = beta + size * step[1:]
            cand_beta0 = beta0 + size * step[0]
            cand_mu = mu_of(cand_beta, cand_beta0)
            cand_obj = objective(cand_beta, cand_beta0, cand_mu)
            if np.isfinite(cand_obj) and cand_obj >= obj:
                accepted = True
                break
            size *= 0.5
        if not accepted:
            break
        step_norm = size * float(np.linalg.norm(step))
        beta, beta0, mu, obj = cand_beta, cand_beta0, cand_mu, cand_obj
        if record_trace:
            trace.append(obj)
        if step_norm < NEWTON_STEP_TOL:
            # Recheck the gradient at the accepted point before declaring done.
            grad_beta = design.T @ (counts - mu) - 2.0 * lam * omega * (center + beta)
            grad_norm = max(float(np.max(np.abs(grad_beta))), abs(float(n - mu.sum())))
            break
    else:
        raise ConvergenceError(
            f"Poisson fit did not converge in {NEWTON_MAX_ITER} iterations "
            f"(gradient norm {grad_norm:.3e})",
            beta=beta,
            beta0=beta0,
            gradient_norm=grad_norm,
            n_iter=n_iter,
        )

    if grad_norm >= NEWTON_GRAD_RTOL * n and not grad_norm < np.inf:
        raise ConvergenceError(
            "Poisson fit stalled with non-finite gradient",
            beta=beta,
            beta0=beta0,
            gradient_norm=grad_norm,
            n_iter=n_iter,
        )

    return SimpleNamespace(
        beta=beta,
        beta0=beta0,
        mu=mu,
        gradient_norm=grad_norm,
        n_iter=n_iter,
        objective=obj,
        objective_trace=np.asarray(trace) if record_trace else np.empty(0),
    )


def degrees_of_freedom(design, mu, lam, penalties) -> float:
    """Effective parameters tr((H + 2*lam*Omega)^-1 H) - 1.

    ``design`` excludes the intercept; an intercept column is prepended here
    and the penalty matrix padded with a zero row/column for it, then one
    degree of freedom is subtracted so the reported value counts only the
    spline coefficients.
    """
    design = np.asarray(design, dtype=float)
    mu = np.asarray(mu, dtype=float)
    full = np.column_stack([np.ones(design.shape[0]), design])
    h = full.T @ (mu[:, None] * full)
    omega_pad = np.diag(np.concatenate([[0.0], np.asarray(penalties, dtype=float)]))
    try:
        solved = np.linalg.solve(h + 2.0 * lam * omega_pad, h)
    except np.linalg.LinAlgError as exc:
        raise NumericError("singular system in degrees-of-freedom computation") from exc
    return float(np.trace(solved)) - 1.0


def fit_poisson(
    binned: BinnedSample,
    basis,
    grid: BinGrid,
    kappa: CarryingDensity,
    lam: float,
    init=None,
    record_trace=False,
) -> LindseyFit:
    """Fit the discretized density model to binned counts.

    ``lam`` is the total ridge multiplier on sum_j penalty_j beta_j^2 (it is
    not rescaled by the sample size here; callers that carry a per-sample
    penalty multiply it by their region size first).
    """
    if binned.counts.shape[0] != grid.n_bins:
        raise ValueError("binned sample does not match the grid")
    if binned.n == 0:
        raise ValueError("all bin counts are zero; nothing to fit")
    if not np.isfinite(lam) or lam < 0:
        raise ValueError("ridge multiplier must be finite and nonnegative")
    mids = grid.midpoints
    design = basis.evaluate(mids)
    log_offset = kappa.log_density(mids) + math.log(grid.width)
    res = newton_poisson(
        binned.counts,
        design,
        log_offset,
        lam,
        basis.penalties,
        init=init,
        record_trace=record_trace,
    )
    cell_probs = res.mu / res.mu.sum()
    df = degrees_of_freedom(design, res.mu, lam, basis.penalties)
    return LindseyFit(
        beta=res.beta,
        beta0=res.beta0,
        lam=float(lam),
        cell_probs=cell_probs,
        df=df,
        gradient_norm_at_exit=res.gradient_norm,
        n_iter=res.n_iter,
        objective_trace=res.objective_trace,
    )


def lambda_for_df(target_df, binned, basis, grid, kappa):
    """Solve for the ridge multiplier giving the requested degrees of freedom.

    Bisection on log(lam); at every candidate the model is refit so the
    Poisson weights entering the trace formula stay consistent with the
    penalty being probed.  Returns ``(lam, fit_at_lam)``.
    """
    k = basis.k
    if not (2.0 < target_df <= k + 1e-9):
        raise ValueError(f"target df must lie in (2, {k}], got {target_df}")
    if target_df >= k - 1e-12:
        return 0.0, fit_poisson(binned, basis, grid, kappa, 0.0)

    cache = {}

    def df_at(lam, init=None):
        fit = fit_poisson(binned, basis, grid, kappa, lam, init=init)
        cache[lam] = fit
        return fit.df, fit

    lo = 1e-8
    df_lo, fit = df_at(lo)
    while df_lo <= target_df:
        lo /= 10.0
        if lo < 1e-300:
            raise NumericError("could not bracket the df target from below")
        df_lo, fit = df_at(lo, init=(fit.beta, fit.beta0))
    hi = max(1.0, 10.0 * lo)
    df_hi, fit = df_at(hi, init=(fit.beta, fit.beta0))
    while df_hi >= target_df:
        hi *= 10.0
        if hi > 1e14:
            raise NumericError("could not bracket the df target from above")
        df_hi, fit = df_at(hi, init=(fit.beta, fit.beta0))

    lam = hi
    df_val = df_hi
    for _ in range(200):
        if abs(df_val - target_df) < DF_TOL:
            break
        lam = math.sqrt(lo * hi)
        df_val, fit = df_at(lam, init=(fit.beta, fit.beta0))
        if df_val > target_df:
            lo = lam
        else:
            hi = lam
    else:
        raise ConvergenceError(
            f"df bisection did not reach |df - {target_df}| < {DF_TOL}",
            gradient_norm=abs(df_val - target_df),
        )
    return lam, cache[lam]


def density_at(fit: LindseyFit, grid: BinGrid, y):
    """Piecewise-constant density readout p_b / width at the given points.

    Points outside the grid get density zero (with a warning); the model
    assigns no mass there.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    inside = (y >= grid.lo) & (y <= grid.hi)
    out = np.zeros(y.shape[0])
    if not np.all(inside):
        warnings.warn("density requested outside the fitted grid; returning 0 there")
    if np.any(inside):
        idx = grid.bin_index(y[inside])
        out[inside] = fit.cell_probs[idx] / grid.width
    if out.shape[0] == 1 and np.isscalar(y[0]):
        return out
    return out
