"""Spline sufficient statistics with a diagonalized roughness penalty.

The response enters the density model only through a vector of k smooth
basis functions z(y).  The raw family spans {y, y^2} plus k-2 cubic-spline
curvature functions anchored at k knots; it deliberately excludes the
constant function (that direction belongs to the fit's intercept) while
keeping the full linear and quadratic trends, which carry no roughness
penalty.

The roughness penalty integrates squared third derivatives over the knot
span.  Third derivatives of the basis are piecewise constant between knots,
so the penalty matrix is assembled exactly, with no quadrature error.  An
eigendecomposition of that matrix rotates the basis so the penalty becomes
a diagonal weighted ridge, and each rotated function is rescaled to unit
L2 norm over the knot span.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

# Eigenvalues below this fraction of the largest are treated as exact zeros,
# so the unpenalized linear/quadratic directions never pick up a stray ridge.
ZERO_EIGENVALUE_RTOL = 1e-10


@dataclass(frozen=True)
class RawSplineBasis:
    """Untransformed basis functions z_1 = y, z_2 = y^2, then curvature splines.

    Each curvature function is a natural cubic spline (linear beyond the
    boundary knots).  The evaluator continues every function linearly past
    the boundary knots, so only the quadratic column bends the rule of
    second-derivative continuity, and only at the two boundary points.
    """

    knots: np.ndarray
    k: int

    @property
    def lo(self) -> float:
        return float(self.knots[0])

    @property
    def hi(self) -> float:
        return float(self.knots[-1])

    def _inside(self, y):
        """Basis values for points already inside [lo, hi]; shape (n, k)."""
        z = np.empty((y.shape[0], self.k))
        z[:, 0] = y
        z[:, 1] = y * y
        if self.k > 2:
            kn = self.knots
            denom = kn[-1] - kn[:-2]
            cub = np.maximum(y[:, None] - kn[None, :-2], 0.0) ** 3 / denom
            last = np.maximum(y - kn[-2], 0.0) ** 3 / (kn[-1] - kn[-2])
            z[:, 2:] = cub - last[:, None]
        return z

    def _inside_deriv(self, y):
        """First derivatives for points inside [lo, hi]; shape (n, k)."""
        dz = np.empty((y.shape[0], self.k))
        dz[:, 0] = 1.0
        dz[:, 1] = 2.0 * y
        if self.k > 2:
            kn = self.knots
            denom = kn[-1] - kn[:-2]
            cub = 3.0 * np.maximum(y[:, None] - kn[None, :-2], 0.0) ** 2 / denom
            last = 3.0 * np.maximum(y - kn[-2], 0.0) ** 2 / (kn[-1] - kn[-2])
            dz[:, 2:] = cub - last[:, None]
        return dz

    def evaluate(self, y):
        """Basis values with linear continuation beyond the boundary knots."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        yc = np.clip(y, self.lo, self.hi)
        z = self._inside(yc)
        outside = y != yc
        if np.any(outside):
            z[outside] += self._inside_deriv(yc[outside]) * (y - yc)[outside, None]
        return z

    def third_derivative_constants(self):
        """Piecewise-constant third derivatives on the k-1 knot intervals."""
        c = np.zeros((self.k, self.k - 1))
        if self.k > 2:
            kn = self.knots
            for j in range(self.k - 2):
                c[2 + j, j:] += 6.0 / (kn[-1] - kn[j])
                c[2 + j, -1] -= 6.0 / (kn[-1] - kn[-2])
        return c


@dataclass(frozen=True)
class PenaltyMatrix:
    """Roughness penalty: omega[j, l] = integral of z_j''' z_l''' over the span."""

    omega: np.ndarray


@dataclass(frozen=True)
class SplineBasis:
    """Rotated, rescaled basis under which the roughness penalty is diagonal.

    ``transform`` holds the orthonormal eigenvector matrix U (columns ordered
    by ascending penalty), ``scale`` the per-function normalizers making the
    span integral of each squared basis function equal one, ``eigenvalues``
    the penalty eigenvalues of the raw matrix, and ``penalties`` the ridge
    weights that apply to coefficients on the rescaled basis.  The first two
    penalties are exactly zero for k >= 2: those directions span the linear
    and quadratic trends.
    """

    raw: RawSplineBasis
    transform: np.ndarray
    scale: np.ndarray
    eigenvalues: np.ndarray
    penalties: np.ndarray

    @property
    def k(self) -> int:
        return self.raw.k

    @property
    def knots(self) -> np.ndarray:
        return self.raw.knots

    @property
    def effective_transform(self) -> np.ndarray:
        """Matrix A with z_tilde(y) = A^T z_raw(y), including the rescaling."""
        return self.transform * self.scale

    def evaluate(self, y):
        return self.raw.evaluate(y) @ self.effective_transform

    def to_dict(self):
        return {
            "knots": self.raw.knots.tolist(),
            "transform": self.transform.tolist(),
            "scale": self.scale.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "penalties": self.penalties.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        knots = np.asarray(d["knots"], dtype=float)
        return cls(
            raw=RawSplineBasis(knots=knots, k=len(knots)),
            transform=np.asarray(d["transform"], dtype=float),
            scale=np.asarray(d["scale"], dtype=float),
            eigenvalues=np.asarray(d["eigenvalues"], dtype=float),
            penalties=np.asarray(d["penalties"], dtype=float),
        )


@dataclass(frozen=True)
class IdentityBasis:
    """Single linear statistic z(y) = y.

    With this basis and a Gaussian carrying density the whole machinery
    collapses to ordinary squared-error regression, which is handy both in
    tests and for mean-centering learners.
    """

    k: int = 1
    penalties: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def evaluate(self, y):
        return np.atleast_1d(np.asarray(y, dtype=float))[:, None]


def build_raw_basis(knots, k=None) -> RawSplineBasis:
    """Construct the raw basis on the given strictly increasing knots."""
    knots = np.asarray(knots, dtype=float)
    if knots.ndim != 1 or np.any(np.diff(knots) <= 0):
        raise ValueError("knots must be a strictly increasing 1-d sequence")
    if k is None:
        k = len(knots)
    if k < 2:
        raise ValueError("basis dimension must be at least 2")
    if k != len(knots):
        raise ValueError(f"{k} basis functions require exactly {k} knots, got {len(knots)}")
    return RawSplineBasis(knots=knots, k=int(k))


def compute_penalty_matrix(basis: RawSplineBasis) -> PenaltyMatrix:
    """Exact penalty matrix from the piecewise-constant third derivatives."""
    c = basis.third_derivative_constants()
    lengths = np.diff(basis.knots)
    omega = (c * lengths) @ c.T
    omega = 0.5 * (omega + omega.T)
    return PenaltyMatrix(omega=omega)


def _gram_matrix(raw: RawSplineBasis, nodes_per_interval: int = 4):
    """Exact integral of z z^T over the knot span via Gauss-Legendre.

    Products of cubics have degree <= 6, so 4 nodes per interval are exact.
    """
    x, w = np.polynomial.legendre.leggauss(nodes_per_interval)
    a = raw.knots[:-1]
    b = raw.knots[1:]
    half = 0.5 * (b - a)
    pts = (half[:, None] * x[None, :] + 0.5 * (a + b)[:, None]).ravel()
    wts = (half[:, None] * w[None, :]).ravel()
    z = raw._inside(pts)
    return z.T @ (wts[:, None] * z)


def diagonalize(raw: RawSplineBasis, penalty: PenaltyMatrix) -> SplineBasis:
    """Rotate the basis so the penalty is diagonal, then normalize each function."""
    omega = np.asarray(penalty.omega, dtype=float)
    if omega.shape != (raw.k, raw.k):
        raise NumericError("penalty matrix shape does not match basis dimension")
    asym = np.max(np.abs(omega - omega.T)) if omega.size else 0.0
    if asym > 1e-8 * (1.0 + np.max(np.abs(omega))):
        raise NumericError("penalty matrix is not symmetric")

    vals, vecs = np.linalg.eigh(0.5 * (omega + omega.T))
    vmax = float(vals.max()) if vals.size else 0.0
    if vmax <= 0.0:
        vals = np.zeros(raw.k)
        vecs = np.eye(raw.k)
    else:
        vals = np.where(vals < ZERO_EIGENVALUE_RTOL * vmax, 0.0, vals)
    # Deterministic eigenvector signs: largest-magnitude entry positive.
    for j in range(raw.k):
        i = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[i, j] < 0:
            vecs[:, j] = -vecs[:, j]

    gram = _gram_matrix(raw)
    sq_norms = np.einsum("ij,ik,kj->j", vecs, gram, vecs)
    if np.any(sq_norms <= 0):
        raise NumericError("degenerate basis function with zero L2 norm")
    scale = 1.0 / np.sqrt(sq_norms)
    penalties = vals * scale**2

    order = np.argsort(penalties, kind="stable")
    return SplineBasis(
        raw=raw,
        transform=vecs[:, order],
        scale=scale[order],
        eigenvalues=vals[order],
        penalties=penalties[order],
    )


def build_basis(y, k: int) -> SplineBasis:
    """Basis with k knots equally spaced over the observed response range."""
    y = np.asarray(y, dtype=float)
    lo, hi = float(np.min(y)), float(np.max(y))
    if not hi > lo:
        raise ValueError("response range is degenerate; cannot place knots")
    raw = build_raw_basis(np.linspace(lo, hi, k))
    return diagonalize(raw, compute_penalty_matrix(raw))
