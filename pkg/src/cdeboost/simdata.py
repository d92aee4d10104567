"""Seeded synthetic benchmarks with closed-form conditional distributions.

Every generator draws covariates uniformly on [-1, 1]^d and the response
from a known conditional law, so test code can score fits against exact
densities, CDFs and quantiles.  Covariate and noise draws come from
separate child streams of one seed sequence, keeping them independent and
byte-reproducible.

Kinds
-----
``lgd``
    Gaussian with mean 0.5*x1 + x1*x2 and sd 0.5 + 0.25*x2.
``lggmd``
    Mean 0.25*x1 everywhere.  For x2 <= 0.2 an equal mixture of two
    Gaussians at mean -/+ 0.5 with variances 0.25*(0.25*x3 + 0.5)^2 and
    0.25*(0.25*x3 - 0.5)^2; for x2 > 0.2 a single Gaussian with variance
    0.3.
``tree``
    Three regions cut at x1 = -0.2 and x2 = 0 with region densities from a
    palette chosen by ``variant``: Gaussians of variance {0.25, 1, 4}
    ("variance"), mixtures with 1/2/3 components ("modality"), or Beta laws
    of skewness {-0.8, 0, 0.8} with alpha + beta = 10 ("skewness").  The
    mixture-component and Beta shape constants are package choices; only
    the variances and skewness targets are pinned.
``hetero``
    y = x1 + 0.5 * x2 * eps with standard normal eps.
``centering``
    y = 3*x1 + w*z1 + (1 - w)*z2 with w ~ Bernoulli(1/2) and z1, z2 normal
    at -/+ 0.5 with variance 0.06: a location-shifted bimodal mixture.
``ctest``
    Two regions cut at x1 = 0 whose densities differ in variance, modality
    or skewness per ``variant``; built for split-diagnostic experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

_DEFAULT_DIM = {
    "lgd": 20,
    "lggmd": 20,
    "tree": 10,
    "hetero": 10,
    "centering": 10,
    "ctest": 5,
}
_MIN_DIM = {"lgd": 2, "lggmd": 3, "tree": 2, "hetero": 2, "centering": 1, "ctest": 1}

_SQRT_03 = math.sqrt(0.3)

# Mixture palette for the "modality" variants (package choice, see module doc).
_MODALITY_PALETTE = (
    ((1.0,), (0.0,), (1.0,)),
    ((0.5, 0.5), (-1.5, 1.5), (0.5, 0.5)),
    ((1 / 3, 1 / 3, 1 / 3), (-2.0, 0.0, 2.0), (0.45, 0.45, 0.45)),
)


def beta_shapes_for_skewness(skew, total=10.0):
    """Solve the Beta(alpha, beta) shapes with alpha + beta fixed and given skewness."""
    if skew == 0.0:
        t = 0.0
    else:
        t = (skew * (total + 2.0) * total / 2.0) / math.sqrt(
            16.0 * (total + 1.0) + skew**2 * (total + 2.0) ** 2
        )
    return total / 2.0 - t, total / 2.0 + t


_BETA_SKEW = {s: beta_shapes_for_skewness(s) for s in (-0.8, 0.0, 0.8)}


@dataclass(frozen=True)
class SimSpec:
    kind: str
    n: int
    d: int | None = None
    seed: int = 0
    variant: str = "variance"

    def __post_init__(self):
        if self.kind not in _DEFAULT_DIM:
            raise ValueError(f"unknown simulation kind {self.kind!r}")
        if self.variant not in ("variance", "modality", "skewness"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n < 1:
            raise ValueError("need n >= 1")
        d = self.dim
        if d < _MIN_DIM[self.kind]:
            raise ValueError(f"kind {self.kind!r} needs at least {_MIN_DIM[self.kind]} covariates")

    @property
    def dim(self) -> int:
        return _DEFAULT_DIM[self.kind] if self.d is None else self.d

    def to_dict(self):
        return {
            "kind": self.kind,
            "n": self.n,
            "d": self.dim,
            "seed": self.seed,
            "variant": self.variant,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            n=int(d["n"]),
            d=int(d["d"]) if d.get("d") is not None else None,
            seed=int(d.get("seed", 0)),
            variant=d.get("variant", "variance"),
        )


class _Mixture:
    """Finite Gaussian or Beta mixture with closed-form density and CDF."""

    def __init__(self, weights, components):
        self.weights = np.asarray(weights, dtype=float)
        self.components = components

    def density(self, y):
        y = np.asarray(y, dtype=float)
        return sum(w * c.pdf(y) for w, c in zip(self.weights, self.components))

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        return sum(w * c.cdf(y) for w, c in zip(self.weights, self.components))

    def quantile(self, u):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if len(self.components) == 1:
            return self.components[0].ppf(u)
        los = min(c.ppf(1e-12) for c in self.components)
        his = max(c.ppf(1.0 - 1e-12) for c in self.components)
        out = np.empty(u.shape[0])
        for i, ui in enumerate(u):
            out[i] = optimize.brentq(lambda t: self.cdf(t) - ui, los, his, xtol=1e-12)
        return out

    def sample(self, m, rng):
        which = rng.choice(len(self.components), size=m, p=self.weights)
        out = np.empty(m)
        for j, comp in enumerate(self.components):
            mask = which == j
            if np.any(mask):
                out[mask] = comp.rvs(size=int(mask.sum()), random_state=rng)
        return out

    def mean(self):
        return float(sum(w * c.mean() for w, c in zip(self.weights, self.components)))

    def var(self):
        m = self.mean()
        second = sum(w * (c.var() + c.mean() ** 2) for w, c in zip(self.weights, self.components))
        return float(second - m * m)


def _gaussian(mu, sd):
    return _Mixture([1.0], [stats.norm(loc=mu, scale=sd)])


def _tree_palette(variant):
    if variant == "variance":
        return [_gaussian(0.0, math.sqrt(v)) for v in (0.25, 1.0, 4.0)]
    if variant == "modality":
        return [
            _Mixture(w, [stats.norm(loc=m, scale=s) for m, s in zip(mus, sds)])
            for w, mus, sds in _MODALITY_PALETTE
        ]
    shapes = [_BETA_SKEW[s] for s in (-0.8, 0.0, 0.8)]
    return [_Mixture([1.0], [stats.beta(a, b)]) for a, b in shapes]


def _ctest_pair(variant):
    palette = _tree_palette(variant)
    if variant == "variance":
        return palette[0], palette[1]
    if variant == "modality":
        return palette[0], palette[1]
    return palette[0], palette[2]


def conditional_law(spec: SimSpec, x) -> _Mixture:
    """Exact conditional distribution of the response at one covariate vector."""
    x = np.asarray(x, dtype=float)
    kind = spec.kind
    if kind == "lgd":
        mu = 0.5 * x[0] + x[0] * x[1]
        sd = 0.5 + 0.25 * x[1]
        return _gaussian(mu, sd)
    if kind == "lggmd":
        mu = 0.25 * x[0]
        if x[1] <= 0.2:
            sd_plus = 0.5 * abs(0.25 * x[2] + 0.5)
            sd_minus = 0.5 * abs(0.25 * x[2] - 0.5)
            return _Mixture(
                [0.5, 0.5],
                [stats.norm(loc=mu - 0.5, scale=sd_plus), stats.norm(loc=mu + 0.5, scale=sd_minus)],
            )
        return _gaussian(mu, _SQRT_03)
    if kind == "tree":
        palette = _tree_palette(spec.variant)
        if x[0] < -0.2:
            return palette[0]
        return palette[1] if x[1] >= 0 else palette[2]
    if kind == "hetero":
        sd = abs(0.5 * x[1])
        if sd == 0.0:
            raise ValueError("degenerate conditional law at x2 = 0")
        return _gaussian(x[0], sd)
    if kind == "centering":
        sd = math.sqrt(0.06)
        mu = 3.0 * x[0]
        return _Mixture(
            [0.5, 0.5],
            [stats.norm(loc=mu - 0.5, scale=sd), stats.norm(loc=mu + 0.5, scale=sd)],
        )
    # ctest
    left, right = _ctest_pair(spec.variant)
    return left if x[0] <= 0 else right


def _response_streams(spec: SimSpec):
    ss = np.random.SeedSequence(spec.seed)
    child_x, child_y = ss.spawn(2)
    return np.random.default_rng(child_x), np.random.default_rng(child_y)


def generate(spec: SimSpec):
    """Draw (X, y) for the spec; reproducible bytes under a fixed seed."""
    rng_x, rng_y = _response_streams(spec)
    d = spec.dim
    X = rng_x.uniform(-1.0, 1.0, size=(spec.n, d))
    y = sample_conditional_rows(spec, X, rng_y)
    return X, y


def sample_conditional_rows(spec: SimSpec, X, rng):
    """Sample one response per covariate row using the given noise stream."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    kind = spec.kind
    if kind == "lgd":
        eps = rng.standard_normal(n)
        return 0.5 * X[:, 0] + X[:, 0] * X[:, 1] + (0.5 + 0.25 * X[:, 1]) * eps
    if kind == "hetero":
        eps = rng.standard_normal(n)
        return X[:, 0] + 0.5 * X[:, 1] * eps
    if kind == "lggmd":
        mu = 0.25 * X[:, 0]
        eps = rng.standard_normal(n)
        w = rng.random(n) < 0.5
        mix = X[:, 1] <= 0.2
        sd_plus = 0.5 * np.abs(0.25 * X[:, 2] + 0.5)
        sd_minus = 0.5 * np.abs(0.25 * X[:, 2] - 0.5)
        y = np.where(
            w, mu - 0.5 + sd_plus * eps, mu + 0.5 + sd_minus * eps
        )
        return np.where(mix, y, mu + _SQRT_03 * eps)
    if kind == "centering":
        sd = math.sqrt(0.06)
        w = rng.random(n) < 0.5
        z = rng.standard_normal(n)
        centers = np.where(w, -0.5, 0.5)
        return 3.0 * X[:, 0] + centers + sd * z
    # tree / ctest: group rows by region, then draw from each region's mixture
    if kind == "tree":
        palette = _tree_palette(spec.variant)
        region = np.where(X[:, 0] < -0.2, 0, np.where(X[:, 1] >= 0, 1, 2))
    else:  # ctest
        palette = list(_ctest_pair(spec.variant))
        region = (X[:, 0] > 0).astype(int)
    y = np.empty(n)
    for r, law in enumerate(palette):
        mask = region == r
        if np.any(mask):
            y[mask] = law.sample(int(mask.sum()), rng)
    return y


def oracle_density(spec: SimSpec, x, y):
    """Exact conditional density at covariates x, evaluated at y (vectorized in y)."""
    return conditional_law(spec, x).density(y)


def oracle_cdf(spec: SimSpec, x, y):
    return conditional_law(spec, x).cdf(y)


def oracle_quantile(spec: SimSpec, x, levels):
    return conditional_law(spec, x).quantile(levels)


def oracle_loglik(spec: SimSpec, X, y) -> float:
    """Mean log true conditional density over a test set."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    total = 0.0
    for i in range(X.shape[0]):
        total += math.log(float(oracle_density(spec, X[i], y[i])))
    return total / X.shape[0]
