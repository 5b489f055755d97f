"""Synthetic MGLMM data and moment checks against quadrature targets."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np
from scipy.interpolate import CubicSpline

from .families import DEFAULT_TRUNCATION, CmpTruncation, cmp_pmf_table, cmp_variance
from .model import Dataset, Family, ModelError, ModelSpec, NaturalParams, Theta, pack, unpack

BLOCK = 1024
QUAD_NODES = 50
SPLINE_MIN_POINTS = 20000
SPLINE_NODES = 1025
SPLINE_MAX_NODES = 1 << 18
SPLINE_RTOL = 1e-9

# spawn keys for the independent random streams
_COVARIATE_STREAM, _EFFECT_STREAM, _RESPONSE_STREAM, _MIXING_STREAM = 0, 1, 2, 3


class CovariateLaw(str, Enum):
    NORMAL = "normal"
    BINARY = "binary"
    CONSTANT = "constant"

    @classmethod
    def parse(cls, value: "str | CovariateLaw") -> "CovariateLaw":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ModelError(f"unknown covariate law {value!r}") from None


@dataclass(frozen=True)
class SimConfig:
    """Generative setup: model, true natural parameters, sample size, seed.

    ``covariate_law`` is one law for every covariate or a mapping from
    covariate name to law.
    """

    spec: ModelSpec
    truth: NaturalParams
    n: int
    covariate_law: "CovariateLaw | str | Mapping[str, CovariateLaw | str]" = CovariateLaw.NORMAL
    seed: int = 0

    def __post_init__(self):
        if int(self.n) < 2:
            raise ModelError("a simulated dataset needs at least two subjects")
        object.__setattr__(self, "n", int(self.n))
        if isinstance(self.covariate_law, Mapping):
            laws = {k: CovariateLaw.parse(v) for k, v in self.covariate_law.items()}
        else:
            law = CovariateLaw.parse(self.covariate_law)
            laws = {c: law for c in self.spec.covariate_columns}
        missing = set(self.spec.covariate_columns) - set(laws)
        if missing:
            raise ModelError(f"no covariate law for {sorted(missing)}")
        object.__setattr__(self, "covariate_law", laws)
        self.theta  # validates the truth against the model

    @property
    def theta(self) -> Theta:
        return pack(self.truth, self.spec)

    @property
    def effective_truth(self) -> NaturalParams:
        """Truth after the variant's frozen values are applied."""
        return unpack(self.theta)


def _seq(seed: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=key)


def _draw_covariate(law: CovariateLaw, rng: np.random.Generator, n: int) -> np.ndarray:
    if law is CovariateLaw.NORMAL:
        return rng.standard_normal(n)
    if law is CovariateLaw.BINARY:
        return (rng.random(n) < 0.5).astype(float)
    return np.ones(n)


def _draw_cmp(mu: np.ndarray, nu: float, u: np.ndarray, trunc: CmpTruncation) -> np.ndarray:
    table = cmp_pmf_table(mu, np.full(mu.shape, nu), trunc)
    cdf = np.cumsum(table, axis=1)
    # mass lost to truncation (below the series tolerance) goes to the last cell
    y = np.sum(cdf < u[:, None], axis=1)
    return np.minimum(y, table.shape[1] - 1)


def simulate(config: SimConfig, trunc: CmpTruncation = DEFAULT_TRUNCATION) -> Dataset:
    """Draw a dataset from the model in ``config``.

    Randomness comes from one root seed split into independent streams per
    block of subjects and per response, so the result does not depend on how
    the blocks are scheduled.
    """
    spec, n, seed = config.spec, config.n, config.seed
    nat = config.effective_truth
    chol = np.linalg.cholesky(nat.cov)
    names = spec.covariate_columns
    cols = {c: np.empty(n) for c in names}
    Y = np.empty((n, spec.k), dtype=np.int64)
    for blk, start in enumerate(range(0, n, BLOCK)):
        stop = min(start + BLOCK, n)
        m = stop - start
        for ci, c in enumerate(names):
            rng = np.random.default_rng(_seq(seed, _COVARIATE_STREAM, ci, blk))
            cols[c][start:stop] = _draw_covariate(config.covariate_law[c], rng, m)
        z = np.random.default_rng(_seq(seed, _EFFECT_STREAM, blk)).standard_normal((m, spec.k))
        b = z @ chol.T
        for r in range(spec.k):
            rng = np.random.default_rng(_seq(seed, _RESPONSE_STREAM, blk, r))
            beta = nat.beta[r]
            eta = np.full(m, beta[0])
            for j, c in enumerate(spec.covariates[r]):
                eta = eta + beta[j + 1] * cols[c][start:stop]
            mu = np.exp(eta + b[:, r])
            if spec.family is Family.POISSON:
                Y[start:stop, r] = rng.poisson(mu)
            elif spec.family is Family.NB2:
                phi = nat.disp[r]
                # mixing draws get their own stream so a partial block is a prefix of a full one
                mix = np.random.default_rng(_seq(seed, _MIXING_STREAM, blk, r))
                Y[start:stop, r] = rng.poisson(mix.gamma(phi, mu / phi))
            else:
                Y[start:stop, r] = _draw_cmp(mu, nat.disp[r], rng.random(m), trunc)
    return Dataset(spec=spec, subject_id=np.arange(1, n + 1), Y=Y, columns=cols)


# ---------------------------------------------------------------------------
# empirical moment check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimCheck:
    """Sample moments next to their model targets with Monte-Carlo SEs."""

    responses: tuple[str, ...]
    mean: np.ndarray
    mean_target: np.ndarray
    mean_se: np.ndarray
    var: np.ndarray
    var_target: np.ndarray
    var_se: np.ndarray
    cov: np.ndarray
    cov_target: np.ndarray
    cov_se: np.ndarray

    @property
    def di(self) -> np.ndarray:
        return self.var / self.mean

    @property
    def di_target(self) -> np.ndarray:
        return self.var_target / self.mean_target

    def z_scores(self) -> dict[str, np.ndarray]:
        iu = np.triu_indices(len(self.responses), 1)
        return {
            "mean": (self.mean - self.mean_target) / self.mean_se,
            "var": (self.var - self.var_target) / self.var_se,
            "cov": (self.cov[iu] - self.cov_target[iu]) / self.cov_se[iu],
        }

    def ok(self, n_se: float = 3.0) -> bool:
        return all(bool(np.all(np.abs(z) <= n_se)) for z in self.z_scores().values())


def _gh_expectations(eta0: np.ndarray, sd: float, fn) -> np.ndarray:
    """E[fn(exp(eta0 + sd*Z))] for Z ~ N(0,1) by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(QUAD_NODES)
    w = w / np.sqrt(2.0 * np.pi)
    mu = np.exp(eta0[:, None] + sd * x[None, :])
    return fn(mu) @ w


def _cmp_variance_fn(nu: float, trunc: CmpTruncation):
    """Conditional CMP variance as a function of the mean.

    Large batches are served from a cubic spline of log variance over an
    equispaced log-mean grid instead of one rate solve per point.  The grid
    is doubled until the spline matches exact values at the midpoints to
    ``SPLINE_RTOL``; past ``SPLINE_MAX_NODES`` every point is solved exactly.
    """

    def exact(mu: np.ndarray) -> np.ndarray:
        return cmp_variance(mu, np.full(mu.shape, nu), trunc)

    def fn(mu: np.ndarray) -> np.ndarray:
        if mu.size <= SPLINE_MIN_POINTS:
            return exact(mu)
        lm = np.log(mu)
        lo, hi = float(lm.min()), float(lm.max())
        nodes = SPLINE_NODES
        grid = np.linspace(lo, hi, nodes)
        vals = np.log(exact(np.exp(grid)))
        while 2 * nodes - 1 <= min(SPLINE_MAX_NODES, mu.size):
            mid = 0.5 * (grid[1:] + grid[:-1])
            mid_vals = np.log(exact(np.exp(mid)))
            if np.max(np.abs(np.expm1(CubicSpline(grid, vals)(mid) - mid_vals))) <= SPLINE_RTOL:
                return np.exp(CubicSpline(grid, vals)(lm))
            both = np.empty(2 * nodes - 1)
            both[0::2], both[1::2] = vals, mid_vals
            grid, vals, nodes = np.linspace(lo, hi, 2 * nodes - 1), both, 2 * nodes - 1
        return exact(mu)

    return fn


def empirical_check(dataset: Dataset, config: SimConfig, trunc: CmpTruncation = DEFAULT_TRUNCATION) -> SimCheck:
    """Compare marginal means, variances and cross-covariances of ``dataset``
    with targets integrated over the random effects (50-node quadrature),
    averaged over the observed covariates."""
    spec = config.spec
    nat = config.effective_truth
    Sigma = nat.cov
    n, k = dataset.Y.shape
    Y = dataset.Y.astype(float)
    eta0 = np.column_stack([X @ b for X, b in zip(dataset.X, nat.beta)])

    m1 = np.empty((n, k))  # E[Y | x]
    m2 = np.empty((n, k))  # E[Y^2 | x]
    for r in range(k):
        sd = float(np.sqrt(Sigma[r, r]))
        if spec.family is Family.POISSON:
            cvar = lambda mu: mu  # noqa: E731
        elif spec.family is Family.NB2:
            phi = nat.disp[r]
            cvar = lambda mu, phi=phi: mu + mu * mu / phi  # noqa: E731
        else:
            cvar = _cmp_variance_fn(float(nat.disp[r]), trunc)
        # evaluate on distinct linear predictors only
        uniq, inv = np.unique(eta0[:, r], return_inverse=True)
        m1[:, r] = _gh_expectations(uniq, sd, lambda mu: mu)[inv]
        m2[:, r] = _gh_expectations(uniq, sd, lambda mu: cvar(mu) + mu * mu)[inv]
    mean_t = m1.mean(axis=0)
    var_t = m2.mean(axis=0) - mean_t**2

    cov_t = np.diag(var_t)
    for r in range(k):
        for s in range(r + 1, k):
            v = Sigma[r, r] + Sigma[s, s] + 2.0 * Sigma[r, s]
            pair = eta0[:, r] + eta0[:, s]
            uniq, inv = np.unique(pair, return_inverse=True)
            cross = _gh_expectations(uniq, float(np.sqrt(v)), lambda mu: mu)[inv]
            cov_t[r, s] = cov_t[s, r] = cross.mean() - mean_t[r] * mean_t[s]

    mean = Y.mean(axis=0)
    dev = Y - mean
    var = Y.var(axis=0, ddof=1)
    cov = np.cov(Y, rowvar=False, ddof=1).reshape(k, k)
    mean_se = np.sqrt(var / n)
    var_se = np.sqrt(np.maximum(np.mean(dev**4, axis=0) - var**2, 0.0) / n)
    prod = dev[:, :, None] * dev[:, None, :]
    cov_se = prod.std(axis=0, ddof=1) / np.sqrt(n)
    return SimCheck(spec.responses, mean, mean_t, mean_se, var, var_t, var_se, cov, cov_t, cov_se)
