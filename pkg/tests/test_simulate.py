from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate, stats

import oracles as O
from conftest import corr2, small_truth
from mglmm.dispersion import di
from mglmm.model import ModelError, ModelSpec, NaturalParams
from mglmm.simulate import BLOCK, SimConfig, _cmp_variance_fn, _gh_expectations, empirical_check, simulate

TINY = 1e-6  # "sigma -> 0"


def intercept_only(family, beta0, sd=TINY, disp=None, k=1, corr=None):
    names = tuple(f"y{r}" for r in range(k))
    spec = ModelSpec(family, names, tuple(() for _ in range(k)))
    truth = NaturalParams(
        tuple(np.array([beta0]) for _ in range(k)),
        None if disp is None else np.full(k, disp),
        np.full(k, sd),
        np.eye(k) if corr is None else corr,
    )
    return spec, truth


def test_poisson_mean_with_vanishing_effect():
    spec, truth = intercept_only("poisson", math.log(2.0))
    d = simulate(SimConfig(spec, truth, 10**6, seed=0))
    assert d.Y.mean() == pytest.approx(2.0, abs=0.01)


def test_same_seed_is_bitwise_identical():
    spec, truth = small_truth("cmp")
    a = simulate(SimConfig(spec, truth, 2500, seed=7))
    b = simulate(SimConfig(spec, truth, 2500, seed=7))
    assert a.equals(b)
    c = simulate(SimConfig(spec, truth, 2500, seed=8))
    assert not a.equals(c)


def test_blocks_make_prefixes_stable():
    # each block of subjects has its own streams: a longer run extends a shorter one
    spec, truth = small_truth("nb2")
    short = simulate(SimConfig(spec, truth, BLOCK + 10, seed=3))
    long = simulate(SimConfig(spec, truth, 3 * BLOCK, seed=3))
    assert long.subset(np.arange(BLOCK + 10)).equals(short)


def test_cmp_nu_two_is_underdispersed():
    spec, truth = intercept_only("cmp", math.log(3.0), disp=2.0)
    d = simulate(SimConfig(spec, truth, 10**6, seed=1))
    assert di(d.Y[:, 0]) < 1.0
    assert d.Y.mean() == pytest.approx(3.0, abs=0.01)


def test_nb2_variance_matches_gamma_poisson_mixture():
    spec, truth = intercept_only("nb2", math.log(2.0), disp=1.5)
    y = simulate(SimConfig(spec, truth, 4 * 10**5, seed=2)).Y[:, 0]
    assert y.var() == pytest.approx(2.0 + 4.0 / 1.5, rel=0.02)


@pytest.mark.parametrize("mu, nu", [(1.5, 3.0), (4.0, 0.5)])
def test_cmp_sampler_matches_pmf(mu, nu):
    spec, truth = intercept_only("cmp", math.log(mu), disp=nu)
    y = simulate(SimConfig(spec, truth, 10**6, seed=4)).Y[:, 0]
    n = y.size
    # exact binomial test at the two-sided level of a 4-SE band; identical to
    # the 4-SE rule for well-filled bins and still valid when n p << 1
    level = 2 * stats.norm.sf(4.0)
    for j in range(16):
        p = float(math.exp(O.cmp_lp(j, mu, nu)))
        count = int(np.sum(y == j))
        if n * p >= 25:
            assert abs(count / n - p) <= 4 * math.sqrt(p * (1 - p) / n), j
        assert stats.binomtest(count, n, p).pvalue >= level, j


def test_covariate_laws():
    spec = ModelSpec("poisson", ("a", "b"), (("x", "z"), ("w",)))
    truth = NaturalParams((np.zeros(3), np.zeros(2)), None, np.array([0.1, 0.1]), np.eye(2))
    d = simulate(SimConfig(spec, truth, 20000, {"x": "normal", "z": "binary", "w": "normal"}, seed=5))
    assert set(np.unique(d.columns["z"])) == {0.0, 1.0}
    assert d.columns["z"].mean() == pytest.approx(0.5, abs=0.02)
    assert d.columns["x"].std() == pytest.approx(1.0, abs=0.02)
    with pytest.raises(ModelError):
        SimConfig(spec, truth, 10, {"x": "normal"})
    with pytest.raises(ModelError):
        SimConfig(spec, truth, 10, "uniform")
    with pytest.raises(ModelError):
        SimConfig(spec, truth, 1)


def test_variant_truth_is_applied():
    spec, truth = small_truth("poisson", rho=0.9)
    cfg = SimConfig(spec.replace(variant="rho_zero"), truth, 50)
    assert cfg.effective_truth.corr[0, 1] == 0.0


def test_quadrature_targets_against_adaptive_integration():
    # lognormal mixing moments: E mu = exp(b0 + s^2/2), E mu^2 = exp(2 b0 + 2 s^2)
    b0, sd = 0.4, 0.8
    got = _gh_expectations(np.array([b0]), sd, lambda mu: mu)[0]
    assert got == pytest.approx(math.exp(b0 + sd * sd / 2), rel=1e-12)
    f = lambda z: np.exp(2 * (b0 + sd * z) - z * z / 2) / math.sqrt(2 * math.pi)  # noqa: E731
    ref, _ = integrate.quad(f, -40, 40, epsabs=0, epsrel=1e-13, limit=200)
    assert ref == pytest.approx(math.exp(2 * b0 + 2 * sd * sd), rel=1e-12)
    got2 = _gh_expectations(np.array([b0]), sd, lambda mu: mu * mu)[0]
    assert got2 == pytest.approx(ref, rel=1e-10)


def test_poisson_marginal_mean_lognormal_moment():
    spec, truth = intercept_only("poisson", 0.3, sd=0.6)
    cfg = SimConfig(spec, truth, 200000, seed=6)
    chk = empirical_check(simulate(cfg), cfg)
    assert chk.mean_target[0] == pytest.approx(math.exp(0.3 + 0.18), rel=1e-12)
    assert abs(chk.z_scores()["mean"][0]) < 3
    assert chk.ok()


@pytest.mark.parametrize("family", ["nb2", "cmp"])
def test_empirical_check_with_covariates(family):
    spec, truth = small_truth(family, sd=0.4, rho=0.3)
    cfg = SimConfig(spec, truth, 100000, seed=7)
    chk = empirical_check(simulate(cfg), cfg)
    assert chk.ok()


def test_rho_zero_cross_covariance_vanishes():
    spec, truth = intercept_only("poisson", 0.5, sd=0.5, k=3)
    cfg = SimConfig(spec.replace(variant="rho_zero"), truth, 100000, seed=8)
    chk = empirical_check(simulate(cfg), cfg)
    iu = np.triu_indices(3, 1)
    assert np.all(np.abs(chk.cov_target[iu]) < 1e-9)
    assert np.all(np.abs(chk.cov[iu]) <= 3 * chk.cov_se[iu])


def test_strong_correlation_gives_positive_covariance():
    spec, truth = intercept_only("poisson", 0.5, sd=0.7, k=2, corr=corr2(0.9))
    cfg = SimConfig(spec, truth, 20000, seed=9)
    chk = empirical_check(simulate(cfg), cfg)
    assert chk.cov[0, 1] > 0 and chk.cov_target[0, 1] > 0
    assert chk.ok()
    assert np.all(chk.di > 1)


@pytest.mark.parametrize("nu", [0.3, 3.0, 20.0])
def test_cmp_variance_spline_matches_exact(nu):
    from mglmm.families import DEFAULT_TRUNCATION, cmp_variance

    mu = np.exp(np.random.default_rng(0).uniform(-3, 3, 40000))
    got = _cmp_variance_fn(nu, DEFAULT_TRUNCATION)(mu)
    want = cmp_variance(mu[:4000], np.full(4000, nu))
    np.testing.assert_allclose(got[:4000], want, rtol=1e-8)
