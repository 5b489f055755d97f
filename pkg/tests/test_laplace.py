from __future__ import annotations

import math

import numpy as np
import pytest

import oracles as O
from conftest import small_truth
from mglmm.covariance import LOG_2PI
from mglmm.families import poisson_logpmf
from mglmm.laplace import (
    LaplaceObjective,
    Terms,
    inner_newton,
    laplace_log_integral,
    laplace_subject_loglik,
    newton_modes,
    subject_Q,
    subject_Q_derivatives,
    total_nll,
)
from mglmm.model import ModelSpec, NaturalParams, Theta, dataset_from_arrays, pack
from mglmm.simulate import SimConfig, simulate


def gaussian_terms(y, eta):
    """Unit-variance normal 'likelihood': Q is exactly quadratic in b."""
    r = y - eta
    return Terms(-0.5 * r * r - 0.5 * LOG_2PI, r, -np.ones_like(r), np.ones_like(r))


def _eta0(data, truth):
    return np.column_stack([X @ b for X, b in zip(data.X, truth.beta)])


# -- subject_Q -------------------------------------------------------------------


def test_subject_Q_at_zero_is_assembly_of_pmfs():
    spec = ModelSpec("poisson", ("a", "b", "c"), (("x",), (), ("x",)))
    theta = Theta.from_free(spec, np.array([0.2, 0.5, -0.3, 0.1, 0.4, 0, 0, 0, 0, 0, 0]))
    data = dataset_from_arrays(spec, np.array([[1, 0, 4], [2, 2, 2]]), {"x": np.array([0.7, -0.2])})
    s = data.subject(0)
    mu = np.exp([0.2 + 0.5 * 0.7, -0.3, 0.1 + 0.4 * 0.7])
    expect = sum(poisson_logpmf(int(y), m) for y, m in zip(s.y, mu)) - 1.5 * math.log(2 * math.pi)
    assert subject_Q(np.zeros(3), s, theta) == pytest.approx(expect, abs=1e-13)


@pytest.mark.parametrize("family, disp", [("poisson", None), ("nb2", 1.8), ("cmp", 2.5)])
def test_subject_Q_k1_matches_scalar_version(family, disp):
    spec = ModelSpec(family, ("y",), (("x",),))
    nat = NaturalParams((np.array([0.3, -0.4]),), None if disp is None else np.array([disp]), np.array([0.7]), np.eye(1))
    theta = pack(nat, spec)
    data = dataset_from_arrays(spec, np.array([[3], [0]]), {"x": np.array([1.3, 0.0])})
    s = data.subject(0)
    for b in (-1.2, 0.0, 0.4, 2.0):
        eta = 0.3 - 0.4 * 1.3 + b
        d = None if disp is None else disp
        scalar = float(O.family_lp(family, 3, math.exp(eta), d)) - 0.5 * math.log(2 * math.pi * 0.49) - b * b / (2 * 0.49)
        assert subject_Q(np.array([b]), s, theta) == pytest.approx(scalar, abs=1e-12)


@pytest.mark.parametrize("family", ["poisson", "nb2"])
def test_Q_is_strictly_concave(family):
    rng = np.random.default_rng(1)
    spec, truth = small_truth(family, sd=0.8, rho=0.6)
    data = simulate(SimConfig(spec, truth, 20, seed=2))
    for i in range(20):
        theta = Theta.from_free(spec, rng.normal(scale=0.7, size=spec.layout.n_free))
        _, _, H = subject_Q_derivatives(rng.normal(size=2) * 2, data.subject(i), theta)
        assert np.all(np.linalg.eigvalsh(-H) > 0)


def test_subject_Q_derivatives_match_finite_differences(family):
    spec, truth = small_truth(family)
    data = simulate(SimConfig(spec, truth, 5, seed=4))
    theta = pack(truth, spec)
    s = data.subject(1)
    b = np.array([0.3, -0.2])
    _, g, H = subject_Q_derivatives(b, s, theta)
    np.testing.assert_allclose(g, O.central_diff(lambda x: subject_Q(x, s, theta), b), rtol=1e-7, atol=1e-9)
    fd = np.array([O.central_diff(lambda x: subject_Q_derivatives(x, s, theta)[1][i], b) for i in range(2)])
    np.testing.assert_allclose(H, fd, rtol=1e-6, atol=1e-8)


# -- inner Newton -------------------------------------------------------------------


def test_gaussian_toy_converges_in_one_iteration_and_laplace_is_exact():
    rng = np.random.default_rng(0)
    k = 3
    A = rng.normal(size=(k, k))
    S = 0.3 * (A @ A.T) + 0.5 * np.eye(k)
    y = rng.normal(size=(6, k))
    eta0 = rng.normal(scale=0.5, size=(6, k))
    L, inner = laplace_log_integral(gaussian_terms, y, eta0, S)
    assert np.all(inner.iterations == 1)
    assert np.all(inner.converged)
    # y ~ N(eta0, I + Sigma)
    exact = O.mvn_logpdf(y - eta0, np.eye(k) + S)
    np.testing.assert_allclose(L, exact, rtol=0, atol=1e-12)


def test_poisson_mode_matches_grid_search():
    spec = ModelSpec("poisson", ("a", "b"), ((), ()))
    nat = NaturalParams((np.array([0.4]), np.array([-0.2])), None, np.array([0.6, 0.9]), np.array([[1, 0.5], [0.5, 1]]))
    theta = pack(nat, spec)
    data = dataset_from_arrays(spec, np.array([[4, 0], [1, 1]]))
    state = inner_newton(data.subject(0), theta)
    assert state.converged and state.grad_norm < 1e-8
    grid = O.grid_mode(np.array([4.0, 0.0]), np.array([0.4, -0.2]), "poisson", None, nat.cov)
    np.testing.assert_allclose(state.b_hat, grid, atol=1e-6)
    assert np.all(np.linalg.eigvalsh(state.neg_hess) > 0)


def test_warm_start_needs_fewer_iterations():
    spec, truth = small_truth("cmp", sd=0.6)
    data = simulate(SimConfig(spec, truth, 200, seed=3))
    x = pack(truth, spec).free
    warm = LaplaceObjective(data, threads=1)
    warm.value(x)
    x2 = x + 0.01
    v_warm = warm.value(x2)
    it_warm = int(warm.last_inner.iterations.sum())
    cold = LaplaceObjective(data, threads=1)
    v_cold = cold.value(x2)
    it_cold = int(cold.last_inner.iterations.sum())
    assert it_warm < it_cold
    assert v_warm == pytest.approx(v_cold, abs=1e-9)


def test_newton_respects_iteration_budget():
    y = np.array([[50.0]])
    res = newton_modes(gaussian_terms, y, np.zeros((1, 1)), np.eye(1), np.zeros((1, 1)), max_iter=0)
    assert not res.converged[0]


# -- Laplace vs quadrature ------------------------------------------------------------------


def _k1_errors(sd, counts=(3, 0, 7, 1)):
    spec = ModelSpec("poisson", ("y",), ((),))
    nat = NaturalParams((np.array([0.5]),), None, np.array([sd]), np.eye(1))
    theta = pack(nat, spec)
    data = dataset_from_arrays(spec, np.array([[c] for c in counts]))
    out = []
    for i in range(len(counts)):
        la = laplace_subject_loglik(data.subject(i), theta)
        aq = O.aghq_subject(data.Y[i], np.array([0.5]), "poisson", None, nat.cov, nodes=40)
        out.append(abs(la - aq) / abs(aq))
    return np.array(out)


def test_k1_poisson_lognormal_vs_40_node_aghq():
    assert np.all(_k1_errors(0.1) < 1e-4)


def test_k1_laplace_error_shrinks_with_random_effect_sd():
    errs = [_k1_errors(sd).max() for sd in (0.5, 0.3, 0.2, 0.1)]
    assert np.all(np.diff(errs) < 0)
    assert errs[0] < 5e-3


def test_k2_poisson_vs_30x30_aghq():
    spec, truth = small_truth("poisson", sd=0.3, rho=0.5)
    data = simulate(SimConfig(spec, truth, 10, seed=8))
    theta = pack(truth, spec)
    eta0 = _eta0(data, truth)
    for i in range(10):
        la = laplace_subject_loglik(data.subject(i), theta)
        aq = O.aghq_subject(data.Y[i], eta0[i], "poisson", None, truth.cov, nodes=30)
        assert abs(la - aq) / abs(aq) < 1e-3


@pytest.mark.parametrize("k", [1, 2])
def test_total_loglik_vs_quadrature(family, k):
    # random-effect SD as in the acceptance setting
    if k == 1:
        spec = ModelSpec(family, ("a",), (("x",),))
        truth = NaturalParams((np.array([0.5, 0.3]),), None if family == "poisson" else np.array([2.0]),
                              np.array([0.3]), np.eye(1))
    else:
        spec, truth = small_truth(family, sd=0.3)
    data = simulate(SimConfig(spec, truth, 25, seed=21))
    la = -total_nll(pack(truth, spec).free, data)
    disp = None if truth.disp is None else truth.disp
    aq = O.aghq_loglik(data.Y, _eta0(data, truth), family, disp, truth.cov, nodes=20)
    assert abs(la - aq) / abs(aq) < 1e-3


# -- total_nll ------------------------------------------------------------------------


def test_identical_copies_scale_exactly(family):
    spec = ModelSpec(family, ("a", "b"), ((), ()))
    disp = None if family == "poisson" else np.array([2.0, 3.0])
    theta = pack(NaturalParams((np.array([0.4]), np.array([0.1])), disp, np.array([0.5, 0.3]),
                               np.array([[1, 0.4], [0.4, 1]])), spec)
    n = 37
    data = dataset_from_arrays(spec, np.tile([[3, 1]], (n, 1)))
    L = LaplaceObjective(data, threads=1).subject_logliks(theta.free)
    assert np.all(L == L[0])
    assert total_nll(theta.free, data) == -(n * L[0])
    assert L[0] == pytest.approx(laplace_subject_loglik(data.subject(0), theta), abs=1e-12)


def test_rho_zero_equals_sum_of_univariate_objectives(family):
    spec, truth = small_truth(family, rho=0.0)
    spec = spec.replace(variant="rho_zero")
    data = simulate(SimConfig(spec, truth, 80, seed=5))
    theta = pack(truth, spec)
    joint = total_nll(theta.free, data)
    parts = 0.0
    for r, name in enumerate(spec.responses):
        uspec = ModelSpec(family, (name,), (spec.covariates[r],))
        udata = dataset_from_arrays(uspec, data.Y[:, [r]], data.columns)
        unat = NaturalParams((truth.beta[r],), None if truth.disp is None else truth.disp[[r]], truth.sd[[r]], np.eye(1))
        parts += total_nll(pack(unat, uspec).free, udata)
    assert joint == pytest.approx(parts, abs=1e-9)


def test_permuted_subjects_give_identical_value(family):
    spec, truth = small_truth(family)
    data = simulate(SimConfig(spec, truth, 150, seed=6))
    x = pack(truth, spec).free
    perm = np.random.default_rng(0).permutation(data.n)
    a, ga = total_nll(x, data, gradient=True)
    b, gb = total_nll(x, data.subset(perm), gradient=True)
    assert a == b
    assert np.array_equal(ga, gb)


def test_thread_count_does_not_change_results(family):
    spec, truth = small_truth(family)
    data = simulate(SimConfig(spec, truth, 400, seed=7))
    x = pack(truth, spec).free + 0.05
    one = total_nll(x, data, gradient=True, threads=1)
    four = total_nll(x, data, gradient=True, threads=4)
    assert one[0] == four[0]
    assert np.array_equal(one[1], four[1])


def test_inner_modes_are_stationary(small_data):
    data, cfg = small_data
    obj = LaplaceObjective(data, threads=1)
    obj.value(cfg.theta.free)
    assert np.all(obj.last_inner.converged)
    assert np.max(obj.last_inner.grad_norm) < 1e-8
    spec = cfg.spec
    for i in range(0, data.n, 7):
        _, g, _ = subject_Q_derivatives(obj.modes[i], data.subject(i), cfg.theta)
        assert np.max(np.abs(g)) < 1e-8


def test_numerical_failure_yields_non_finite():
    spec = ModelSpec("cmp", ("y",), ((),))
    data = dataset_from_arrays(spec, np.array([[3], [5], [1]]))
    # a tiny nu with a huge mean needs far more series terms than allowed
    x = np.array([12.0, math.log(0.005), math.log(0.5)])
    value, grad = total_nll(x, data, gradient=True)
    assert value == math.inf
    assert np.all(np.isnan(grad))
