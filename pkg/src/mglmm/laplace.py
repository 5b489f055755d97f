"""Laplace-approximated marginal likelihood of the MGLMM.

For subject ``i`` the log-integrand is::

    Q(b) = sum_r log f(y_r | mu_r = exp(x_r' beta_r + b_r)) + log N(b; 0, Sigma)

and the Laplace approximation of ``log int exp Q(b) db`` is::

    (k/2) log 2 pi - 1/2 log|-Q''(b_hat)| + Q(b_hat)

``b_hat`` is found by a damped Newton iteration run for all subjects at once.
The outer gradient is exact: besides the explicit partial derivatives it
carries the implicit dependence of ``b_hat`` on the parameters through the
log-determinant term (the stationarity condition removes it from ``Q``).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .covariance import LOG_2PI, CovarianceParts, covariance_parts
from .families import (
    DEFAULT_TRUNCATION,
    CmpSolveError,
    CmpTruncation,
    CmpTruncationError,
    loglik_terms,
)
from .model import Dataset, ModelSpec, SubjectBlock, Theta

INNER_TOL = 1e-8
INNER_MAX_ITER = 100
INNER_MAX_HALVINGS = 30
INNER_MAX_STEP = 4.0
MIN_CHUNK = 64

_NUMERIC_ERRORS = (CmpTruncationError, CmpSolveError, FloatingPointError, np.linalg.LinAlgError)


def resolve_threads(threads: int | None) -> int:
    """Thread count: explicit value, else ``MGLMM_THREADS``, else all cores."""
    if threads is None:
        env = os.environ.get("MGLMM_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


# -- row-wise helpers; every output row depends only on the same input row --


def _rowmat(v: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Rows of ``v @ M`` for a shared k x k matrix ``M``."""
    out = v[:, 0:1] * M[0]
    for j in range(1, M.shape[0]):
        out = out + v[:, j : j + 1] * M[j]
    return out


def _batched_matvec(G: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rows of ``G_i @ v_i`` for per-row matrices ``G`` (n, k, k)."""
    out = G[:, :, 0] * v[:, 0:1]
    for j in range(1, G.shape[2]):
        out = out + G[:, :, j] * v[:, j : j + 1]
    return out


def _rowsum(a: np.ndarray) -> np.ndarray:
    return np.cumsum(a, axis=-1)[..., -1]


def linear_predictor(X: tuple[np.ndarray, ...], beta: tuple[np.ndarray, ...]) -> np.ndarray:
    """Fixed part of eta, (N, k), accumulated column by column."""
    n = X[0].shape[0]
    eta = np.empty((n, len(X)))
    for r, (Xr, br) in enumerate(zip(X, beta)):
        acc = Xr[:, 0] * br[0]
        for j in range(1, Xr.shape[1]):
            acc = acc + Xr[:, j] * br[j]
        eta[:, r] = acc
    return eta


@dataclass
class Terms:
    value: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    fisher: np.ndarray

    def take(self, idx) -> "Terms":
        return Terms(self.value[idx], self.d1[idx], self.d2[idx], self.fisher[idx])

    def put(self, idx, other: "Terms") -> None:
        self.value[idx] = other.value
        self.d1[idx] = other.d1
        self.d2[idx] = other.d2
        self.fisher[idx] = other.fisher


def family_terms(spec: ModelSpec, log_disp, trunc: CmpTruncation):
    """``terms_fn`` for the model's conditional family."""
    return lambda y, eta: _terms2(spec, y, eta, log_disp, trunc)


def _terms2(spec, y, eta, log_disp, trunc) -> Terms:
    t = loglik_terms(spec.family, y, eta, log_disp, trunc, order=2)
    shape = np.shape(eta)
    return Terms(
        np.broadcast_to(t.value, shape).copy(),
        np.broadcast_to(t.d1, shape).copy(),
        np.broadcast_to(t.d2, shape).copy(),
        np.broadcast_to(t.fisher, shape).copy(),
    )


@dataclass
class InnerResult:
    b: np.ndarray
    iterations: np.ndarray
    grad_norm: np.ndarray
    converged: np.ndarray


def newton_modes(
    terms_fn,
    y: np.ndarray,
    eta0: np.ndarray,
    sigma_inv: np.ndarray,
    b0: np.ndarray,
    tol: float = INNER_TOL,
    max_iter: int = INNER_MAX_ITER,
    max_halvings: int = INNER_MAX_HALVINGS,
) -> InnerResult:
    """Maximize ``Q(b) = sum_r l(y_r, eta0_r + b_r) - b' Sigma^{-1} b / 2`` for every row.

    ``terms_fn(y, eta)`` returns the per-observation log-likelihood with its
    first two eta-derivatives (a ``Terms``).

    Each accepted step never decreases Q (step halving).  Once a row's
    gradient sup-norm drops below ``tol`` one more undamped Newton step is
    taken, which puts the mode at round-off accuracy so the marginal
    likelihood is a smooth function of the parameters.
    """
    n, k = y.shape
    b = np.array(b0, dtype=float, copy=True)
    iters = np.zeros(n, dtype=np.int64)
    gnorm = np.full(n, np.inf)
    converged = np.zeros(n, dtype=bool)
    eye = np.eye(k, dtype=bool)

    def qval(terms: Terms, bb: np.ndarray) -> np.ndarray:
        return _rowsum(terms.value) - 0.5 * _rowsum(bb * _rowmat(bb, sigma_inv))

    act = np.arange(n)
    terms = terms_fn(y, eta0 + b)
    q = qval(terms, b)
    for it in range(max_iter + 1):
        if not act.size:
            break
        ba = b[act]
        g = terms.d1 - _rowmat(ba, sigma_inv)
        gn = np.max(np.abs(g), axis=1)
        gnorm[act] = gn
        h = np.where(terms.d2 < 0, -terms.d2, terms.fisher)
        H = np.broadcast_to(sigma_inv, (act.size, k, k)).copy()
        H[:, eye] += h
        with np.errstate(all="ignore"):
            step = np.linalg.solve(H, g[:, :, None])[:, :, 0]
        # a random effect rarely moves by more than a few units on the log scale
        big = np.max(np.abs(step), axis=1)
        step *= np.minimum(1.0, INNER_MAX_STEP / np.where(big > 0, big, 1.0))[:, None]
        done = gn < tol
        if np.any(done):
            rows = act[done]
            b[rows] = ba[done] + step[done]
            converged[rows] = True
        keep = ~done & np.all(np.isfinite(step), axis=1)
        if it == max_iter:
            break
        act, ba, step, q = act[keep], ba[keep], step[keep], q[keep]
        terms = terms.take(keep)
        if not act.size:
            break
        iters[act] += 1

        # step halving until Q does not decrease
        alpha = np.ones(act.size)
        accepted = np.zeros(act.size, dtype=bool)
        pend = np.arange(act.size)
        for _ in range(max_halvings + 1):
            trial_b = ba[pend] + alpha[pend, None] * step[pend]
            try:
                with np.errstate(all="ignore"):
                    tt = terms_fn(y[act[pend]], eta0[act[pend]] + trial_b)
                    qt = qval(tt, trial_b)
                good = np.isfinite(qt) & (qt >= q[pend] - 1e-13 * np.maximum(1.0, np.abs(q[pend])))
            except (CmpTruncationError, CmpSolveError):
                good = np.zeros(pend.size, dtype=bool)
            if np.any(good):
                idx = pend[good]
                b[act[idx]] = trial_b[good]
                terms.put(idx, tt.take(good))
                q[idx] = qt[good]
                accepted[idx] = True
            pend = pend[~good]
            if not pend.size:
                break
            alpha[pend] *= 0.5
        act, q = act[accepted], q[accepted]
        terms = terms.take(accepted)
    return InnerResult(b=b, iterations=iters, grad_norm=gnorm, converged=converged)


def laplace_log_integral(terms_fn, y, eta0, sigma: np.ndarray, b0=None) -> tuple[np.ndarray, InnerResult]:
    """Per-row Laplace approximation of ``log int exp Q(b) db`` with
    ``Q(b) = sum_r l(y_r, eta0_r + b_r) + log N(b; 0, Sigma)``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    eta0 = np.atleast_2d(np.asarray(eta0, dtype=float))
    n, k = y.shape
    C = np.linalg.cholesky(sigma)
    ci = np.linalg.solve(C, np.eye(k))
    sinv = ci.T @ ci
    logdet = 2.0 * float(np.sum(np.log(np.diag(C))))
    inner = newton_modes(terms_fn, y, eta0, sinv, np.zeros((n, k)) if b0 is None else np.atleast_2d(b0))
    bh = inner.b
    t = terms_fn(y, eta0 + bh)
    H = np.broadcast_to(sinv, (n, k, k)).copy()
    H[:, np.eye(k, dtype=bool)] -= t.d2
    sign, logdet_h = np.linalg.slogdet(H)
    q = _rowsum(t.value) - 0.5 * _rowsum(bh * _rowmat(bh, sinv)) - 0.5 * logdet - 0.5 * k * LOG_2PI
    L = 0.5 * k * LOG_2PI - 0.5 * logdet_h + q
    return np.where(inner.converged & (sign > 0), L, np.nan), inner


@dataclass
class InnerState:
    """Mode of one subject's log-integrand."""

    b_hat: np.ndarray
    neg_hess: np.ndarray
    inner_iters: int
    grad_norm: float
    converged: bool


class LaplaceObjective:
    """Negative Laplace log-likelihood as a function of the free parameter vector.

    Keeps one warm-start mode per subject across evaluations.  Any numerical
    failure (inner non-convergence, indefinite curvature, series overflow)
    yields ``inf`` so that an outer line search can back off.
    """

    def __init__(
        self,
        data: Dataset,
        spec: ModelSpec | None = None,
        trunc: CmpTruncation = DEFAULT_TRUNCATION,
        threads: int | None = None,
    ):
        self.spec = spec if spec is not None else data.spec
        if self.spec.responses != data.spec.responses:
            raise ValueError("spec and dataset responses differ")
        self.data = data if spec is None else data.with_spec(self.spec)
        self.trunc = trunc
        self.threads = resolve_threads(threads)
        self.layout = self.spec.layout
        self.Y = self.data.Y.astype(float)
        self.X = self.data.X
        self.n, self.k = self.Y.shape
        self.modes = np.zeros((self.n, self.k))
        self.n_evals = 0
        self.last_inner: InnerResult | None = None

    @property
    def n_params(self) -> int:
        return self.layout.n_free

    def reset(self) -> None:
        self.modes[:] = 0.0

    def _chunks(self) -> list[np.ndarray]:
        nchunk = min(self.threads, max(1, self.n // MIN_CHUNK))
        return np.array_split(np.arange(self.n), nchunk)

    def _subject_terms(self, full: np.ndarray, gradient: bool):
        """Per-subject log-likelihood contributions and (optionally) their gradients."""
        theta = Theta(self.spec, full)
        parts = covariance_parts(theta.log_sd, theta.rho_raw)
        eta0 = linear_predictor(self.X, theta.beta)
        log_disp = theta.log_disp if self.spec.family.has_dispersion else None
        chunks = self._chunks()

        def work(rows):
            return self._laplace_rows(rows, eta0[rows], log_disp, parts, theta, gradient)

        if len(chunks) == 1:
            results = [work(chunks[0])]
        else:
            with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
                results = list(ex.map(work, chunks))
        L = np.concatenate([r[0] for r in results])
        G = np.concatenate([r[1] for r in results]) if gradient else None
        inner = InnerResult(
            b=np.concatenate([r[2].b for r in results]),
            iterations=np.concatenate([r[2].iterations for r in results]),
            grad_norm=np.concatenate([r[2].grad_norm for r in results]),
            converged=np.concatenate([r[2].converged for r in results]),
        )
        return L, G, inner

    def _laplace_rows(self, rows, eta0, log_disp, parts: CovarianceParts, theta: Theta, gradient: bool):
        spec, k = self.spec, self.k
        y = self.Y[rows]
        sinv = parts.sigma_inv
        with np.errstate(all="ignore"):
            inner = newton_modes(family_terms(spec, log_disp, self.trunc), y, eta0, sinv, self.modes[rows])
            bh = inner.b
            t = loglik_terms(spec.family, y, eta0 + bh, log_disp, self.trunc, order=3 if gradient else 2)
            d2 = np.broadcast_to(t.d2, y.shape)
            H = np.broadcast_to(sinv, (len(rows), k, k)).copy()
            H[:, np.eye(k, dtype=bool)] -= d2
            sign, logdet_h = np.linalg.slogdet(H)
            L = (
                _rowsum(np.broadcast_to(t.value, y.shape))
                - 0.5 * parts.logdet
                - 0.5 * _rowsum(bh * _rowmat(bh, sinv))
                - 0.5 * logdet_h
            )
        bad = ~inner.converged | (sign <= 0) | ~np.isfinite(L)
        L = np.where(bad, np.nan, L)
        G = None
        if gradient:
            G = self._gradient_rows(rows, y, bh, t, H, parts, theta)
            G[bad] = np.nan
        return L, G, inner

    def _gradient_rows(self, rows, y, bh, t, H, parts: CovarianceParts, theta: Theta) -> np.ndarray:
        lay, k = self.layout, self.k
        n = len(rows)
        shape = y.shape
        d1 = np.broadcast_to(t.d1, shape)
        d2 = np.broadcast_to(t.d2, shape)
        d3 = np.broadcast_to(t.d3, shape)
        with np.errstate(all="ignore"):
            Ginv = np.linalg.inv(H)
            gd = np.diagonal(Ginv, axis1=1, axis2=2)
            u = gd * (-d3)  # G_rr * d(-d2_r)/d eta_r
            w = _batched_matvec(Ginv, u)  # Ginv @ u
            out = np.empty((n, lay.n_full))
            for r, s in enumerate(lay.beta_slices):
                coef = d1[:, r] - 0.5 * u[:, r] - 0.5 * w[:, r] * d2[:, r]
                out[:, s] = self.X[r][rows] * coef[:, None]
            if self.spec.family.has_dispersion:
                dpsi = np.broadcast_to(t.dpsi, shape)
                d1psi = np.broadcast_to(t.d1psi, shape)
                d2psi = np.broadcast_to(t.d2psi, shape)
                out[:, lay.disp_slice] = dpsi + 0.5 * gd * d2psi - 0.5 * w * d1psi
            Gflat = Ginv.reshape(n, k * k)
            cov_cols = list(range(lay.sd_slice.start, lay.sd_slice.stop)) + list(
                range(lay.rho_slice.start, lay.rho_slice.stop)
            )
            for m, col in enumerate(cov_cols):
                dS = parts.d_sigma_inv[m]
                dSb = _rowmat(bh, dS)
                out[:, col] = (
                    -0.5 * parts.d_logdet[m]
                    - 0.5 * _rowsum(bh * dSb)
                    - 0.5 * _rowsum(Gflat * dS.ravel())
                    + 0.5 * _rowsum(w * dSb)
                )
        return out

    def evaluate(self, free: np.ndarray, gradient: bool = True):
        """``(nll, grad)`` at the free vector; ``grad`` is None without ``gradient``."""
        self.n_evals += 1
        full = self.layout.expand(free)
        try:
            L, G, inner = self._subject_terms(full, gradient)
        except _NUMERIC_ERRORS:
            return math.inf, (np.full(self.layout.n_free, np.nan) if gradient else None)
        self.last_inner = inner
        if not np.all(np.isfinite(L)):
            return math.inf, (np.full(self.layout.n_free, np.nan) if gradient else None)
        self.modes[:] = inner.b
        value = -math.fsum(L.tolist())
        if not gradient:
            return value, None
        grad_full = -np.array([math.fsum(col) for col in G.T.tolist()])
        return value, self.layout.reduce_gradient(grad_full)

    def value(self, free: np.ndarray) -> float:
        return self.evaluate(free, gradient=False)[0]

    def value_and_grad(self, free: np.ndarray):
        return self.evaluate(free, gradient=True)

    def subject_logliks(self, free: np.ndarray) -> np.ndarray:
        """Per-subject Laplace log-likelihoods (NaN where a subject failed)."""
        full = self.layout.expand(free)
        L, _, inner = self._subject_terms(full, False)
        self.last_inner = inner
        return L


# ---------------------------------------------------------------------------
# single-subject API
# ---------------------------------------------------------------------------


def _subject_arrays(subject: SubjectBlock, theta: Theta):
    spec = theta.spec
    y = np.asarray(subject.y, dtype=float)[None, :]
    eta0 = np.array([[float(np.dot(x, bb)) for x, bb in zip(subject.x, theta.beta)]])
    log_disp = theta.log_disp if spec.family.has_dispersion else None
    return y, eta0, log_disp


def subject_Q(b, subject: SubjectBlock, theta: Theta, trunc: CmpTruncation = DEFAULT_TRUNCATION) -> float:
    """Log of the integrand for one subject at random effects ``b``."""
    spec = theta.spec
    y, eta0, log_disp = _subject_arrays(subject, theta)
    b = np.asarray(b, dtype=float)
    parts = covariance_parts(theta.log_sd, theta.rho_raw)
    t = loglik_terms(spec.family, y, eta0 + b[None, :], log_disp, trunc, order=0)
    val = float(np.sum(np.broadcast_to(t.value, y.shape)))
    quad = float(b @ parts.sigma_inv @ b)
    return val - 0.5 * spec.k * LOG_2PI - 0.5 * parts.logdet - 0.5 * quad


def subject_Q_derivatives(b, subject: SubjectBlock, theta: Theta, trunc: CmpTruncation = DEFAULT_TRUNCATION):
    """``(Q, dQ/db, d2Q/db2)`` for one subject."""
    spec = theta.spec
    y, eta0, log_disp = _subject_arrays(subject, theta)
    b = np.asarray(b, dtype=float)
    parts = covariance_parts(theta.log_sd, theta.rho_raw)
    t = loglik_terms(spec.family, y, eta0 + b[None, :], log_disp, trunc, order=2)
    shape = y.shape
    value = float(np.sum(np.broadcast_to(t.value, shape)))
    q = value - 0.5 * spec.k * LOG_2PI - 0.5 * parts.logdet - 0.5 * float(b @ parts.sigma_inv @ b)
    grad = np.broadcast_to(t.d1, shape)[0] - parts.sigma_inv @ b
    hess = np.diag(np.broadcast_to(t.d2, shape)[0]) - parts.sigma_inv
    return q, grad, hess


def inner_newton(
    subject: SubjectBlock,
    theta: Theta,
    b0=None,
    trunc: CmpTruncation = DEFAULT_TRUNCATION,
) -> InnerState:
    spec = theta.spec
    y, eta0, log_disp = _subject_arrays(subject, theta)
    parts = covariance_parts(theta.log_sd, theta.rho_raw)
    start = np.zeros((1, spec.k)) if b0 is None else np.asarray(b0, dtype=float)[None, :]
    res = newton_modes(family_terms(spec, log_disp, trunc), y, eta0, parts.sigma_inv, start)
    bh = res.b[0]
    _, _, hess = subject_Q_derivatives(bh, subject, theta, trunc)
    return InnerState(
        b_hat=bh,
        neg_hess=-hess,
        inner_iters=int(res.iterations[0]),
        grad_norm=float(res.grad_norm[0]),
        converged=bool(res.converged[0]),
    )


def laplace_subject_loglik(subject: SubjectBlock, theta: Theta, trunc: CmpTruncation = DEFAULT_TRUNCATION) -> float:
    """Laplace approximation of one subject's log marginal likelihood."""
    state = inner_newton(subject, theta, trunc=trunc)
    if not state.converged:
        return math.nan
    sign, logdet = np.linalg.slogdet(state.neg_hess)
    if sign <= 0:
        return math.nan
    k = theta.spec.k
    return 0.5 * k * LOG_2PI - 0.5 * logdet + subject_Q(state.b_hat, subject, theta, trunc)


def total_nll(
    theta_free,
    data: Dataset,
    spec: ModelSpec | None = None,
    trunc: CmpTruncation = DEFAULT_TRUNCATION,
    gradient: bool = False,
    threads: int | None = 1,
):
    """Negative Laplace log-likelihood summed over subjects (cold start).

    Returns the value, or ``(value, gradient)`` with ``gradient=True``.
    """
    obj = LaplaceObjective(data, spec, trunc=trunc, threads=threads)
    value, grad = obj.evaluate(np.asarray(theta_free, dtype=float), gradient=gradient)
    return (value, grad) if gradient else value
