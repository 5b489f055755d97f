"""Conditional count distributions: Poisson, NB2 and mean-parametrized COM-Poisson.

Besides the scalar log-pmf functions the module provides ``loglik_terms``,
which evaluates the log-pmf together with its derivatives w.r.t. the linear
predictor ``eta = log(mu)`` and the log-dispersion ``psi``.  These drive the
inner Newton iterations and the exact outer gradient of the Laplace
likelihood.

COM-Poisson
-----------
``P(Y=j) = lambda^j / (j!)^nu / Z(lambda, nu)``.  Under the mean
parametrization ``lambda`` is the root of ``E[Y] = mu``.  Writing
``a = log(lambda)``, ``log Z`` is the cumulant function of the sufficient
statistics ``(Y, -log Y!)``, so every derivative needed below is a joint
cumulant of those two statistics under the (truncated) pmf.

All series are evaluated on a grid of terms scaled by their row maximum and
reduced with sequential cumulative sums: a row's result does not depend on
which other rows share the call, which keeps parallel evaluation bitwise
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .model import Family


class CmpTruncationError(ArithmeticError):
    """The COM-Poisson series did not converge within ``max_terms``."""


class CmpSolveError(ArithmeticError):
    """The mean-parametrization rate solve did not converge."""


@dataclass(frozen=True)
class CmpTruncation:
    rel_tol: float = 1e-15
    max_terms: int = 10000

    def __post_init__(self):
        if not 0.0 < self.rel_tol < 1.0:
            raise ValueError("rel_tol must lie in (0, 1)")
        if self.max_terms < 10:
            raise ValueError("max_terms must be at least 10")


DEFAULT_TRUNCATION = CmpTruncation()

_LOGFACT = gammaln(np.arange(1024, dtype=float) + 1.0)


def _logfact(n: int) -> np.ndarray:
    global _LOGFACT
    if n > _LOGFACT.size:
        _LOGFACT = gammaln(np.arange(max(n, 2 * _LOGFACT.size), dtype=float) + 1.0)
    return _LOGFACT[:n]


def _check_counts(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if np.any(~np.isfinite(y)) or np.any(y < 0) or np.any(y != np.floor(y)):
        raise ValueError("counts must be finite non-negative integers")
    return y


def _check_positive(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)) or np.any(~np.isfinite(x)):
        raise ValueError(f"{name} must be finite and positive")
    return x


def _scalar_or_array(x: np.ndarray):
    return float(x) if np.ndim(x) == 0 else x


def _rowsum(a: np.ndarray) -> np.ndarray:
    # sequential (order-fixed) reduction along the last axis
    return np.cumsum(a, axis=-1)[..., -1]


# ---------------------------------------------------------------------------
# Poisson / NB2
# ---------------------------------------------------------------------------


def poisson_logpmf(y, mu):
    """``-mu + y log(mu) - log(y!)``."""
    y = _check_counts(y)
    mu = _check_positive(mu, "mu")
    return _scalar_or_array(-mu + y * np.log(mu) - gammaln(y + 1.0))


def _nb_series(y: np.ndarray, mu: np.ndarray, phi: np.ndarray, with_inv: bool):
    """Sums over j < y of log((phi+j)/(phi+mu)) and of 1/(phi+j)."""
    s_log = np.zeros(np.broadcast(y, mu, phi).shape)
    s_inv = np.zeros_like(s_log) if with_inv else None
    ymax = int(np.max(y)) if np.size(y) else 0
    small = phi < mu
    lpm = np.log(phi + mu)
    for j in range(ymax):
        live = y > j
        term = np.where(small, np.log(phi + j) - lpm, np.log1p((j - mu) / (phi + mu)))
        s_log += np.where(live, term, 0.0)
        if with_inv:
            s_inv += np.where(live, 1.0 / (phi + j), 0.0)
    return s_log, s_inv


def nb2_logpmf(y, mu, phi):
    """NB2 log-pmf with mean ``mu`` and variance ``mu + mu**2 / phi``."""
    y = _check_counts(y)
    mu = _check_positive(mu, "mu")
    phi = _check_positive(phi, "phi")
    y, mu, phi = np.broadcast_arrays(y, mu, phi)
    s_log, _ = _nb_series(y, mu, phi, False)
    # log Gamma(y+phi)/Gamma(phi) - y log(phi+mu) == s_log
    out = s_log + y * np.log(mu) - gammaln(y + 1.0) - phi * np.log1p(mu / phi)
    return _scalar_or_array(out)


# ---------------------------------------------------------------------------
# COM-Poisson series
# ---------------------------------------------------------------------------


CHUNK_CELLS = 1 << 20  # rows x terms evaluated at once


def _initial_width(a: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Per-row starting grid width: a power of two covering the bulk of the mass."""
    mode = np.exp(np.clip(a / nu, -50.0, 12.0))
    spread = np.sqrt(mode / nu + 1.0)
    need = np.maximum(mode + 12.0 * spread + 16.0, 32.0)
    return (2 ** np.ceil(np.log2(need))).astype(np.int64)


def _window_groups(a: np.ndarray, nu: np.ndarray, trunc: CmpTruncation):
    """Scaled series terms, yielded as ``(rows, log_scale, w, last)`` groups.

    ``w[i, j] = exp(a_i j - nu_i log j! - log_scale_i)`` for ``j <= last[i]``
    and zero beyond.  The window closes at the first ``j >= 2`` whose term
    falls below ``rel_tol`` times the running sum (so at least two terms are
    always kept).  Each row's grid depends only on that row, so results do not
    depend on how rows are batched.
    """
    cap = trunc.max_terms + 1
    widths = np.minimum(_initial_width(a, nu), cap) if a.size else np.zeros(0, np.int64)
    queue = [(J, np.flatnonzero(widths == J)) for J in np.unique(widths)]
    while queue:
        J, rows_all = queue.pop(0)
        J = int(J)
        step = max(1, CHUNK_CELLS // J)
        retry = []
        for c0 in range(0, rows_all.size, step):
            todo = rows_all[c0 : c0 + step]
            lt = a[todo, None] * np.arange(J, dtype=float) - nu[todo, None] * _logfact(J)
            mx = lt.max(axis=1)
            w = np.exp(lt - mx[:, None])
            cs = np.cumsum(w, axis=1)
            stop = w[:, 2:] < trunc.rel_tol * cs[:, 1:-1]
            found = stop.any(axis=1)
            if np.any(found):
                idx = stop[found].argmax(axis=1) + 1
                wf = w[found]
                wf[np.arange(J)[None, :] > idx[:, None]] = 0.0
                yield todo[found], mx[found], wf, idx
            retry.append(todo[~found])
        retry = np.concatenate(retry) if retry else np.zeros(0, np.int64)
        if retry.size:
            if J >= cap:
                raise CmpTruncationError(
                    f"COM-Poisson series needs more than {trunc.max_terms} terms "
                    f"(lambda={np.exp(a[retry[0]]):.4g}, nu={nu[retry[0]]:.4g})"
                )
            queue.append((min(2 * J, cap), retry))


def _window(a: np.ndarray, nu: np.ndarray, trunc: CmpTruncation):
    """All groups of ``_window_groups`` assembled into one zero-padded array."""
    n = a.shape[0]
    log_scale = np.empty(n)
    last = np.empty(n, dtype=np.int64)
    pieces = list(_window_groups(a, nu, trunc))
    Jmax = max((p[2].shape[1] for p in pieces), default=3)
    w_all = np.zeros((n, Jmax))
    for rows, mx, wf, idx in pieces:
        log_scale[rows] = mx
        last[rows] = idx
        w_all[rows, : wf.shape[1]] = wf
    return log_scale, w_all, last


def cmp_log_normconst(lam, nu, trunc: CmpTruncation = DEFAULT_TRUNCATION):
    """``(log Z(lambda, nu), last index summed)`` of the truncated series."""
    lam = _check_positive(lam, "lambda")
    nu = _check_positive(nu, "nu")
    lam, nu = np.broadcast_arrays(lam, nu)
    shape = lam.shape
    a = np.log(lam).ravel()
    logz = np.empty(a.shape)
    last = np.empty(a.shape, dtype=np.int64)
    for rows, mx, w, idx in _window_groups(a, nu.ravel().astype(float), trunc):
        logz[rows] = mx + np.log(_rowsum(w))
        last[rows] = idx
    logz, last = logz.reshape(shape), last.reshape(shape)
    if not shape:
        return float(logz), int(last)
    return logz, last


@dataclass
class _CmpMoments:
    logz: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    # filled only with full=True
    e_logfact: np.ndarray | None = None
    k3: np.ndarray | None = None
    k4: np.ndarray | None = None
    c_yt: np.ndarray | None = None  # Cov(Y, log Y!)
    c_yyt: np.ndarray | None = None  # E[(Y-m)^2 (T-ET)]
    c_yyyt: np.ndarray | None = None  # E[(Y-m)^3 (T-ET)]


def _moments(a: np.ndarray, nu: np.ndarray, trunc: CmpTruncation, full: bool) -> _CmpMoments:
    n = a.shape[0]
    out = _CmpMoments(logz=np.empty(n), mean=np.empty(n), var=np.empty(n))
    if full:
        for name in ("e_logfact", "k3", "k4", "c_yt", "c_yyt", "c_yyyt"):
            setattr(out, name, np.empty(n))
    for rows, log_scale, w, _ in _window_groups(a, nu, trunc):
        J = w.shape[1]
        j = np.arange(J, dtype=float)
        s0 = _rowsum(w)
        p = w / s0[:, None]
        mean = _rowsum(p * j)
        d = j[None, :] - mean[:, None]
        pd2 = p * d * d
        var = _rowsum(pd2)
        out.logz[rows] = log_scale + np.log(s0)
        out.mean[rows] = mean
        out.var[rows] = var
        if full:
            lf = _logfact(J)
            et = _rowsum(p * lf)
            e = lf[None, :] - et[:, None]
            out.e_logfact[rows] = et
            out.k3[rows] = _rowsum(pd2 * d)
            out.k4[rows] = _rowsum(pd2 * d * d) - 3.0 * var * var
            out.c_yt[rows] = _rowsum(p * d * e)
            out.c_yyt[rows] = _rowsum(pd2 * e)
            out.c_yyyt[rows] = _rowsum(pd2 * d * e)
    return out


def _solve_log_rate(eta: np.ndarray, nu: np.ndarray, trunc: CmpTruncation, max_iter: int = 100):
    """Newton on ``a = log(lambda)`` for ``log E[Y] = eta``, row by row.

    The mean increases with ``a``, so every evaluation tightens a bracket
    around the root; a Newton step leaving the bracket is replaced by
    bisection (needed for large ``nu`` where the mean is nearly a step
    function of ``a``).
    """
    mu = np.exp(eta)
    base = mu + (nu - 1.0) / (2.0 * nu)
    # asymptotic guess lambda0 = (mu + (nu-1)/(2 nu))^nu for mu >= 1; below that
    # the mass sits mostly on {0, 1} and lambda0 = mu is close for every nu
    fallback = nu * np.maximum(eta, 0.0) + np.minimum(eta, 0.0)
    a = np.where(base > 0, nu * np.log(np.where(base > 0, base, 1.0)), fallback)
    a = np.where(eta < 0.0, eta, a)
    lo = np.full(a.shape, -np.inf)
    hi = np.full(a.shape, np.inf)
    active = np.arange(eta.shape[0])
    for _ in range(max_iter):
        if not active.size:
            return a
        mom = _moments(a[active], nu[active], trunc, full=False)
        ok = (mom.mean > 0) & (mom.var > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            resid = eta[active] - np.log(mom.mean)
            step = resid * mom.mean / mom.var
        # log(mean) moves roughly by step / nu: cap that at 2
        cap = 2.0 * nu[active]
        step = np.where(ok, step, cap)
        aa = a[active]
        below = ~ok | (resid > 0)
        lo[active] = np.where(below, np.maximum(lo[active], aa), lo[active])
        hi[active] = np.where(below, hi[active], np.minimum(hi[active], aa))
        new = aa + np.clip(step, -cap, cap)
        l, h = lo[active], hi[active]
        outside = ~((new > l) & (new < h)) & (new != aa)
        bounded = np.isfinite(l) & np.isfinite(h)
        new = np.where(outside & bounded, 0.5 * (l + h), new)
        new = np.where(outside & ~bounded & np.isfinite(l), np.maximum(new, l + cap), new)
        new = np.where(outside & ~bounded & np.isfinite(h), np.minimum(new, h - cap), new)
        exact = ok & (resid == 0.0)
        new = np.where(exact, aa, new)
        a[active] = new
        done = exact | (np.abs(new - aa) <= 1e-10 * np.maximum(1.0, np.abs(aa)))
        active = active[~done]
    if active.size:
        raise CmpSolveError(
            f"COM-Poisson rate solve did not converge (mu={mu[active[0]]:.4g}, nu={nu[active[0]]:.4g})"
        )
    return a


def cmp_solve_rate(mu, nu, trunc: CmpTruncation = DEFAULT_TRUNCATION):
    """Rate ``lambda`` whose truncated COM-Poisson mean equals ``mu``."""
    mu = _check_positive(mu, "mu")
    nu = _check_positive(nu, "nu")
    mu, nu = np.broadcast_arrays(mu, nu)
    a = _solve_log_rate(np.log(mu).ravel(), nu.ravel().astype(float), trunc)
    return _scalar_or_array(np.exp(a).reshape(mu.shape))


def cmp_logpmf_mean(y, mu, nu, trunc: CmpTruncation = DEFAULT_TRUNCATION):
    """Mean-parametrized COM-Poisson log-pmf ``y log(lambda) - nu log(y!) - log Z``."""
    y = _check_counts(y)
    mu = _check_positive(mu, "mu")
    nu = _check_positive(nu, "nu")
    y, mu, nu = np.broadcast_arrays(y, mu, nu)
    shape = y.shape
    eta = np.log(mu).ravel()
    nuf = nu.ravel().astype(float)
    a = _solve_log_rate(eta, nuf, trunc)
    mom = _moments(a, nuf, trunc, full=False)
    out = y.ravel() * a - nuf * gammaln(y.ravel() + 1.0) - mom.logz
    return _scalar_or_array(out.reshape(shape))


def cmp_pmf_table(mu, nu, trunc: CmpTruncation = DEFAULT_TRUNCATION) -> np.ndarray:
    """Probabilities over each row's truncation window, zero-padded: shape (n, J)."""
    mu = np.atleast_1d(_check_positive(mu, "mu")).astype(float)
    nu = np.broadcast_to(np.asarray(nu, dtype=float), mu.shape).astype(float)
    a = _solve_log_rate(np.log(mu), nu, trunc)
    _, w, _ = _window(a, nu, trunc)
    return w / _rowsum(w)[:, None]


def cmp_variance(mu, nu, trunc: CmpTruncation = DEFAULT_TRUNCATION):
    """Variance of the mean-parametrized COM-Poisson."""
    mu = _check_positive(mu, "mu")
    nu = _check_positive(nu, "nu")
    mu, nu = np.broadcast_arrays(mu, nu)
    nuf = nu.ravel().astype(float)
    a = _solve_log_rate(np.log(mu).ravel(), nuf, trunc)
    return _scalar_or_array(_moments(a, nuf, trunc, full=False).var.reshape(mu.shape))


# ---------------------------------------------------------------------------
# log-likelihood terms with derivatives
# ---------------------------------------------------------------------------


@dataclass
class LogLikTerms:
    """Per-observation log-pmf and derivatives.

    ``d1..d3`` are derivatives w.r.t. ``eta``; ``dpsi``, ``d1psi``, ``d2psi``
    are d/dpsi of ``value``, ``d1`` and ``d2`` (``psi`` = log-dispersion).
    Fields beyond the requested order are ``None``.
    """

    value: np.ndarray
    d1: np.ndarray | None = None
    d2: np.ndarray | None = None
    d3: np.ndarray | None = None
    dpsi: np.ndarray | None = None
    d1psi: np.ndarray | None = None
    d2psi: np.ndarray | None = None
    # positive surrogate for -d2, used when the exact curvature is not positive
    fisher: np.ndarray | None = None


def loglik_terms(
    family: Family,
    y: np.ndarray,
    eta: np.ndarray,
    log_disp: np.ndarray | None = None,
    trunc: CmpTruncation = DEFAULT_TRUNCATION,
    order: int = 2,
) -> LogLikTerms:
    """Evaluate log f(y | mu = exp(eta), disp = exp(log_disp)) and derivatives.

    ``order`` 0 returns the value only, 1 adds ``d1``, 2 adds ``d2``, 3 adds
    ``d3`` and the log-dispersion derivatives.  Arrays broadcast elementwise;
    ``log_disp`` broadcasts against the response axis.
    """
    if family is Family.POISSON:
        return _poisson_terms(y, eta, order)
    if log_disp is None:
        raise ValueError(f"family {family.value} needs a dispersion")
    y, eta, log_disp = np.broadcast_arrays(
        np.asarray(y, dtype=float), np.asarray(eta, dtype=float), np.asarray(log_disp, dtype=float)
    )
    if family is Family.NB2:
        return _nb2_terms(y, eta, log_disp, order)
    if family is Family.CMP:
        return _cmp_terms(y, eta, log_disp, trunc, order)
    raise ValueError(f"unknown family {family!r}")


def _poisson_terms(y, eta, order):
    y = np.asarray(y, dtype=float)
    mu = np.exp(eta)
    out = LogLikTerms(value=y * eta - mu - gammaln(y + 1.0))
    if order >= 1:
        out.d1 = y - mu
    if order >= 2:
        out.d2 = -mu
        out.fisher = mu
    if order >= 3:
        out.d3 = -mu
    return out


def _nb2_terms(y, eta, log_phi, order):
    mu = np.exp(eta)
    phi = np.exp(log_phi)
    s_log, s_inv = _nb_series(y, mu, phi, order >= 3)
    value = s_log + y * eta - gammaln(y + 1.0) - phi * np.log1p(mu / phi)
    out = LogLikTerms(value=value)
    if order == 0:
        return out
    q = mu / (phi + mu)
    out.d1 = (y - mu) * (1.0 - q)
    if order >= 2:
        qq = q * (1.0 - q)
        out.d2 = -(y + phi) * qq
        out.fisher = -out.d2
    if order >= 3:
        out.d3 = -(y + phi) * qq * (1.0 - 2.0 * q)
        out.dpsi = phi * (s_inv - np.log1p(mu / phi) + (mu - y) / (phi + mu))
        out.d1psi = (y - mu) * qq
        out.d2psi = qq * (y * (1.0 - 2.0 * q) - 2.0 * phi * q)
    return out


def _cmp_terms(y, eta, log_nu, trunc, order):
    shape = y.shape
    yf, ef, nf = y.ravel(), eta.ravel(), np.exp(log_nu).ravel()
    a = _solve_log_rate(ef, nf, trunc)
    mom = _moments(a, nf, trunc, full=order >= 2)
    lf_y = gammaln(yf + 1.0)
    out = LogLikTerms(value=(yf * a - nf * lf_y - mom.logz).reshape(shape))
    if order == 0:
        return out
    mu = np.exp(ef)
    V = mom.var
    A = mu / V  # d a / d eta
    r = yf - mu
    out.d1 = (r * A).reshape(shape)
    if order >= 2:
        k3 = mom.k3
        B = 1.0 - k3 * A / V
        A_e = A * B
        out.d2 = (-mu * A + r * A_e).reshape(shape)
        out.fisher = (mu * A).reshape(shape)
    if order >= 3:
        k4 = mom.k4
        B_e = -(k4 * A * A / V + k3 * A_e / V - k3 * k3 * A * A / (V * V))
        A_ee = A_e * B + A * B_e
        out.d3 = (-mu * A - 2.0 * mu * A_e + r * A_ee).reshape(shape)

        c = mom.c_yt
        a_nu = c / V  # d a / d nu
        l_nu = r * a_nu - lf_y + mom.e_logfact
        V_nu = k3 * a_nu - mom.c_yyt
        k3_nu = k4 * a_nu - (mom.c_yyyt - 3.0 * V * c)
        A_nu = -A * V_nu / V
        B_nu = -(k3_nu * A / V + k3 * A_nu / V - k3 * A * V_nu / (V * V))
        A_enu = A_nu * B + A * B_nu
        out.dpsi = (nf * l_nu).reshape(shape)
        out.d1psi = (nf * r * A_nu).reshape(shape)
        out.d2psi = (nf * (-mu * A_nu + r * A_enu)).reshape(shape)
    return out


def logpmf(family: Family, y, mu, disp=None, trunc: CmpTruncation = DEFAULT_TRUNCATION):
    """Dispatch to the family's log-pmf."""
    family = Family.parse(family)
    if family is Family.POISSON:
        return poisson_logpmf(y, mu)
    if family is Family.NB2:
        return nb2_logpmf(y, mu, disp)
    return cmp_logpmf_mean(y, mu, disp, trunc)
