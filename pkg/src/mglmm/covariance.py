"""Random-effect covariance: unconstrained correlation parametrization,
multivariate normal density, and the SD/correlation report.

The correlation matrix is built from a unit-diagonal lower-triangular ``L``
whose strictly-lower entries are filled row-wise from ``rho_raw``::

    Omega = D^{-1/2} L L^T D^{-1/2},   D = diag(L L^T)
    Sigma = W Omega W,                 W = diag(sd)

Every finite ``rho_raw`` gives a valid correlation matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
Z_CRIT = 1.96


def n_corr(k: int) -> int:
    return k * (k - 1) // 2


def _unit_lower(rho_raw: np.ndarray, k: int) -> np.ndarray:
    rho_raw = np.asarray(rho_raw, dtype=float)
    if rho_raw.shape != (n_corr(k),):
        raise ValueError(f"rho_raw must have length {n_corr(k)} for k={k}")
    L = np.eye(k)
    L[np.tril_indices(k, -1)] = rho_raw
    return L


def build_corr(rho_raw: np.ndarray, k: int) -> np.ndarray:
    """Correlation matrix from unconstrained ``rho_raw`` (row-wise fill)."""
    L = _unit_lower(rho_raw, k)
    A = L @ L.T
    d = np.sqrt(np.diag(A))
    omega = A / np.outer(d, d)
    omega = 0.5 * (omega + omega.T)
    np.fill_diagonal(omega, 1.0)
    return omega


def corr_jacobian(rho_raw: np.ndarray, k: int) -> np.ndarray:
    """dOmega/drho_raw as an array of shape (n_corr, k, k)."""
    L = _unit_lower(rho_raw, k)
    A = L @ L.T
    dA = np.diag(A)
    dinv = 1.0 / dA
    omega = A / np.sqrt(np.outer(dA, dA))
    rows, cols = np.tril_indices(k, -1)
    out = np.empty((len(rows), k, k))
    for m, (i, j) in enumerate(zip(rows, cols)):
        E = np.zeros((k, k))
        E[i, j] = 1.0
        dAm = E @ L.T + L @ E.T
        dD = np.diag(dAm) * dinv
        dOm = dAm / np.sqrt(np.outer(dA, dA)) - 0.5 * (dD[:, None] * omega + omega * dD[None, :])
        np.fill_diagonal(dOm, 0.0)
        out[m] = dOm
    return out


def rho_raw_from_corr(omega: np.ndarray) -> np.ndarray:
    """Inverse of ``build_corr``: Cholesky of ``omega`` with rows rescaled to a unit diagonal."""
    omega = np.asarray(omega, dtype=float)
    k = omega.shape[0]
    if omega.shape != (k, k):
        raise ValueError("correlation matrix must be square")
    C = np.linalg.cholesky(omega)
    L = C / np.diag(C)[:, None]
    return L[np.tril_indices(k, -1)].copy()


def build_cov(omega: np.ndarray, sd: np.ndarray) -> np.ndarray:
    sd = np.asarray(sd, dtype=float)
    if not np.all(sd > 0):
        raise ValueError("standard deviations must be positive")
    sigma = omega * np.outer(sd, sd)
    np.fill_diagonal(sigma, sd * sd)
    return sigma


def mvn_neg_logdensity(b: np.ndarray, sigma: np.ndarray, derivatives: bool = False):
    """Negative log-density of N(0, sigma) at ``b``.

    With ``derivatives=True`` returns ``(value, gradient, hessian)`` where the
    gradient is ``sigma^{-1} b`` and the hessian ``sigma^{-1}``.  Raises
    ``numpy.linalg.LinAlgError`` when ``sigma`` is not numerically PD.
    """
    b = np.asarray(b, dtype=float)
    k = b.shape[0]
    C = np.linalg.cholesky(sigma)
    z = np.linalg.solve(C, b)
    value = 0.5 * k * LOG_2PI + np.sum(np.log(np.diag(C))) + 0.5 * float(z @ z)
    if not derivatives:
        return value
    eye = np.eye(k)
    cinv = np.linalg.solve(C, eye)
    prec = cinv.T @ cinv
    return value, prec @ b, 0.5 * (prec + prec.T)


@dataclass(frozen=True)
class CovarianceParts:
    """Sigma at a parameter point plus derivatives of its inverse and log-determinant.

    Derivatives are taken w.r.t. ``[log_sd_1..log_sd_k, rho_raw_1..rho_raw_M]``.
    """

    sigma: np.ndarray
    sigma_inv: np.ndarray
    logdet: float
    d_sigma_inv: np.ndarray
    d_logdet: np.ndarray


def covariance_parts(log_sd: np.ndarray, rho_raw: np.ndarray) -> CovarianceParts:
    log_sd = np.asarray(log_sd, dtype=float)
    k = log_sd.shape[0]
    sd = np.exp(log_sd)
    omega = build_corr(rho_raw, k)
    sigma = build_cov(omega, sd)
    C = np.linalg.cholesky(sigma)
    cinv = np.linalg.solve(C, np.eye(k))
    sinv = cinv.T @ cinv
    sinv = 0.5 * (sinv + sinv.T)
    logdet = 2.0 * float(np.sum(np.log(np.diag(C))))

    d_sigma = np.empty((k + n_corr(k), k, k))
    for r in range(k):
        E = np.zeros((k, k))
        E[r, r] = 1.0
        d_sigma[r] = E @ sigma + sigma @ E
    if k > 1:
        d_sigma[k:] = corr_jacobian(rho_raw, k) * np.outer(sd, sd)
    d_sinv = -np.einsum("ij,mjk,kl->mil", sinv, d_sigma, sinv)
    d_sinv = 0.5 * (d_sinv + np.swapaxes(d_sinv, 1, 2))
    d_logdet = np.einsum("ij,mji->m", sinv, d_sigma)
    return CovarianceParts(sigma, sinv, logdet, d_sinv, d_logdet)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SigmaReport:
    """Random-effect SDs and correlations with delta-method SEs.

    ``sd_se``/``corr_se`` are NaN where no SE is available (frozen or
    unidentified parameters).  ``corr_significant`` uses |est/SE| > 1.96.
    """

    names: tuple[str, ...]
    sd: np.ndarray
    sd_se: np.ndarray
    corr: np.ndarray
    corr_se: np.ndarray
    sd_significant: np.ndarray
    corr_significant: np.ndarray

    def matrix(self) -> np.ndarray:
        """SDs on the diagonal and correlations off it (the reporting layout)."""
        out = self.corr.copy()
        np.fill_diagonal(out, self.sd)
        return out

    def to_dict(self) -> dict:
        def clean(a):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in np.atleast_2d(a)]

        return {
            "responses": list(self.names),
            "sd": [float(v) for v in self.sd],
            "sd_se": clean(self.sd_se)[0],
            "sd_significant": [bool(v) for v in self.sd_significant],
            "corr": clean(self.corr),
            "corr_se": clean(self.corr_se),
            "corr_significant": [[bool(v) for v in row] for row in self.corr_significant],
        }


def significant(estimate, se) -> np.ndarray:
    """|estimate / se| > 1.96, False where the SE is missing."""
    estimate = np.asarray(estimate, dtype=float)
    se = np.asarray(se, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(estimate / se)
    return np.where(np.isfinite(se) & (se > 0), z > Z_CRIT, False)


def report_sigma(theta, vcov: np.ndarray | None, se_available: np.ndarray | None = None) -> SigmaReport:
    """Delta-method report of SDs and correlations.

    ``theta`` is a fitted ``Theta``; ``vcov`` the covariance of its free
    vector.  A derived quantity gets an SE only when every free parameter it
    depends on has one.
    """
    spec = theta.spec
    lay = spec.layout
    k = spec.k
    sd = np.exp(theta.log_sd)
    omega = build_corr(theta.rho_raw, k)

    # Jacobian of [sd_1..sd_k, rho_(i,j) for i>j] w.r.t. the full vector
    rows, cols = np.tril_indices(k, -1)
    J_full = np.zeros((k + len(rows), lay.n_full))
    J_full[np.arange(k), np.arange(lay.sd_slice.start, lay.sd_slice.stop)] = sd
    if k > 1:
        dOm = corr_jacobian(theta.rho_raw, k)
        J_full[k:, lay.rho_slice] = dOm[:, rows, cols].T
    J = J_full @ lay.jacobian()

    se = np.full(J.shape[0], np.nan)
    if vcov is not None:
        vcov = np.asarray(vcov, dtype=float)
        avail = np.ones(lay.n_free, bool) if se_available is None else np.asarray(se_available, bool)
        var = np.einsum("ij,jk,ik->i", J, np.nan_to_num(vcov), J)
        uses = np.abs(J) > 0
        ok = uses.any(axis=1) & ~np.any(uses & ~avail[None, :], axis=1) & (var >= 0)
        se[ok] = np.sqrt(var[ok])

    corr_se = np.full((k, k), np.nan)
    corr_se[rows, cols] = se[k:]
    corr_se[cols, rows] = se[k:]
    corr_sig = significant(omega, corr_se)
    np.fill_diagonal(corr_sig, False)
    return SigmaReport(
        names=spec.responses,
        sd=sd,
        sd_se=se[:k],
        corr=omega,
        corr_se=corr_se,
        sd_significant=significant(sd, se[:k]),
        corr_significant=corr_sig,
    )
