"""Descriptive dispersion measures: Fisher DI, the generalized DI and Spearman
correlations between responses.

The generalized index for column means ``m`` and sample covariance ``C`` is::

    GDI = sqrt(m)' C sqrt(m) / (m' m)

which is the ordinary DI when there is one column.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

N_BOOT = 1000
MIN_N_SE = 30


def dispersion_index(mean: float, variance: float) -> float:
    """Variance over mean."""
    if not mean > 0:
        raise ValueError("dispersion index needs a positive mean")
    return float(variance) / float(mean)


def di(sample) -> float:
    """Fisher dispersion index of one count sample (variance with N-1)."""
    x = np.asarray(sample, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("need at least two observations")
    return dispersion_index(x.mean(), x.var(ddof=1))


def _gdi_value(Y: np.ndarray) -> float:
    m = Y.mean(axis=0)
    if np.any(m <= 0):
        return np.nan
    if Y.shape[1] == 1:
        # sqrt(m) C sqrt(m) / m^2 = C / m; same arithmetic as di()
        return dispersion_index(m[0], Y[:, 0].var(ddof=1))
    C = np.atleast_2d(np.cov(Y, rowvar=False, ddof=1))
    s = np.sqrt(m)
    return float(s @ C @ s / (m @ m))


def gdi(Y, n_boot: int = N_BOOT, seed: int = 0) -> tuple[float, float]:
    """Generalized dispersion index and its bootstrap SE.

    Resamples subjects (rows) with replacement; each resample draws from its
    own generator split off ``seed``.  The SE is NaN below 30 rows.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = Y.shape[0]
    if n < 2:
        raise ValueError("need at least two observations")
    m = Y.mean(axis=0)
    if np.any(m <= 0):
        raise ValueError("every column needs a positive mean")
    if np.all(Y.var(axis=0) == 0):
        raise ValueError("all columns are constant")
    value = _gdi_value(Y)
    if n < MIN_N_SE or n_boot < 2:
        log.warning("GDI standard error needs at least %d rows", MIN_N_SE)
        return value, float("nan")
    boots = np.empty(n_boot)
    for i, ss in enumerate(np.random.SeedSequence(seed).spawn(n_boot)):
        idx = np.random.default_rng(ss).integers(0, n, n)
        boots[i] = _gdi_value(Y[idx])
    boots = boots[np.isfinite(boots)]
    se = float(boots.std(ddof=1)) if boots.size > 1 else float("nan")
    return value, se


def spearman_matrix(Y) -> np.ndarray:
    """Rank correlations with average ranks for ties; NaN for constant columns."""
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 3:
        raise ValueError("need an N x k matrix with N >= 3")
    k = Y.shape[1]
    R = np.column_stack([rankdata(Y[:, j], method="average") for j in range(k)])
    R = R - R.mean(axis=0)
    norm = np.sqrt(np.sum(R * R, axis=0))
    out = np.full((k, k), np.nan)
    for i in range(k):
        for j in range(i, k):
            if norm[i] > 0 and norm[j] > 0:
                out[i, j] = out[j, i] = float(R[:, i] @ R[:, j] / (norm[i] * norm[j]))
    np.fill_diagonal(out, 1.0)
    return np.clip(out, -1.0, 1.0)


@dataclass(frozen=True)
class DispersionSummary:
    responses: tuple[str, ...]
    n: int
    mean: np.ndarray
    variance: np.ndarray
    di: np.ndarray
    spearman: np.ndarray
    gdi: float
    gdi_se: float

    def to_dict(self) -> dict:
        def num(v):
            return None if not np.isfinite(v) else float(v)

        return {
            "responses": list(self.responses),
            "n": self.n,
            "mean": [float(v) for v in self.mean],
            "variance": [float(v) for v in self.variance],
            "di": [float(v) for v in self.di],
            "spearman": [[num(v) for v in row] for row in self.spearman],
            "gdi": float(self.gdi),
            "gdi_se": num(self.gdi_se),
        }

    def rows(self) -> list[list[str]]:
        """Table layout: one row per response, GDI(SE) on the first row."""
        k = len(self.responses)
        out = [["Variable", "Mean", "Variance", "DI", *self.responses, "GDI(SE)"]]
        for r, name in enumerate(self.responses):
            corr = ["" if c < r else ("NA" if not np.isfinite(self.spearman[r, c]) else f"{self.spearman[r, c]:.3f}")
                    for c in range(k)]
            g = f"{self.gdi:.3f}({self.gdi_se:.3f})" if r == 0 else ""
            out.append([name, f"{self.mean[r]:.3f}", f"{self.variance[r]:.3f}", f"{self.di[r]:.3f}", *corr, g])
        return out


def describe(Y, responses=None, n_boot: int = N_BOOT, seed: int = 0) -> DispersionSummary:
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    k = Y.shape[1]
    responses = tuple(responses) if responses is not None else tuple(f"y{j + 1}" for j in range(k))
    if len(responses) != k:
        raise ValueError("one name per response column is required")
    mean = Y.mean(axis=0)
    var = Y.var(axis=0, ddof=1)
    dis = np.array([dispersion_index(m, v) for m, v in zip(mean, var)])
    rho = spearman_matrix(Y) if Y.shape[0] >= 3 else np.full((k, k), np.nan)
    g, se = gdi(Y, n_boot=n_boot, seed=seed)
    return DispersionSummary(responses, Y.shape[0], mean, var, dis, rho, g, se)
