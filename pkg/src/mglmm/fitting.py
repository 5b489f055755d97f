"""Initial values, staged outer optimization and post-fit inference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from scipy import optimize as sopt

from .covariance import SigmaReport, report_sigma
from .diffcheck import NonFiniteError, OuterObjective, hessian
from .families import DEFAULT_TRUNCATION, CmpTruncation
from .laplace import LaplaceObjective
from .model import Dataset, Family, ModelError, ModelSpec, Theta, Variant

log = logging.getLogger(__name__)

GTOL = 1e-6
FTOL_REL = 1e-10
MAX_ITER = 500
SUBSAMPLE_SIZE = 350
LOG_SD_FLOOR = math.log(0.05)

# default box on the unconstrained scale
BETA_BOUND = 30.0
LOG_DISP_BOUNDS = (math.log(1e-4), math.log(1e6))
LOG_SD_BOUNDS = (math.log(1e-3), math.log(1e2))
RHO_BOUND = 30.0


class FitError(RuntimeError):
    """Every optimization stage failed."""

    def __init__(self, message: str, trace: "ConvergenceTrace | None" = None):
        super().__init__(message)
        self.trace = trace


class Algorithm(str, Enum):
    PORT = "port"  # box-bounded limited-memory quasi-Newton
    BFGS = "bfgs"  # unbounded dense quasi-Newton

    @classmethod
    def parse(cls, value: "str | Algorithm") -> "Algorithm":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"port": cls.PORT, "l_bfgs_b": cls.PORT, "lbfgsb": cls.PORT, "bfgs": cls.BFGS}
        if key not in aliases:
            raise ModelError(f"unknown algorithm {value!r}")
        return aliases[key]


@dataclass(frozen=True)
class Stage:
    """One optimization run; ``subsample`` is the number of subjects drawn
    without replacement (None means the full data)."""

    algorithm: Algorithm
    subsample: int | None = None
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm.parse(self.algorithm))
        if self.subsample is not None and self.subsample < 2:
            raise ModelError("subsample size must be at least 2")

    @property
    def scope(self) -> str:
        return "full" if self.subsample is None else f"subsample({self.subsample})"

    def to_dict(self) -> dict:
        return {"algorithm": self.algorithm.value, "subsample": self.subsample, "seed": self.seed}


@dataclass(frozen=True)
class FitPlan:
    stages: tuple[Stage, ...]
    warm_start_from: "FitResult | None" = None
    gtol: float = GTOL
    ftol_rel: float = FTOL_REL
    max_iter: int = MAX_ITER
    bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ModelError("a fit plan needs at least one stage")
        if stages[-1].subsample is not None:
            raise ModelError("the last stage must use the full data")
        if self.gtol <= 0 or self.ftol_rel <= 0 or self.max_iter < 1:
            raise ModelError("tolerances must be positive")
        object.__setattr__(self, "stages", stages)

    @classmethod
    def default(cls, seed: int = 0, **kw) -> "FitPlan":
        """Subsample/PORT, then full-data PORT, BFGS, PORT."""
        return cls(
            stages=(
                Stage(Algorithm.PORT, SUBSAMPLE_SIZE, seed),
                Stage(Algorithm.PORT),
                Stage(Algorithm.BFGS),
                Stage(Algorithm.PORT),
            ),
            **kw,
        )

    @classmethod
    def single(cls, algorithm: Algorithm = Algorithm.BFGS, **kw) -> "FitPlan":
        return cls(stages=(Stage(algorithm),), **kw)

    def to_dict(self) -> dict:
        return {
            "stages": [s.to_dict() for s in self.stages],
            "gtol": self.gtol,
            "ftol_rel": self.ftol_rel,
            "max_iter": self.max_iter,
            "bounds": {k: list(v) for k, v in self.bounds.items()},
        }


# ---------------------------------------------------------------------------
# traces and results
# ---------------------------------------------------------------------------


@dataclass
class OptimizeTrace:
    iterations: int
    n_evals: int
    objective: float
    grad_norm: float
    reason: str
    success: bool


@dataclass
class StageTrace:
    name: str
    algorithm: str
    scope: str
    n_subjects: int
    seed: int | None
    iterations: int
    n_evals: int
    objective: float
    full_objective: float
    grad_norm: float
    reason: str
    success: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ConvergenceTrace:
    """Per-stage record; ``selected`` indexes the candidate reported as the fit
    (candidate 0 is the initial point)."""

    stages: list[StageTrace]
    selected: int

    def to_dict(self) -> dict:
        return {"stages": [s.to_dict() for s in self.stages], "selected": self.selected}


@dataclass
class FitResult:
    spec: ModelSpec
    theta: Theta
    loglik: float
    n_params: int
    n_subjects: int
    aic: float
    bic: float
    vcov: np.ndarray | None
    se: np.ndarray
    se_available: np.ndarray
    pd_hessian: bool
    grad_norm: float
    converged: bool
    sigma: SigmaReport
    trace: ConvergenceTrace | None = None
    plan: FitPlan | None = None

    @property
    def free_names(self) -> tuple[str, ...]:
        return self.spec.layout.free_names

    @property
    def estimates(self) -> np.ndarray:
        return self.theta.free

    @property
    def all_se_available(self) -> bool:
        return bool(np.all(self.se_available))

    def to_dict(self) -> dict:
        est = self.estimates
        params = []
        for i, name in enumerate(self.free_names):
            ok = bool(self.se_available[i])
            params.append(
                {
                    "name": name,
                    "estimate": float(est[i]),
                    "se": float(self.se[i]) if ok else None,
                    "se_available": ok,
                }
            )
        out = {
            "spec": self.spec.to_dict(),
            "n_subjects": self.n_subjects,
            "np": self.n_params,
            "loglik": self.loglik,
            "aic": self.aic,
            "bic": self.bic,
            "converged": self.converged,
            "grad_norm": self.grad_norm,
            "pd_hessian": self.pd_hessian,
            "se_all_available": self.all_se_available,
            "parameters": params,
            "theta_full": [float(v) for v in self.theta.full],
            "sigma": self.sigma.to_dict(),
        }
        if self.trace is not None:
            out["trace"] = self.trace.to_dict()
        if self.plan is not None:
            out["plan"] = self.plan.to_dict()
        return out


def information_criteria(loglik: float, n_params: int, n_subjects: int) -> tuple[float, float]:
    """``(AIC, BIC)``."""
    return -2.0 * loglik + 2.0 * n_params, -2.0 * loglik + n_params * math.log(n_subjects)


# ---------------------------------------------------------------------------
# initial values
# ---------------------------------------------------------------------------


def _poisson_irls(y: np.ndarray, X: np.ndarray, max_iter: int = 50, tol: float = 1e-10) -> np.ndarray | None:
    """Poisson regression by Newton/IRLS; None on divergence or separation."""
    ybar = float(np.mean(y))
    if ybar <= 0:
        return None
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(ybar)
    for _ in range(max_iter):
        eta = X @ beta
        if np.max(np.abs(eta)) > 50:
            return None
        mu = np.exp(eta)
        score = X.T @ (y - mu)
        info = X.T @ (X * mu[:, None])
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            return None
        beta = beta + step
        if not np.all(np.isfinite(beta)) or np.max(np.abs(beta)) > BETA_BOUND:
            return None
        if np.max(np.abs(step)) < tol * (1.0 + np.max(np.abs(beta))):
            return beta
    return None


def _fallback_beta(y: np.ndarray, p: int) -> np.ndarray:
    beta = np.zeros(p)
    beta[0] = math.log(max(float(np.mean(y)), 1e-3))
    return beta


def initial_values(data: Dataset, spec: ModelSpec | None = None, warm_start: "FitResult | None" = None) -> Theta:
    """Starting point for the outer optimization.

    Regression coefficients come from separate Poisson fits per response and
    random-effect SDs from the spread of the working residuals ``(y - mu)/mu``.
    Correlations start at zero and dispersions at 1.  With ``warm_start``
    every slot with a matching name is copied from that fit except the
    dispersions, which restart at 1; copied SDs below 0.05 are raised to 0.05
    and the correlations then restart at zero.
    """
    spec = spec or data.spec
    lay = spec.layout
    full = np.zeros(lay.n_full)
    Y = data.Y.astype(float)
    for r, (s, X) in enumerate(zip(lay.beta_slices, data.X)):
        y = Y[:, r]
        beta = _poisson_irls(y, X)
        if beta is None:
            log.warning("Poisson start for response %r failed; using the log mean", spec.responses[r])
            beta = _fallback_beta(y, X.shape[1])
        full[s] = beta
        mu = np.exp(X @ beta)
        resid = (y - mu) / mu
        sd = float(np.std(resid, ddof=1))
        full[lay.sd_slice.start + r] = max(math.log(sd), LOG_SD_FLOOR) if sd > 0 else LOG_SD_FLOOR
    lo, hi = LOG_SD_BOUNDS
    full[lay.sd_slice] = np.clip(full[lay.sd_slice], lo, hi)
    if warm_start is not None:
        source = warm_start.theta.named()
        for j, name in enumerate(lay.full_names):
            if name in source and not name.startswith("log_disp"):
                full[j] = source[name]
        # the log-SD gradient vanishes like sd^2, so a collapsed SD would never
        # recover; correlations fitted next to it are unidentified
        sds = full[lay.sd_slice]
        if np.any(sds < LOG_SD_FLOOR):
            full[lay.sd_slice] = np.maximum(sds, LOG_SD_FLOOR)
            full[lay.rho_slice] = 0.0
    full[lay.disp_slice] = 0.0
    return Theta.from_free(spec, lay.restrict(full))


def apply_variant(spec: ModelSpec, template: Theta) -> Theta:
    """Re-express ``template`` (any variant of the same model) under ``spec``'s
    variant: shared slots are averaged and frozen slots take their fixed values."""
    if template.spec.responses != spec.responses or template.spec.covariates != spec.covariates:
        raise ModelError("template belongs to a different model")
    if template.spec.family.has_dispersion != spec.family.has_dispersion:
        raise ModelError("template and spec disagree on dispersion parameters")
    return Theta.from_free(spec, spec.layout.restrict(template.full))


def free_bounds(spec: ModelSpec, overrides: dict | None = None) -> list[tuple[float, float]]:
    """Box bounds on the free vector; ``overrides`` maps a parameter group
    (``beta``, ``log_disp``, ``log_sd``, ``rho_raw``) to ``(lo, hi)``."""
    groups = {
        "beta": (-BETA_BOUND, BETA_BOUND),
        "log_disp": LOG_DISP_BOUNDS,
        "log_sd": LOG_SD_BOUNDS,
        "rho_raw": (-RHO_BOUND, RHO_BOUND),
    }
    for key, val in (overrides or {}).items():
        if key not in groups:
            raise ModelError(f"unknown bound group {key!r}")
        lo, hi = map(float, val)
        if not lo < hi:
            raise ModelError(f"empty bound interval for {key!r}")
        groups[key] = (lo, hi)
    return [groups[name.split("[")[0]] for name in spec.layout.free_names]


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class _Tracked:
    """Objective wrapper: counts evaluations, remembers the best finite point
    and hands the line search a large finite value where the objective fails."""

    def __init__(self, fun: Callable[[np.ndarray], tuple[float, np.ndarray]]):
        self.fun = fun
        self.n_evals = 0
        self.best_x: np.ndarray | None = None
        self.best_f = math.inf
        self.best_g: np.ndarray | None = None
        self.ref = None

    def __call__(self, x):
        self.n_evals += 1
        f, g = self.fun(np.array(x, dtype=float))
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            base = self.best_f if np.isfinite(self.best_f) else 0.0
            return abs(base) * 1e3 + 1e10, np.zeros(len(x))
        if f < self.best_f:
            self.best_f, self.best_x, self.best_g = float(f), np.array(x, dtype=float), np.array(g)
        return f, g


def _projected_grad_norm(x, g, bounds) -> float:
    if bounds is None:
        return float(np.max(np.abs(g), initial=0.0))
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    pg = np.clip(x - g, lo, hi) - x
    return float(np.max(np.abs(pg), initial=0.0))


def optimize(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    bounds: list[tuple[float, float]] | None = None,
    algorithm: Algorithm = Algorithm.PORT,
    gtol: float = GTOL,
    ftol_rel: float = FTOL_REL,
    max_iter: int = MAX_ITER,
) -> tuple[np.ndarray, OptimizeTrace]:
    """Minimize ``fun`` (returning value and gradient) from ``x0``.

    Stops at gradient sup-norm below ``gtol``, a relative objective change
    below ``ftol_rel`` or ``max_iter`` iterations.  The best finite point seen
    is returned even when the line search fails.
    """
    algorithm = Algorithm.parse(algorithm)
    x0 = np.asarray(x0, dtype=float)
    if bounds is not None:
        x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
    tracked = _Tracked(fun)
    f0, g0 = tracked(x0)
    if not np.isfinite(tracked.best_f):
        raise NonFiniteError("objective is not finite at the starting point")

    if algorithm is Algorithm.PORT:
        res = sopt.minimize(
            tracked,
            x0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": max_iter, "ftol": ftol_rel, "gtol": gtol, "maxfun": 20 * max_iter},
        )
        reason = str(res.message)
        success = bool(res.success)
        nit = int(res.nit)
    else:
        state = {"f": f0, "small_change": False}

        def callback(intermediate_result):
            f = float(intermediate_result.fun)
            prev = state["f"]
            state["f"] = f
            if abs(prev - f) <= ftol_rel * max(abs(prev), abs(f), 1.0):
                state["small_change"] = True
                raise StopIteration

        res = sopt.minimize(
            tracked,
            x0,
            jac=True,
            method="BFGS",
            callback=callback,
            options={"maxiter": max_iter, "gtol": gtol, "norm": np.inf},
        )
        nit = int(res.nit)
        if state["small_change"]:
            reason, success = "relative objective change below tolerance", True
        else:
            reason, success = str(res.message), bool(res.success)
    x = tracked.best_x
    g = tracked.best_g
    gn = _projected_grad_norm(x, g, bounds if algorithm is Algorithm.PORT else None)
    if not success and gn < gtol:
        success, reason = True, f"{reason} (gradient below tolerance)"
    return x, OptimizeTrace(nit, tracked.n_evals, tracked.best_f, gn, reason, success)


# ---------------------------------------------------------------------------
# staged fitting
# ---------------------------------------------------------------------------


def _subsample_rows(n: int, size: int, seed: int | None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=size, replace=False))


def _nested_limit_start(theta0: Theta, warm: "FitResult | None", bounds) -> Theta | None:
    """For an NB2 fit warm-started from a Poisson fit, the same point with every
    free dispersion at its upper bound, where NB2 reproduces the Poisson fit."""
    spec = theta0.spec
    if warm is None or spec.family is not Family.NB2 or warm.spec.family is not Family.POISSON:
        return None
    source = warm.theta.named()
    free = theta0.free.copy()
    hit = False
    for j, name in enumerate(spec.layout.free_names):
        if name.startswith("log_disp"):
            free[j] = bounds[j][1]
            hit = True
        elif name in source:
            free[j] = source[name]
    return Theta.from_free(spec, free) if hit else None


def staged_fit(
    data: Dataset,
    spec: ModelSpec | None = None,
    plan: FitPlan | None = None,
    theta0: Theta | None = None,
    trunc: CmpTruncation = DEFAULT_TRUNCATION,
    threads: int | None = None,
    compute_se: bool = True,
) -> FitResult:
    """Run the plan's stages in order, each from the best point so far, and
    report the candidate with the largest full-data log-likelihood."""
    spec = spec or data.spec
    data = data if spec == data.spec else data.with_spec(spec)
    plan = plan or FitPlan.default()
    bounds = free_bounds(spec, plan.bounds)
    full_obj = LaplaceObjective(data, spec, trunc=trunc, threads=threads)

    limit = None
    if theta0 is None:
        theta0 = initial_values(data, spec, plan.warm_start_from)
        limit = _nested_limit_start(theta0, plan.warm_start_from, bounds)
    starts = [("initial values", theta0)] + ([("Poisson limit of the warm start", limit)] if limit else [])
    # modes a candidate was evaluated from; starting there again reproduces its value bitwise
    best_start = full_obj.modes.copy()
    values = []
    for _, th in starts:
        full_obj.modes[:] = best_start
        values.append(full_obj.value(np.clip(th.free, [b[0] for b in bounds], [b[1] for b in bounds])))
    pick = int(np.argmin(values)) if np.any(np.isfinite(values)) else 0
    reason, th = starts[pick]
    x_best = np.clip(th.free, [b[0] for b in bounds], [b[1] for b in bounds])
    if pick != len(starts) - 1:
        full_obj.modes[:] = best_start
        full_obj.value(x_best)
    f_best = values[pick]
    records = [
        StageTrace("init", "none", "full", data.n, None, 0, len(starts), f_best, f_best, math.nan, reason, False)
    ]
    selected = 0
    best_modes = full_obj.modes.copy()

    for i, stage in enumerate(plan.stages, start=1):
        name = f"{i}:{stage.algorithm.value}/{stage.scope}"
        if stage.subsample is not None and stage.subsample >= data.n:
            log.warning("subsample of %d requested from %d subjects; using the full data", stage.subsample, data.n)
            stage = Stage(stage.algorithm, None, stage.seed)
        if stage.subsample is None:
            obj, scope_n = full_obj, data.n
            obj.modes[:] = best_modes
        else:
            rows = _subsample_rows(data.n, stage.subsample, stage.seed)
            obj, scope_n = LaplaceObjective(data.subset(rows), spec, trunc=trunc, threads=threads), len(rows)
        try:
            x, tr = optimize(
                obj.value_and_grad,
                x_best,
                bounds=bounds if stage.algorithm is Algorithm.PORT else None,
                algorithm=stage.algorithm,
                gtol=plan.gtol,
                ftol_rel=plan.ftol_rel,
                max_iter=plan.max_iter,
            )
        except NonFiniteError as exc:
            records.append(
                StageTrace(name, stage.algorithm.value, stage.scope, scope_n, stage.seed, 0, 0, math.inf, math.inf,
                           math.nan, f"failed: {exc}", False)
            )
            continue
        # re-evaluate from the accepted modes so the reported value is reproducible
        full_obj.modes[:] = best_modes
        f_full = full_obj.value(x)
        records.append(
            StageTrace(name, stage.algorithm.value, stage.scope, scope_n, stage.seed, tr.iterations, tr.n_evals,
                       tr.objective, f_full, tr.grad_norm, tr.reason, tr.success)
        )
        if np.isfinite(f_full) and f_full <= f_best:
            x_best, f_best, selected = x, f_full, len(records) - 1
            best_start = best_modes
            best_modes = full_obj.modes.copy()

    trace = ConvergenceTrace(records, selected)
    if not np.isfinite(f_best) or all(not np.isfinite(r.full_objective) for r in records[1:]):
        raise FitError("no optimization stage produced a finite objective", trace)
    full_obj.modes[:] = best_start
    return post_fit(Theta.from_free(spec, x_best), data, spec, trunc=trunc, threads=threads, trace=trace,
                    plan=plan, objective=full_obj, bounds=bounds, compute_se=compute_se)


def covariance_from_information(H: np.ndarray) -> tuple[np.ndarray | None, np.ndarray, bool]:
    """Invert an observed information matrix.

    Returns ``(vcov, se_available, positive_definite)``.  When the Cholesky
    factorization fails the plain inverse is still reported (if it exists)
    but no standard error is marked available.
    """
    H = np.asarray(H, dtype=float)
    n = H.shape[0]
    avail = np.zeros(n, dtype=bool)
    pd = False
    try:
        C = np.linalg.cholesky(H)
        ci = np.linalg.solve(C, np.eye(n))
        vcov = ci.T @ ci
        pd = True
    except np.linalg.LinAlgError:
        try:
            vcov = np.linalg.inv(H)
        except np.linalg.LinAlgError:
            return None, avail, False
    vcov = 0.5 * (vcov + vcov.T)
    d = np.diag(vcov)
    # an indefinite information matrix leaves every SE unavailable
    avail = np.isfinite(d) & (d > 0) & pd
    return vcov, avail, pd


def post_fit(
    theta_hat: Theta,
    data: Dataset,
    spec: ModelSpec | None = None,
    trunc: CmpTruncation = DEFAULT_TRUNCATION,
    threads: int | None = None,
    trace: ConvergenceTrace | None = None,
    plan: FitPlan | None = None,
    objective: LaplaceObjective | None = None,
    bounds: list[tuple[float, float]] | None = None,
    compute_se: bool = True,
) -> FitResult:
    """Log-likelihood, information criteria and the observed-information
    covariance at ``theta_hat``.

    The observed information is the Hessian of the negative log-likelihood.
    A parameter's SE is unavailable when the information cannot be inverted
    or its variance is not positive.
    """
    spec = spec or theta_hat.spec
    obj = objective or LaplaceObjective(data, spec, trunc=trunc, threads=threads)
    x = theta_hat.free
    value, grad = obj.value_and_grad(x)
    if not np.isfinite(value):
        raise FitError("log-likelihood is not finite at the reported estimate", trace)
    n_free = spec.layout.n_free
    loglik = -value
    aic, bic = information_criteria(loglik, n_free, data.n)
    gn = _projected_grad_norm(x, grad, bounds)

    vcov = None
    se = np.full(n_free, np.nan)
    avail = np.zeros(n_free, dtype=bool)
    pd = False
    if compute_se:
        modes = obj.modes.copy()
        try:
            H = hessian(OuterObjective(obj), x)
        except NonFiniteError:
            H = None
        obj.modes[:] = modes
        if H is not None:
            vcov, avail, pd = covariance_from_information(H)
            if vcov is not None:
                se[avail] = np.sqrt(np.diag(vcov)[avail])
    sigma = report_sigma(theta_hat, vcov, avail)
    sel_success = trace is None or (trace.stages[trace.selected].success if trace.selected > 0 else False)
    converged = bool(sel_success or gn < 1e-4)
    return FitResult(
        spec=spec,
        theta=theta_hat,
        loglik=loglik,
        n_params=n_free,
        n_subjects=data.n,
        aic=aic,
        bic=bic,
        vcov=vcov,
        se=se,
        se_available=avail,
        pd_hessian=pd,
        grad_norm=gn,
        converged=converged,
        sigma=sigma,
        trace=trace,
        plan=plan,
    )


def fit_chain(
    data: Dataset,
    spec: ModelSpec,
    families=(Family.POISSON, Family.NB2, Family.CMP),
    seed: int = 0,
    trunc: CmpTruncation = DEFAULT_TRUNCATION,
    threads: int | None = None,
    plan_kw: dict | None = None,
) -> list[FitResult]:
    """Fit the families in order, each warm-started from the previous fit."""
    results: list[FitResult] = []
    prev = None
    for fam in families:
        fam = Family.parse(fam)
        variant = spec.variant
        if fam is Family.POISSON and variant is Variant.FIXED_DISPERSION:
            variant = Variant.FULL
        fspec = spec.replace(family=fam, variant=variant, fixed_dispersion=None if fam is not spec.family else spec.fixed_dispersion)
        plan = FitPlan.default(seed=seed, warm_start_from=prev, **(plan_kw or {}))
        res = staged_fit(data.with_spec(fspec), fspec, plan, trunc=trunc, threads=threads)
        results.append(res)
        prev = res
    return results
