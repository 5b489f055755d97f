"""Model definition, datasets and the packed parameter vector.

The unconstrained parameter vector always has the same *full* layout::

    [beta_1 | ... | beta_k | log_disp (k, absent for Poisson) | log_sd (k) | rho_raw (k(k-1)/2)]

A structure variant freezes or ties slots of that layout; the optimizer only
ever sees the *free* vector.  ``ParameterLayout`` owns the map between the two.
"""

from __future__ import annotations

import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np

from .covariance import build_corr, n_corr, rho_raw_from_corr


class ModelError(ValueError):
    """Invalid model specification or dataset."""


def _norm_key(text: str) -> str:
    return re.sub(r"[^a-z0-9]", "", str(text).lower())


class Family(str, Enum):
    POISSON = "poisson"
    NB2 = "nb2"
    CMP = "cmp"

    @classmethod
    def parse(cls, value: "str | Family") -> "Family":
        if isinstance(value, Family):
            return value
        aliases = {
            "poisson": cls.POISSON,
            "nb": cls.NB2,
            "nb2": cls.NB2,
            "negbin": cls.NB2,
            "negativebinomial": cls.NB2,
            "cmp": cls.CMP,
            "compoisson": cls.CMP,
            "conwaymaxwellpoisson": cls.CMP,
        }
        try:
            return aliases[_norm_key(value)]
        except KeyError:
            raise ModelError(f"unknown family {value!r}") from None

    @property
    def has_dispersion(self) -> bool:
        return self is not Family.POISSON


class Variant(str, Enum):
    FULL = "full"
    FIXED_VARIANCE = "fixed_variance"
    COMMON_VARIANCE = "common_variance"
    FIXED_DISPERSION = "fixed_dispersion"
    RHO_ZERO = "rho_zero"

    @classmethod
    def parse(cls, value: "str | Variant") -> "Variant":
        if isinstance(value, Variant):
            return value
        aliases = {
            "full": cls.FULL,
            "fixedvariance": cls.FIXED_VARIANCE,
            "commonvariance": cls.COMMON_VARIANCE,
            "comumvariance": cls.COMMON_VARIANCE,
            "fixeddispersion": cls.FIXED_DISPERSION,
            "rhozero": cls.RHO_ZERO,
            "correlationzero": cls.RHO_ZERO,
        }
        try:
            return aliases[_norm_key(value)]
        except KeyError:
            raise ModelError(f"unknown structure variant {value!r}") from None


# dispersion value frozen under Variant.FIXED_DISPERSION when none is given
DEFAULT_FIXED_DISPERSION = {Family.NB2: 1.0, Family.CMP: 1.5}


@dataclass(frozen=True)
class ModelSpec:
    """An MGLMM experiment: one conditional family, log link, k responses.

    ``covariates[r]`` lists the covariate columns of response ``r``; the
    intercept is implicit and always the first design column.
    """

    family: Family
    responses: tuple[str, ...]
    covariates: tuple[tuple[str, ...], ...]
    variant: Variant = Variant.FULL
    fixed_dispersion: float | None = None
    fixed_sd: float = 1.0
    link: str = "log"

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "responses", tuple(str(r) for r in self.responses))
        object.__setattr__(
            self, "covariates", tuple(tuple(str(c) for c in cs) for cs in self.covariates)
        )
        if len(self.responses) < 1:
            raise ModelError("at least one response is required")
        if len(set(self.responses)) != len(self.responses):
            raise ModelError("response names must be unique")
        if len(self.covariates) != len(self.responses):
            raise ModelError("need one covariate list per response")
        for r, cs in zip(self.responses, self.covariates):
            if len(set(cs)) != len(cs):
                raise ModelError(f"duplicate covariate for response {r!r}")
        if self.link != "log":
            raise ModelError("only the log link is supported")
        if self.variant is Variant.FIXED_DISPERSION and not self.family.has_dispersion:
            raise ModelError("the Poisson family has no dispersion parameter to fix")
        if self.fixed_dispersion is not None and not self.fixed_dispersion > 0:
            raise ModelError("fixed_dispersion must be positive")
        if not self.fixed_sd > 0:
            raise ModelError("fixed_sd must be positive")

    @property
    def k(self) -> int:
        return len(self.responses)

    @property
    def p(self) -> tuple[int, ...]:
        """Design widths per response, intercept included."""
        return tuple(1 + len(cs) for cs in self.covariates)

    @property
    def dispersion_value(self) -> float | None:
        """Value a frozen dispersion takes under ``FIXED_DISPERSION``."""
        if not self.family.has_dispersion:
            return None
        if self.fixed_dispersion is not None:
            return float(self.fixed_dispersion)
        return DEFAULT_FIXED_DISPERSION[self.family]

    @property
    def covariate_columns(self) -> tuple[str, ...]:
        """Distinct covariate columns in order of first use."""
        seen: dict[str, None] = {}
        for cs in self.covariates:
            for c in cs:
                seen.setdefault(c, None)
        return tuple(seen)

    def replace(self, **changes) -> "ModelSpec":
        fields = dict(
            family=self.family,
            responses=self.responses,
            covariates=self.covariates,
            variant=self.variant,
            fixed_dispersion=self.fixed_dispersion,
            fixed_sd=self.fixed_sd,
        )
        fields.update(changes)
        return ModelSpec(**fields)

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "responses": list(self.responses),
            "covariates": {r: list(cs) for r, cs in zip(self.responses, self.covariates)},
            "variant": self.variant.value,
            "fixed_dispersion": self.fixed_dispersion,
            "fixed_sd": self.fixed_sd,
            "link": self.link,
        }

    @cached_property
    def layout(self) -> "ParameterLayout":
        return ParameterLayout(self)


def build_spec(config: Mapping) -> ModelSpec:
    """Validate a parsed model configuration block.

    Accepted keys: ``family``, ``responses``, ``covariates`` (a mapping
    response -> list, or a list of lists in response order), ``variant``
    (default ``full``), ``fixed_dispersion``, ``fixed_sd``.
    """
    if "family" not in config:
        raise ModelError("model configuration needs a 'family'")
    responses = list(config.get("responses") or [])
    if not responses:
        raise ModelError("model configuration needs a non-empty 'responses' list")
    covs = config.get("covariates", None)
    if covs is None:
        covariates = [[] for _ in responses]
    elif isinstance(covs, Mapping):
        unknown = set(covs) - set(responses)
        if unknown:
            raise ModelError(f"covariates given for unknown responses {sorted(unknown)}")
        covariates = [list(covs.get(r, [])) for r in responses]
    else:
        covariates = [list(c) for c in covs]
    return ModelSpec(
        family=Family.parse(config["family"]),
        responses=tuple(responses),
        covariates=tuple(tuple(c) for c in covariates),
        variant=Variant.parse(config.get("variant", "full")),
        fixed_dispersion=config.get("fixed_dispersion"),
        fixed_sd=float(config.get("fixed_sd", 1.0)),
    )


class ParameterLayout:
    """Bijection between the full unconstrained layout and the free vector.

    ``index[j]`` is the free slot feeding full slot ``j`` or -1 when frozen;
    frozen slots take ``fixed[j]``.  Under common variance all log-SD slots
    point at the same free slot.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        k = spec.k
        names: list[str] = []
        self.beta_slices: list[slice] = []
        start = 0
        for r, cs in zip(spec.responses, spec.covariates):
            cols = ("(Intercept)",) + cs
            names.extend(f"beta[{r}:{c}]" for c in cols)
            self.beta_slices.append(slice(start, start + len(cols)))
            start += len(cols)
        self.n_beta = start
        nd = k if spec.family.has_dispersion else 0
        self.disp_slice = slice(start, start + nd)
        names.extend(f"log_disp[{r}]" for r in spec.responses[:nd])
        start += nd
        self.sd_slice = slice(start, start + k)
        names.extend(f"log_sd[{r}]" for r in spec.responses)
        start += k
        nc = n_corr(k)
        self.rho_slice = slice(start, start + nc)
        rows, cols = np.tril_indices(k, -1)
        names.extend(f"rho_raw[{spec.responses[i]},{spec.responses[j]}]" for i, j in zip(rows, cols))
        start += nc
        self.n_full = start
        self.full_names = tuple(names)

        index = np.full(self.n_full, -1, dtype=np.int64)
        fixed = np.zeros(self.n_full)
        free_names: list[str] = []
        v = spec.variant
        nxt = 0

        def assign(j: int, name: str | None = None) -> None:
            nonlocal nxt
            index[j] = nxt
            free_names.append(name or names[j])
            nxt += 1

        for j in range(self.n_beta):
            assign(j)
        for j in range(self.disp_slice.start, self.disp_slice.stop):
            if v is Variant.FIXED_DISPERSION:
                fixed[j] = np.log(spec.dispersion_value)
            else:
                assign(j)
        if v is Variant.FIXED_VARIANCE:
            fixed[self.sd_slice] = np.log(spec.fixed_sd)
        elif v is Variant.COMMON_VARIANCE:
            shared = nxt
            free_names.append("log_sd")
            nxt += 1
            index[self.sd_slice] = shared
        else:
            for j in range(self.sd_slice.start, self.sd_slice.stop):
                assign(j)
        for j in range(self.rho_slice.start, self.rho_slice.stop):
            if v is Variant.RHO_ZERO:
                fixed[j] = 0.0
            else:
                assign(j)
        self.index = index
        self.fixed = fixed
        self.n_free = nxt
        self.free_names = tuple(free_names)
        self.frozen_mask = index < 0

    def expand(self, free: np.ndarray) -> np.ndarray:
        """Free vector -> full unconstrained vector."""
        free = np.asarray(free, dtype=float)
        if free.shape != (self.n_free,):
            raise ModelError(f"expected {self.n_free} free parameters, got shape {free.shape}")
        full = self.fixed.copy()
        live = self.index >= 0
        full[live] = free[self.index[live]]
        return full

    def reduce_gradient(self, grad_full: np.ndarray) -> np.ndarray:
        """Chain rule through ``expand``: sum full-slot gradients into free slots."""
        live = self.index >= 0
        return np.bincount(self.index[live], weights=grad_full[live], minlength=self.n_free)

    def restrict(self, full: np.ndarray) -> np.ndarray:
        """Full vector -> free vector; tied slots take the mean of their sources."""
        full = np.asarray(full, dtype=float)
        live = self.index >= 0
        idx = self.index[live]
        vals = full[live]
        counts = np.bincount(idx, minlength=self.n_free)
        mean = np.bincount(idx, weights=vals, minlength=self.n_free) / counts
        # the first source is returned as is when all tied sources agree
        first = np.empty(self.n_free)
        first[idx[::-1]] = vals[::-1]
        agree = np.bincount(idx, weights=(vals != first[idx]).astype(float), minlength=self.n_free) == 0
        return np.where(agree, first, mean)

    def jacobian(self) -> np.ndarray:
        """d full / d free as a dense 0/1 matrix."""
        J = np.zeros((self.n_full, self.n_free))
        live = np.flatnonzero(self.index >= 0)
        J[live, self.index[live]] = 1.0
        return J


def count_np(spec: ModelSpec) -> int:
    """Number of free parameters after variant freezing."""
    return spec.layout.n_free


@dataclass(frozen=True)
class NaturalParams:
    """Parameters on their natural scale."""

    beta: tuple[np.ndarray, ...]
    disp: np.ndarray | None
    sd: np.ndarray
    corr: np.ndarray

    @property
    def cov(self) -> np.ndarray:
        return self.corr * np.outer(self.sd, self.sd)


@dataclass(frozen=True)
class Theta:
    """A point in parameter space: a spec plus its full unconstrained vector."""

    spec: ModelSpec
    full: np.ndarray = field(repr=False)

    def __post_init__(self):
        full = np.array(self.full, dtype=float)
        if full.shape != (self.spec.layout.n_full,):
            raise ModelError("full parameter vector has the wrong length")
        full.setflags(write=False)
        object.__setattr__(self, "full", full)

    @classmethod
    def from_free(cls, spec: ModelSpec, free: np.ndarray) -> "Theta":
        return cls(spec, spec.layout.expand(free))

    @property
    def layout(self) -> ParameterLayout:
        return self.spec.layout

    @property
    def free(self) -> np.ndarray:
        return self.layout.restrict(self.full)

    @property
    def frozen_mask(self) -> np.ndarray:
        return self.layout.frozen_mask

    @property
    def beta(self) -> tuple[np.ndarray, ...]:
        return tuple(self.full[s] for s in self.layout.beta_slices)

    @property
    def log_disp(self) -> np.ndarray:
        return self.full[self.layout.disp_slice]

    @property
    def log_sd(self) -> np.ndarray:
        return self.full[self.layout.sd_slice]

    @property
    def rho_raw(self) -> np.ndarray:
        return self.full[self.layout.rho_slice]

    def named(self) -> dict[str, float]:
        return dict(zip(self.layout.full_names, map(float, self.full)))


def pack(natural: NaturalParams, spec: ModelSpec) -> Theta:
    """Natural-scale parameters -> ``Theta``.

    Frozen slots take their variant value regardless of ``natural``; under
    common variance the shared log-SD is the mean of the k log-SDs.
    """
    lay = spec.layout
    full = np.zeros(lay.n_full)
    if len(natural.beta) != spec.k:
        raise ModelError("need one beta block per response")
    for s, b in zip(lay.beta_slices, natural.beta):
        b = np.asarray(b, dtype=float)
        if b.shape != (s.stop - s.start,):
            raise ModelError("beta block has the wrong length")
        full[s] = b
    if spec.family.has_dispersion:
        disp = np.asarray(natural.disp, dtype=float)
        if disp.shape != (spec.k,) or not np.all(disp > 0):
            raise ModelError("dispersions must be k positive numbers")
        full[lay.disp_slice] = np.log(disp)
    sd = np.asarray(natural.sd, dtype=float)
    if sd.shape != (spec.k,) or not np.all(sd > 0):
        raise ModelError("random-effect SDs must be k positive numbers")
    full[lay.sd_slice] = np.log(sd)
    full[lay.rho_slice] = rho_raw_from_corr(np.asarray(natural.corr, dtype=float))
    return Theta.from_free(spec, lay.restrict(full))


def unpack(theta: Theta) -> NaturalParams:
    spec = theta.spec
    disp = np.exp(theta.log_disp) if spec.family.has_dispersion else None
    return NaturalParams(
        beta=theta.beta,
        disp=disp,
        sd=np.exp(theta.log_sd),
        corr=build_corr(theta.rho_raw, spec.k),
    )


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubjectBlock:
    """One subject: k counts and the k design rows."""

    y: np.ndarray
    x: tuple[np.ndarray, ...]


def _check_rank(X: np.ndarray, name: str) -> None:
    s = np.linalg.svd(X, compute_uv=False)
    if s.size == 0 or s[-1] <= 1e-10 * s[0] or X.shape[0] < X.shape[1]:
        raise ModelError(f"design matrix for response {name!r} is rank deficient")


@dataclass(frozen=True, eq=False)
class Dataset:
    """N subjects by k count responses with per-response design matrices.

    ``columns`` keeps the raw covariate columns by name so the dataset can be
    written back out; ``X[r]`` has the intercept prepended.
    """

    spec: ModelSpec
    subject_id: np.ndarray
    Y: np.ndarray
    columns: Mapping[str, np.ndarray]

    def __post_init__(self):
        Y = np.asarray(self.Y)
        if Y.ndim != 2 or Y.shape[1] != self.spec.k:
            raise ModelError(f"Y must be N x {self.spec.k}")
        if Y.shape[0] < 2:
            raise ModelError("need at least two subjects")
        Yf = np.asarray(Y, dtype=float)
        if not np.all(np.isfinite(Yf)) or np.any(Yf < 0) or np.any(Yf != np.round(Yf)):
            raise ModelError("responses must be finite non-negative integers")
        Y = Yf.astype(np.int64)
        Y.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        cols = {}
        for name in self.spec.covariate_columns:
            if name not in self.columns:
                raise ModelError(f"covariate column {name!r} not found")
            c = np.asarray(self.columns[name], dtype=float)
            if c.shape != (Y.shape[0],) or not np.all(np.isfinite(c)):
                raise ModelError(f"covariate column {name!r} must be N finite numbers")
            c.setflags(write=False)
            cols[name] = c
        object.__setattr__(self, "columns", cols)
        sid = np.asarray(
            self.subject_id if self.subject_id is not None else np.arange(1, Y.shape[0] + 1)
        )
        if sid.shape != (Y.shape[0],):
            raise ModelError("subject_id must have one entry per subject")
        object.__setattr__(self, "subject_id", sid)
        for r, X in zip(self.spec.responses, self.X):
            _check_rank(X, r)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @cached_property
    def X(self) -> tuple[np.ndarray, ...]:
        out = []
        for cs in self.spec.covariates:
            X = np.empty((self.n, 1 + len(cs)))
            X[:, 0] = 1.0
            for j, c in enumerate(cs):
                X[:, j + 1] = self.columns[c]
            X.setflags(write=False)
            out.append(X)
        return tuple(out)

    def subject(self, i: int) -> SubjectBlock:
        return SubjectBlock(y=self.Y[i].copy(), x=tuple(X[i].copy() for X in self.X))

    def subset(self, rows: Sequence[int] | np.ndarray) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            spec=self.spec,
            subject_id=self.subject_id[rows],
            Y=self.Y[rows],
            columns={k: v[rows] for k, v in self.columns.items()},
        )

    def with_spec(self, spec: ModelSpec) -> "Dataset":
        """Same data under another spec (responses/covariates must resolve)."""
        if spec.responses != self.spec.responses:
            raise ModelError("with_spec cannot change the responses")
        return Dataset(spec=spec, subject_id=self.subject_id, Y=self.Y, columns=self.columns)

    def equals(self, other: "Dataset") -> bool:
        """Bitwise equality of all arrays and the spec."""
        return (
            self.spec == other.spec
            and np.array_equal(self.subject_id.astype(str), other.subject_id.astype(str))
            and np.array_equal(self.Y, other.Y)
            and self.columns.keys() == other.columns.keys()
            and all(
                np.array_equal(self.columns[k].view(np.int64), other.columns[k].view(np.int64))
                for k in self.columns
            )
        )


def dataset_from_arrays(
    spec: ModelSpec,
    Y: np.ndarray,
    columns: Mapping[str, np.ndarray] | None = None,
    subject_id: np.ndarray | None = None,
) -> Dataset:
    return Dataset(spec=spec, subject_id=subject_id, Y=np.asarray(Y), columns=dict(columns or {}))
