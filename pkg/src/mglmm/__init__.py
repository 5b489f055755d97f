"""Multivariate generalized linear mixed models for count responses.

Poisson, negative binomial (NB2) and mean-parametrized COM-Poisson
conditionals share a correlated normal random intercept per subject.  The
marginal likelihood is approximated per subject by the Laplace method and
maximized by quasi-Newton optimization with exact gradients.
"""

from .covariance import SigmaReport, build_corr, build_cov, report_sigma
from .dispersion import DispersionSummary, describe, di, gdi, spearman_matrix
from .families import CmpTruncation, cmp_logpmf_mean, logpmf, nb2_logpmf, poisson_logpmf
from .fitting import Algorithm, FitPlan, FitResult, Stage, fit_chain, initial_values, post_fit, staged_fit
from .laplace import LaplaceObjective, laplace_subject_loglik, total_nll
from .model import (
    Dataset,
    Family,
    ModelError,
    ModelSpec,
    NaturalParams,
    Theta,
    Variant,
    build_spec,
    count_np,
    dataset_from_arrays,
    pack,
    unpack,
)
from .simulate import CovariateLaw, SimConfig, empirical_check, simulate

__version__ = "0.1.0"
