"""Locally sparse varying-coefficient mixed models.

Penalized kernel-smoothed estimation of time-varying regression effects for
longitudinal data with within-subject dependence, EBIC tuning, cluster
bootstrap sup-t confidence bands, and the synthetic-data generators used for
benchmarking.
"""

from lsvcmm._core import (
    __version__,
    bootstrap_bands,
    clr_transform,
    covariance_matrix,
    evaluate,
    fit,
    kernel_weight,
    penalty_value,
    prox_sgl,
    quasi_loglik,
    simulate,
    update_covariance,
)

__all__ = [
    "__version__",
    "bootstrap_bands",
    "clr_transform",
    "covariance_matrix",
    "evaluate",
    "fit",
    "kernel_weight",
    "penalty_value",
    "prox_sgl",
    "quasi_loglik",
    "simulate",
    "update_covariance",
]
