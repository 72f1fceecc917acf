"""Hyperprior settings and method-of-moments Beta priors for proportions."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .data_model import ProportionPrior, ValidationError

__all__ = ["HyperPriors", "beta_from_moments", "beta_from_counts", "beta_from_range"]


@dataclass(frozen=True)
class HyperPriors:
    """Priors on the pooled-effect and heterogeneity parameters.

    Locations get normal priors, between-study standard deviations get
    half-normal priors parameterised by the scale of the underlying normal.
    Defaults are deliberately vague.
    """

    d_pos_mean: float = 0.0
    d_pos_sd: float = 100.0
    tau_pos_halfnormal_sd: float = 10.0
    mu_beta_mean: float = 0.0
    mu_beta_sd: float = 100.0
    tau_beta_halfnormal_sd: float = 10.0

    def __post_init__(self):
        for name in ("d_pos_sd", "tau_pos_halfnormal_sd", "mu_beta_sd", "tau_beta_halfnormal_sd"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be > 0, got {v}")


def beta_from_moments(mean: float, variance: float) -> ProportionPrior:
    """Beta(alpha, beta) with the given mean and variance.

    Solves mean = a/(a+b) and var = m(1-m)/(a+b+1), so a = m*s and
    b = (1-m)*s with s = m(1-m)/var - 1.
    """
    if not (0.0 < mean < 1.0):
        raise ValidationError(f"mean must lie strictly in (0, 1), got {mean}")
    if not (math.isfinite(variance) and variance > 0):
        raise ValidationError(f"variance must be > 0, got {variance}")
    if variance >= mean * (1.0 - mean):
        raise ValidationError(
            f"variance too large for beta: need var < mean*(1-mean) = {mean * (1 - mean):.6g}"
        )
    s = mean * (1.0 - mean) / variance - 1.0
    return ProportionPrior(mean * s, (1.0 - mean) * s)


def beta_from_counts(n_negative: int, n_known: int) -> ProportionPrior:
    """Beta prior from an observed count: p = k/n with binomial variance p(1-p)/n."""
    if n_known <= 0:
        raise ValidationError(f"n_known must be > 0, got {n_known}")
    if not (0 < n_negative < n_known):
        raise ValidationError(
            f"degenerate proportion: n_negative={n_negative} of n_known={n_known}"
        )
    p = n_negative / n_known
    return beta_from_moments(p, p * (1.0 - p) / n_known)


def beta_from_range(low: float, high: float) -> ProportionPrior:
    """Beta prior from a plausible range read as mean +/- 2 standard deviations."""
    if not (0.0 < low < high < 1.0):
        raise ValidationError(f"need 0 < low < high < 1, got ({low}, {high})")
    mean = 0.5 * (low + high)
    sd = (high - low) / 4.0
    return beta_from_moments(mean, sd * sd)
