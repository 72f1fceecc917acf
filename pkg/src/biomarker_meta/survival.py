"""Exponential survival-trial generation and Cox proportional-hazards fitting.

Trials have two biomarker strata sharing one baseline hazard. Within a
stratum, treated subjects' event times are exponential with rate
``lambda * exp(delta)`` (proportional hazards on the logHR scale), so the
stratum Cox coefficient estimates ``delta`` directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data_model import ProportionPrior, StudyRecord, ValidationError
from .priors import beta_from_counts

__all__ = [
    "TrialIPD",
    "CoxFit",
    "GenerationParams",
    "generate_trial",
    "cox_partial_loglik",
    "fit_cox",
    "make_study_record",
    "CoxError",
]


class CoxError(RuntimeError):
    """Degenerate design or likelihood; the fit cannot proceed."""


@dataclass(frozen=True)
class GenerationParams:
    """Constants for one simulated trial.

    ``delta_pos``/``delta_neg`` are the true stratum log hazard ratios;
    ``p_neg_prior`` is the distribution the trial's biomarker-negative
    fraction is drawn from (once per trial).
    """

    delta_pos: float
    delta_neg: float
    n_participants: int = 350
    p_trt: float = 0.5
    baseline_rate: float = 0.15
    p_neg_prior: ProportionPrior = field(default_factory=lambda: ProportionPrior(9.2, 13.8))
    censor_time: float | None = None

    def __post_init__(self):
        if self.n_participants < 4:
            raise ValidationError("n_participants must be >= 4")
        if not (0.0 < self.p_trt < 1.0):
            raise ValidationError("p_trt must lie strictly in (0, 1)")
        if not (math.isfinite(self.baseline_rate) and self.baseline_rate > 0):
            raise ValidationError("baseline_rate must be > 0")
        if self.censor_time is not None and self.censor_time <= 0:
            raise ValidationError("censor_time must be > 0 when set")


@dataclass(frozen=True)
class TrialIPD:
    """Individual participant data for one trial."""

    time: np.ndarray
    event: np.ndarray
    trt: np.ndarray
    biomarker_negative: np.ndarray

    def __post_init__(self):
        n = len(self.time)
        for name in ("event", "trt", "biomarker_negative"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"column '{name}' length mismatch")
        if np.any(self.time <= 0):
            raise ValidationError("all survival times must be > 0")

    @property
    def n(self) -> int:
        return len(self.time)

    def stratum(self, negative: bool) -> "TrialIPD":
        mask = self.biomarker_negative == (1 if negative else 0)
        return TrialIPD(
            self.time[mask], self.event[mask], self.trt[mask], self.biomarker_negative[mask]
        )


@dataclass(frozen=True)
class CoxFit:
    coefficients: np.ndarray
    standard_errors: np.ndarray
    converged: bool
    iterations: int
    loglik: float


def generate_trial(params: GenerationParams, rng: np.random.Generator) -> TrialIPD:
    """Simulate one trial's IPD.

    Draws the biomarker-negative fraction once from its prior, assigns arm
    and biomarker status by independent Bernoulli draws, then samples
    exponential event times at rate ``lambda * exp(delta * trt)`` within each
    stratum. Administrative censoring applies only if configured.
    """
    n = params.n_participants
    p_neg = rng.beta(params.p_neg_prior.alpha, params.p_neg_prior.beta)
    negative = (rng.random(n) < p_neg).astype(np.int8)
    trt = (rng.random(n) < params.p_trt).astype(np.int8)
    delta = np.where(negative == 1, params.delta_neg, params.delta_pos)
    rate = params.baseline_rate * np.exp(delta * trt)
    time = rng.exponential(1.0) / rate if n == 0 else rng.exponential(1.0, size=n) / rate
    event = np.ones(n, dtype=np.int8)
    if params.censor_time is not None:
        event = (time <= params.censor_time).astype(np.int8)
        time = np.minimum(time, params.censor_time)
    return TrialIPD(time=time, event=event, trt=trt, biomarker_negative=negative)


def _design_matrix(ipd: TrialIPD, covariates) -> np.ndarray:
    cols = []
    for name in covariates:
        if name == "trt":
            cols.append(ipd.trt.astype(float))
        elif name == "biomarker":
            cols.append(ipd.biomarker_negative.astype(float))
        else:
            raise ValidationError(f"unknown covariate '{name}' (use 'trt' and/or 'biomarker')")
    return np.column_stack(cols)


def cox_partial_loglik(ipd: TrialIPD, covariates, beta: np.ndarray) -> float:
    """Breslow partial log likelihood at ``beta`` (oracle-friendly evaluator)."""
    x = _design_matrix(ipd, covariates)
    ll, _, _ = _loglik_score_info(ipd.time, ipd.event.astype(bool), x, np.asarray(beta, float))
    return ll


def _loglik_score_info(time, event, x, beta):
    order = np.argsort(time, kind="stable")
    t = time[order]
    e = event[order]
    xs = x[order]
    eta = xs @ beta
    w = np.exp(eta)

    # reverse cumulative sums; ties share the risk set of the first tied index
    s0 = np.cumsum(w[::-1])[::-1]
    s1 = np.cumsum((w[:, None] * xs)[::-1], axis=0)[::-1]
    p = xs.shape[1]
    outer = w[:, None, None] * (xs[:, :, None] * xs[:, None, :])
    s2 = np.cumsum(outer[::-1], axis=0)[::-1]
    first = np.searchsorted(t, t, side="left")

    idx = first[e]
    ll = float(np.sum(eta[e] - np.log(s0[idx])))
    xbar = s1[idx] / s0[idx, None]
    score = xs[e].sum(axis=0) - xbar.sum(axis=0)
    info = (s2[idx] / s0[idx, None, None] - xbar[:, :, None] * xbar[:, None, :]).sum(axis=0)
    return ll, score, info


def fit_cox(ipd: TrialIPD, covariates=("trt",), max_iter: int = 50) -> CoxFit:
    """Newton-Raphson maximisation of the Breslow partial likelihood.

    Converges when the score's max component drops below 1e-8 or the relative
    log-likelihood change drops below 1e-10. Monotone likelihoods (separation)
    come back with ``converged=False`` rather than an exception; degenerate
    designs (no events, constant covariate) raise :class:`CoxError`.
    """
    x = _design_matrix(ipd, covariates)
    event = ipd.event.astype(bool)
    if event.sum() < 2:
        raise CoxError(f"need >= 2 events, got {int(event.sum())}")
    for j, name in enumerate(covariates):
        if np.ptp(x[:, j]) == 0.0:
            raise CoxError(f"covariate '{name}' is constant (degenerate design)")
    if x.shape[1] == 2 and np.ptp(x[:, 0] - x[:, 1]) == 0.0:
        raise CoxError("collinear design matrix")

    beta = np.zeros(x.shape[1])
    ll_old = -np.inf
    for it in range(1, max_iter + 1):
        ll, score, info = _loglik_score_info(ipd.time, event, x, beta)
        if not np.isfinite(ll):
            return CoxFit(beta, np.full_like(beta, np.nan), False, it, ll)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            return CoxFit(beta, np.full_like(beta, np.nan), False, it, ll)
        beta = beta + step
        if np.any(np.abs(beta) > 50.0):
            # drifting to infinity: monotone likelihood / complete separation
            return CoxFit(beta, np.full_like(beta, np.nan), False, it, ll)
        converged = bool(
            np.max(np.abs(score)) < 1e-8
            or (np.isfinite(ll_old) and abs(ll - ll_old) <= 1e-10 * max(1.0, abs(ll_old)))
        )
        if converged:
            ll, score, info = _loglik_score_info(ipd.time, event, x, beta)
            try:
                cov = np.linalg.inv(info)
            except np.linalg.LinAlgError:
                return CoxFit(beta, np.full_like(beta, np.nan), False, it, ll)
            se = np.sqrt(np.diag(cov))
            if not np.all(np.isfinite(se)):
                return CoxFit(beta, se, False, it, ll)
            # a score that vanished on a flat plateau (huge coefficient and
            # exploding SE) is monotone likelihood, not a real optimum
            if np.any((np.abs(beta) > 10.0) & (se > 50.0)):
                return CoxFit(beta, se, False, it, ll)
            return CoxFit(beta, se, True, it, ll)
        ll_old = ll
    return CoxFit(beta, np.full_like(beta, np.nan), False, max_iter, ll_old)


def make_study_record(
    ipd: TrialIPD,
    reporting: str,
    study_id: str,
    adjusted: bool = False,
) -> StudyRecord:
    """Reduce a trial's IPD to the study record its reporting pattern implies.

    ``reporting`` is one of ``positive`` (positive stratum only), ``negative``,
    ``both`` or ``mixed``. Mixed records carry the pooled-fit estimate
    (treatment-only, or treatment plus biomarker status when ``adjusted``)
    and a proportion prior built from the realised stratum counts.
    """

    def stratum_estimate(negative: bool):
        fit = fit_cox(ipd.stratum(negative), ("trt",))
        if not fit.converged:
            raise CoxError(f"{'negative' if negative else 'positive'} stratum fit did not converge")
        return fit.coefficients[0], fit.standard_errors[0]

    from .data_model import EffectEstimate  # local to avoid cycle in type checkers

    if reporting == "positive":
        y, se = stratum_estimate(False)
        return StudyRecord(study_id, positive=EffectEstimate(y, se))
    if reporting == "negative":
        y, se = stratum_estimate(True)
        return StudyRecord(study_id, negative=EffectEstimate(y, se))
    if reporting == "both":
        yp, sp = stratum_estimate(False)
        yn, sn = stratum_estimate(True)
        return StudyRecord(
            study_id, positive=EffectEstimate(yp, sp), negative=EffectEstimate(yn, sn)
        )
    if reporting == "mixed":
        covs = ("trt", "biomarker") if adjusted else ("trt",)
        fit = fit_cox(ipd, covs)
        if not fit.converged:
            raise CoxError("pooled fit did not converge")
        n_neg = int(ipd.biomarker_negative.sum())
        prior = beta_from_counts(n_neg, ipd.n)
        return StudyRecord(
            study_id,
            mixed=EffectEstimate(fit.coefficients[0], fit.standard_errors[0]),
            proportion_prior=prior,
        )
    raise ValidationError(f"unknown reporting pattern '{reporting}'")
