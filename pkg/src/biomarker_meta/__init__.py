"""Bayesian random-effects meta-analysis of biomarker subgroup effects.

Pools a treatment effect for the biomarker-positive subgroup from trials that
report biomarker-positive, biomarker-negative and mixed-population results,
with a built-in Metropolis-within-Gibbs sampler, an exponential survival
trial simulator with a Cox fitter, and a simulation-study harness.
"""

__version__ = "0.1.0"

from .data_model import (
    EffectEstimate,
    MetaDataset,
    ProportionPrior,
    StudyRecord,
    classify_blocks,
    load_bundled,
    parse_dataset,
    serialize_dataset,
)
from .mcmc import ChainSet, PosteriorSummary, SamplerConfig, run_sampler, summarize
from .models import BoundModel, ModelKind, bind, conjugate_updates, fit, log_joint
from .priors import HyperPriors, beta_from_counts, beta_from_moments, beta_from_range
from .simstudy import ScenarioSpec, generate_meta_replication, run_scenario, scenario_table
from .survival import CoxFit, GenerationParams, TrialIPD, fit_cox, generate_trial, make_study_record

__all__ = [
    "__version__",
    "EffectEstimate",
    "ProportionPrior",
    "StudyRecord",
    "MetaDataset",
    "parse_dataset",
    "serialize_dataset",
    "classify_blocks",
    "load_bundled",
    "HyperPriors",
    "beta_from_moments",
    "beta_from_counts",
    "beta_from_range",
    "SamplerConfig",
    "ChainSet",
    "PosteriorSummary",
    "run_sampler",
    "summarize",
    "ModelKind",
    "BoundModel",
    "bind",
    "log_joint",
    "conjugate_updates",
    "fit",
    "TrialIPD",
    "CoxFit",
    "GenerationParams",
    "generate_trial",
    "fit_cox",
    "make_study_record",
    "ScenarioSpec",
    "scenario_table",
    "generate_meta_replication",
    "run_scenario",
]
