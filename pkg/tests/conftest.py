import numpy as np
import pytest

from biomarker_meta.data_model import (
    EffectEstimate,
    MetaDataset,
    ProportionPrior,
    StudyRecord,
    load_bundled,
)
from biomarker_meta.mcmc import SamplerConfig


@pytest.fixture(scope="session")
def os_main():
    return load_bundled("mcrc_os_main")


@pytest.fixture(scope="session")
def pfs_main():
    return load_bundled("mcrc_pfs_main")


@pytest.fixture(scope="session")
def os_sens():
    return load_bundled("mcrc_os_sens")


@pytest.fixture(scope="session")
def pfs_sens():
    return load_bundled("mcrc_pfs_sens")


def micro_config(seed=1, chains=4, burn=1500, samples=4000):
    """Small but serviceable run for structural and distributional smoke tests."""
    return SamplerConfig(n_chains=chains, burn_in=burn, samples=samples, seed=seed)


def tiny_dataset():
    """Two positive-only studies, one both, one mixed: every block but neg-only."""
    return MetaDataset.from_studies(
        [
            StudyRecord("alpha", positive=EffectEstimate(-0.20, 0.10)),
            StudyRecord("bravo", positive=EffectEstimate(-0.10, 0.15)),
            StudyRecord(
                "charlie",
                positive=EffectEstimate(-0.25, 0.12),
                negative=EffectEstimate(0.05, 0.14),
            ),
            StudyRecord(
                "delta",
                mixed=EffectEstimate(-0.12, 0.08),
                proportion_prior=ProportionPrior(28.0, 38.67),
            ),
        ]
    )


def rng_for(seed):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
