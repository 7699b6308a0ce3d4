"""Shared fixtures: a small deterministic synthetic cohort and its linkage."""

import numpy as np
import pytest

from ecgscreen import synth as sy
from ecgscreen.cohort import apply_exclusions, link_ecgs
from ecgscreen.icd import parse_code


def small_synth_config(seed: int = 11, n_patients: int = 60) -> sy.SynthConfig:
    """Compact five-disease config: three waveform effects plus two nulls."""
    return sy.SynthConfig(
        n_patients=n_patients,
        seed=seed,
        rate_hz=100.0,
        duration_s=10.0,
        noise_std_mv=0.05,
        diseases=(
            sy.DiseaseSpec(
                code=parse_code("I481"), prevalence=0.25,
                effect=sy.EffectProfile(hr_mult=1.45),
            ),
            sy.DiseaseSpec(
                code=parse_code("I214"), prevalence=0.20,
                effect=sy.EffectProfile(t_shift=0.10, st_offset_mv=0.18),
            ),
            sy.DiseaseSpec(
                code=parse_code("I109"), prevalence=0.25,
                effect=sy.EffectProfile(amp_scale=1.5), age_slope=0.04,
            ),
            sy.DiseaseSpec(code=parse_code("N179"), prevalence=0.20,
                           effect_strength=0.0),
            sy.DiseaseSpec(code=parse_code("J189"), prevalence=0.15,
                           effect_strength=0.0),
        ),
    )


@pytest.fixture(scope="session")
def small_cohort():
    return sy.synth_cohort(small_synth_config())


@pytest.fixture(scope="session")
def small_linked(small_cohort):
    """(cohort, eligible metas, links) for the small fixture cohort."""
    metas = apply_exclusions([t.meta for t in small_cohort.traces])
    links = link_ecgs(metas, small_cohort.episodes)
    return small_cohort, metas, links


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
