"""Synthetic 12-lead ECG cohorts with disease-conditioned morphology.

Beats are sums of Gaussian wavelets (P, Q, R, S, T) on a per-beat phase
axis, projected to 12 leads through fixed per-wave projection vectors.
Diseases perturb morphology (rate, T-wave timing, ST offset, amplitude,
noise) in proportion to their effect_strength; a strength of zero is a
pure labeling change, leaving waveforms untouched. Everything is driven
by per-patient counter-based RNG streams, so regeneration from the same
config is byte-identical and patients are independent of each other.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cohort import EcgMeta, Episode, EpisodeKind, QualityFlags, Sex
from .errors import ConfigInvalid
from .icd import IcdCode, parse_code
from .signals import N_LEADS, EcgTrace

WAVES = ("P", "Q", "R", "S", "T")

# Per-wave 12-lead projection weights (rows: P, Q, R, S, T, ST segment).
# Loosely modeled on standard lead morphology: dominant limb lead II,
# inverted aVR, V1->V6 R-wave progression. Fixed constants so generated
# examples are reproducible across machines.
LEAD_PROJECTION = np.array(
    [
        # I     II    III   aVR   aVL   aVF   V1    V2    V3    V4    V5    V6
        [0.7, 1.0, 0.4, -0.8, 0.3, 0.7, 0.3, 0.4, 0.5, 0.6, 0.7, 0.7],   # P
        [0.8, 1.0, 0.5, -0.9, 0.4, 0.7, -0.6, -0.4, 0.2, 0.8, 1.0, 0.9],  # Q
        [0.8, 1.0, 0.5, -0.9, 0.4, 0.7, -0.5, -0.2, 0.4, 0.9, 1.1, 1.0],  # R
        [0.8, 1.0, 0.5, -0.9, 0.4, 0.7, 0.9, 1.1, 0.8, 0.4, 0.2, 0.2],   # S
        [0.6, 1.0, 0.5, -0.8, 0.2, 0.7, 0.2, 0.7, 0.9, 0.9, 0.8, 0.7],   # T
        [0.6, 1.0, 0.5, -0.8, 0.2, 0.7, 0.4, 0.8, 0.9, 0.9, 0.8, 0.7],   # ST
    ],
    dtype=np.float64,
)

_EPOCH_2020 = 1577836800  # 2020-01-01T00:00:00Z
_MAX_PER_BLOCK = 99       # id scheme packs child counts into decimal blocks


@dataclass(frozen=True)
class WaveletParam:
    """Amplitude (mV), beat-phase center, and width for each of P,Q,R,S,T."""

    amplitudes_mv: tuple[float, float, float, float, float]
    centers: tuple[float, float, float, float, float]
    widths: tuple[float, float, float, float, float]

    def __post_init__(self):
        for name, values in (("amplitudes", self.amplitudes_mv),
                             ("centers", self.centers), ("widths", self.widths)):
            if len(values) != len(WAVES):
                raise ConfigInvalid(f"{name} must give one value per wave")
        if any(b <= 0 for b in self.widths):
            raise ConfigInvalid("wave widths must be positive")
        if list(self.centers) != sorted(self.centers) or len(set(self.centers)) != len(WAVES):
            raise ConfigInvalid("wave centers must be strictly increasing P<Q<R<S<T")


HEALTHY_BEAT = WaveletParam(
    amplitudes_mv=(0.12, -0.10, 1.20, -0.25, 0.30),
    centers=(0.16, 0.42, 0.46, 0.50, 0.72),
    widths=(0.025, 0.010, 0.012, 0.012, 0.045),
)


@dataclass(frozen=True)
class EffectProfile:
    """Morphology deltas applied at effect_strength 1; identity by default."""

    hr_mult: float = 1.0
    t_shift: float = 0.0
    st_offset_mv: float = 0.0
    amp_scale: float = 1.0
    extra_noise_mv: float = 0.0

    def scaled(self, strength: float) -> "EffectProfile":
        return EffectProfile(
            hr_mult=1.0 + (self.hr_mult - 1.0) * strength,
            t_shift=self.t_shift * strength,
            st_offset_mv=self.st_offset_mv * strength,
            amp_scale=1.0 + (self.amp_scale - 1.0) * strength,
            extra_noise_mv=self.extra_noise_mv * strength,
        )


@dataclass(frozen=True)
class DiseaseSpec:
    """One code with its population prevalence and waveform effect."""

    code: IcdCode
    prevalence: float
    effect: EffectProfile = field(default_factory=EffectProfile)
    effect_strength: float = 1.0
    age_slope: float = 0.0  # logit units per year, anchored at the age midpoint

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise ConfigInvalid(f"{self.code}: prevalence must be in (0,1)")
        if self.effect_strength < 0:
            raise ConfigInvalid(f"{self.code}: effect_strength must be >= 0")

    @property
    def is_null(self) -> bool:
        return self.effect_strength == 0.0


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int
    diseases: tuple[DiseaseSpec, ...]
    episodes_per_patient: tuple[int, int] = (1, 2)
    ecgs_per_episode: tuple[int, int] = (1, 2)
    age_years: tuple[float, float] = (18.0, 90.0)
    male_fraction: float = 0.5
    heart_rate_bpm: tuple[float, float] = (55.0, 85.0)
    noise_std_mv: float = 0.05
    rate_hz: float = 500.0
    duration_s: float = 10.0
    seed: int = 0
    param_jitter: float = 0.05
    beat: WaveletParam = HEALTHY_BEAT

    def __post_init__(self):
        if self.n_patients < 1:
            raise ConfigInvalid("n_patients must be >= 1")
        for name, (lo, hi) in (("episodes_per_patient", self.episodes_per_patient),
                               ("ecgs_per_episode", self.ecgs_per_episode)):
            if not 1 <= lo <= hi <= _MAX_PER_BLOCK:
                raise ConfigInvalid(f"{name} must satisfy 1 <= lo <= hi <= {_MAX_PER_BLOCK}")
        for name, (lo, hi) in (("age_years", self.age_years),
                               ("heart_rate_bpm", self.heart_rate_bpm)):
            if not lo <= hi:
                raise ConfigInvalid(f"{name} range is empty")
        if not 0.0 <= self.male_fraction <= 1.0:
            raise ConfigInvalid("male_fraction must be in [0,1]")
        if self.noise_std_mv < 0 or self.param_jitter < 0:
            raise ConfigInvalid("noise_std_mv and param_jitter must be >= 0")
        if self.rate_hz <= 0 or self.duration_s <= 0:
            raise ConfigInvalid("rate_hz and duration_s must be positive")
        seen = set()
        for d in self.diseases:
            if d.code.text in seen:
                raise ConfigInvalid(f"duplicate disease code {d.code}")
            seen.add(d.code.text)

    @property
    def n_samples(self) -> int:
        return round(self.rate_hz * self.duration_s)

    def to_json(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "diseases": [
                {
                    "code": d.code.text,
                    "prevalence": d.prevalence,
                    "effect": {
                        "hr_mult": d.effect.hr_mult,
                        "t_shift": d.effect.t_shift,
                        "st_offset_mv": d.effect.st_offset_mv,
                        "amp_scale": d.effect.amp_scale,
                        "extra_noise_mv": d.effect.extra_noise_mv,
                    },
                    "effect_strength": d.effect_strength,
                    "age_slope": d.age_slope,
                }
                for d in self.diseases
            ],
            "episodes_per_patient": list(self.episodes_per_patient),
            "ecgs_per_episode": list(self.ecgs_per_episode),
            "age_years": list(self.age_years),
            "male_fraction": self.male_fraction,
            "heart_rate_bpm": list(self.heart_rate_bpm),
            "noise_std_mv": self.noise_std_mv,
            "rate_hz": self.rate_hz,
            "duration_s": self.duration_s,
            "seed": self.seed,
            "param_jitter": self.param_jitter,
            "beat": {
                "amplitudes_mv": list(self.beat.amplitudes_mv),
                "centers": list(self.beat.centers),
                "widths": list(self.beat.widths),
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        beat = obj.get("beat")
        return cls(
            n_patients=int(obj["n_patients"]),
            diseases=tuple(
                DiseaseSpec(
                    code=parse_code(d["code"]),
                    prevalence=float(d["prevalence"]),
                    effect=EffectProfile(**d.get("effect", {})),
                    effect_strength=float(d.get("effect_strength", 1.0)),
                    age_slope=float(d.get("age_slope", 0.0)),
                )
                for d in obj["diseases"]
            ),
            episodes_per_patient=tuple(obj.get("episodes_per_patient", (1, 2))),
            ecgs_per_episode=tuple(obj.get("ecgs_per_episode", (1, 2))),
            age_years=tuple(obj.get("age_years", (18.0, 90.0))),
            male_fraction=float(obj.get("male_fraction", 0.5)),
            heart_rate_bpm=tuple(obj.get("heart_rate_bpm", (55.0, 85.0))),
            noise_std_mv=float(obj.get("noise_std_mv", 0.05)),
            rate_hz=float(obj.get("rate_hz", 500.0)),
            duration_s=float(obj.get("duration_s", 10.0)),
            seed=int(obj.get("seed", 0)),
            param_jitter=float(obj.get("param_jitter", 0.05)),
            beat=WaveletParam(
                amplitudes_mv=tuple(beat["amplitudes_mv"]),
                centers=tuple(beat["centers"]),
                widths=tuple(beat["widths"]),
            ) if beat else HEALTHY_BEAT,
        )


def load_synth_config(path) -> SynthConfig:
    with open(path) as f:
        return SynthConfig.from_json(json.load(f))


def save_synth_config(config: SynthConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config.to_json(), f, indent=1, sort_keys=True)
        f.write("\n")


def synth_beat(params: WaveletParam, rate_hz: float, period_s: float) -> np.ndarray:
    """One beat: y(t) = sum_w a_w exp(-(t/period - theta_w)^2 / (2 b_w^2))."""
    n = round(rate_hz * period_s)
    phase = np.arange(n) / (rate_hz * period_s)
    y = np.zeros(n)
    for a, theta, b in zip(params.amplitudes_mv, params.centers, params.widths):
        y += a * np.exp(-((phase - theta) ** 2) / (2.0 * b * b))
    return y


def _wave_bank(params: WaveletParam, st_offset_mv: float,
               rate_hz: float, period_s: float) -> np.ndarray:
    """Per-wave periodic waveforms (6, n): P,Q,R,S,T plus the ST bump.

    Each wave is summed over phase shifts {-1, 0, +1} so tiling beats
    end to end stays continuous at beat boundaries.
    """
    n = round(rate_hz * period_s)
    phase = np.arange(n) / (rate_hz * period_s)
    st_center = (params.centers[3] + params.centers[4]) / 2.0
    st_width = 0.06
    amps = list(params.amplitudes_mv) + [st_offset_mv]
    centers = list(params.centers) + [st_center]
    widths = list(params.widths) + [st_width]
    bank = np.zeros((len(amps), n))
    for i, (a, theta, b) in enumerate(zip(amps, centers, widths)):
        for d in (-1.0, 0.0, 1.0):
            bank[i] += a * np.exp(-((phase - theta - d) ** 2) / (2.0 * b * b))
    return bank


@dataclass(frozen=True)
class PatientRecord:
    patient_id: int
    traces: tuple[EcgTrace, ...]
    episodes: tuple[Episode, ...]


@dataclass(frozen=True)
class Cohort:
    traces: tuple[EcgTrace, ...]
    episodes: tuple[Episode, ...]

    @property
    def ecgs(self) -> tuple[EcgMeta, ...]:
        return tuple(t.meta for t in self.traces)


def _disease_probability(d: DiseaseSpec, age: float, age_mid: float) -> float:
    if d.age_slope == 0.0:
        return d.prevalence
    logit = math.log(d.prevalence / (1.0 - d.prevalence)) + d.age_slope * (age - age_mid)
    return 1.0 / (1.0 + math.exp(-logit))


def synth_patient(config: SynthConfig, patient_index: int) -> PatientRecord:
    """Generate one patient's episodes and traces from an isolated stream.

    The stream is keyed by (cohort seed, patient index), so patients can
    be generated in any order or in parallel without changing output.
    The draw order below is fixed and is part of the format.
    """
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, patient_index)))
    patient_id = patient_index + 1

    age = float(np.float32(rng.uniform(*config.age_years)))
    sex = Sex.MALE if rng.random() < config.male_fraction else Sex.FEMALE
    age_mid = (config.age_years[0] + config.age_years[1]) / 2.0
    has = [rng.random() < _disease_probability(d, age, age_mid) for d in config.diseases]
    active = [d.effect.scaled(d.effect_strength)
              for d, h in zip(config.diseases, has) if h and not d.is_null]

    heart_rate = rng.uniform(*config.heart_rate_bpm)
    jitter = config.param_jitter
    amps = np.array(config.beat.amplitudes_mv) * rng.normal(1.0, jitter, len(WAVES))
    widths = np.maximum(np.array(config.beat.widths) * rng.normal(1.0, jitter, len(WAVES)),
                        0.004)
    centers = np.array(config.beat.centers) + rng.normal(0.0, jitter * 0.05, len(WAVES))

    st_offset = 0.0
    noise_std = config.noise_std_mv
    for eff in active:
        heart_rate *= eff.hr_mult
        centers[4] += eff.t_shift
        st_offset += eff.st_offset_mv
        amps *= eff.amp_scale
        noise_std += eff.extra_noise_mv
    centers = np.minimum.accumulate(np.minimum(centers[::-1], 0.97))[::-1]
    centers += np.arange(len(WAVES)) * 1e-9  # keep strict ordering after clipping
    params = WaveletParam(
        amplitudes_mv=tuple(amps), centers=tuple(centers), widths=tuple(widths)
    )

    period_s = 60.0 / heart_rate
    bank = _wave_bank(params, st_offset, config.rate_hz, period_s)
    lead_beat = LEAD_PROJECTION.T @ bank  # (12, beat_samples)
    n_samples = config.n_samples
    reps = -(-n_samples // lead_beat.shape[1])
    lead_train = np.tile(lead_beat, (1, reps))[:, :n_samples]

    codes = tuple(sorted((d.code for d, h in zip(config.diseases, has) if h),
                         key=lambda c: c.text))
    episodes = []
    traces = []
    n_episodes = int(rng.integers(config.episodes_per_patient[0],
                                  config.episodes_per_patient[1] + 1))
    for j in range(1, n_episodes + 1):
        episode_id = patient_id * 100 + j
        kind = EpisodeKind.ED if rng.random() < 0.5 else EpisodeKind.HOSPITALIZATION
        start = _EPOCH_2020 + int(rng.integers(0, 365 * 24 * 3600))
        duration = int(rng.integers(3600, 72 * 3600))
        episodes.append(
            Episode(
                episode_id=episode_id,
                patient_id=patient_id,
                kind=kind,
                start_time=start,
                end_time=start + duration,
                codes=codes,
            )
        )
        n_ecgs = int(rng.integers(config.ecgs_per_episode[0],
                                  config.ecgs_per_episode[1] + 1))
        for i in range(1, n_ecgs + 1):
            acquired = start + int(rng.integers(0, duration + 1))
            phase_shift = int(rng.integers(0, lead_beat.shape[1]))
            signal = np.roll(lead_train, phase_shift, axis=1)
            if noise_std > 0:
                signal = signal + rng.normal(0.0, noise_std, signal.shape)
            meta = EcgMeta(
                ecg_id=episode_id * 100 + i,
                patient_id=patient_id,
                acquired_at=acquired,
                age_years=age,
                sex=sex,
                quality=QualityFlags(),
                has_device=False,
            )
            traces.append(
                EcgTrace(
                    meta=meta,
                    samples=signal.astype(np.float32),
                    sampling_rate_hz=config.rate_hz,
                    duration_s=config.duration_s,
                )
            )
    return PatientRecord(patient_id=patient_id, traces=tuple(traces),
                         episodes=tuple(episodes))


def synth_cohort(config: SynthConfig) -> Cohort:
    """All patients' traces and episodes, ordered by patient then draw order."""
    traces: list[EcgTrace] = []
    episodes: list[Episode] = []
    for index in range(config.n_patients):
        record = synth_patient(config, index)
        traces.extend(record.traces)
        episodes.extend(record.episodes)
    return Cohort(traces=tuple(traces), episodes=tuple(episodes))
