"""ECG waveform traces, the ECGB binary container, and model-input normalization.

All waveforms are 12-lead, fixed-duration, 32-bit float millivolt
matrices. Normalization is a per-lead z-score with statistics fitted on
training rows only, so no information leaks from evaluation sets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cohort import EcgMeta, QualityFlags, Sex
from .errors import (
    BadMagic,
    InsufficientData,
    NonFiniteSample,
    TruncatedFile,
    VersionMismatch,
)

N_LEADS = 12
STD_FLOOR = 1e-6

_MAGIC = b"ECGB"
_VERSION = 1
_HEADER = struct.Struct("<4sHIBIf")          # magic, version, n_records, leads, samples, rate
_RECORD_FIXED = struct.Struct("<QQqfBBB")    # ecg_id, patient_id, acquired_at, age, sex, quality, device


@dataclass(frozen=True)
class EcgTrace:
    """One 12-lead trace with its metadata."""

    meta: EcgMeta
    samples: np.ndarray
    sampling_rate_hz: float
    duration_s: float

    def __post_init__(self):
        if self.samples.shape[0] != N_LEADS:
            raise ValueError(f"expected {N_LEADS} leads, got {self.samples.shape[0]}")
        expected = round(self.sampling_rate_hz * self.duration_s)
        if self.samples.shape[1] != expected:
            raise ValueError(
                f"expected {expected} samples per lead, got {self.samples.shape[1]}"
            )
        if self.samples.dtype != np.float32:
            raise ValueError("samples must be float32")
        if not np.isfinite(self.samples).all():
            raise NonFiniteSample(f"ECG {self.meta.ecg_id} contains non-finite samples")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class NormalizationStats:
    """Per-lead and demographic z-score statistics from the training subset."""

    lead_mean: np.ndarray   # (12,)
    lead_std: np.ndarray    # (12,), floored at STD_FLOOR
    age_mean: float
    age_std: float

    def to_json(self) -> dict:
        return {
            "lead_mean": [float(x) for x in self.lead_mean],
            "lead_std": [float(x) for x in self.lead_std],
            "age_mean": self.age_mean,
            "age_std": self.age_std,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NormalizationStats":
        return cls(
            lead_mean=np.asarray(obj["lead_mean"], dtype=np.float64),
            lead_std=np.asarray(obj["lead_std"], dtype=np.float64),
            age_mean=float(obj["age_mean"]),
            age_std=float(obj["age_std"]),
        )


@dataclass(frozen=True)
class ModelInput:
    signal: np.ndarray  # (12, T) normalized float32
    age_norm: float
    sex_bit: int


def fit_normalization(traces: Sequence[EcgTrace]) -> NormalizationStats:
    """Pooled per-lead mean/std over all samples of all training traces.

    Population (biased) variance; standard deviations are floored at
    STD_FLOOR so degenerate constant leads cannot blow up the division.
    """
    if len(traces) < 2:
        raise InsufficientData(f"need >= 2 traces to fit normalization, got {len(traces)}")
    total = np.zeros(N_LEADS)
    total_sq = np.zeros(N_LEADS)
    count = 0
    for trace in traces:
        x = trace.samples.astype(np.float64)
        total += x.sum(axis=1)
        total_sq += (x * x).sum(axis=1)
        count += trace.n_samples
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    ages = np.array([trace.meta.age_years for trace in traces], dtype=np.float64)
    return NormalizationStats(
        lead_mean=mean,
        lead_std=np.maximum(np.sqrt(var), STD_FLOOR),
        age_mean=float(ages.mean()),
        age_std=max(float(ages.std()), STD_FLOOR),
    )


def normalize(trace: EcgTrace, stats: NormalizationStats) -> ModelInput:
    """Z-score the signal per lead and the age; sex maps male->1, female->0."""
    signal = (trace.samples - stats.lead_mean[:, None]) / stats.lead_std[:, None]
    return ModelInput(
        signal=signal.astype(np.float32),
        age_norm=(trace.meta.age_years - stats.age_mean) / stats.age_std,
        sex_bit=trace.meta.sex.bit,
    )


def denormalize_signal(signal: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return signal * stats.lead_std[:, None] + stats.lead_mean[:, None]


# --- ECGB container ------------------------------------------------------

def write_container(traces: Sequence[EcgTrace], path) -> None:
    """Write traces to the ECGB binary format (little-endian, lead-major)."""
    if not traces:
        rate, n_samples = 0.0, 0
    else:
        rate = traces[0].sampling_rate_hz
        n_samples = traces[0].n_samples
        for trace in traces:
            if trace.sampling_rate_hz != rate or trace.n_samples != n_samples:
                raise ValueError("all traces in a container must share sampling geometry")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, len(traces), N_LEADS, n_samples, rate))
        for trace in traces:
            m = trace.meta
            f.write(
                _RECORD_FIXED.pack(
                    m.ecg_id,
                    m.patient_id,
                    m.acquired_at,
                    m.age_years,
                    m.sex.bit,
                    m.quality.to_bits(),
                    int(m.has_device),
                )
            )
            f.write(np.ascontiguousarray(trace.samples, dtype="<f4").tobytes())


def read_container(path) -> list[EcgTrace]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: shorter than the ECGB header")
    magic, version, n_records, leads, n_samples, rate = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {_VERSION}")
    if leads != N_LEADS:
        raise VersionMismatch(f"{path}: {leads} leads, expected {N_LEADS}")
    record_size = _RECORD_FIXED.size + 4 * N_LEADS * n_samples
    expected = _HEADER.size + n_records * record_size
    if len(raw) < expected:
        raise TruncatedFile(
            f"{path}: header promises {n_records} records but the file is short"
        )
    duration = n_samples / rate if rate else 0.0
    traces = []
    offset = _HEADER.size
    for _ in range(n_records):
        ecg_id, patient_id, acquired_at, age, sex_bit, quality, device = (
            _RECORD_FIXED.unpack_from(raw, offset)
        )
        offset += _RECORD_FIXED.size
        samples = np.frombuffer(raw, dtype="<f4", count=N_LEADS * n_samples, offset=offset)
        offset += 4 * N_LEADS * n_samples
        meta = EcgMeta(
            ecg_id=ecg_id,
            patient_id=patient_id,
            acquired_at=acquired_at,
            age_years=float(age),
            sex=Sex.MALE if sex_bit else Sex.FEMALE,
            quality=QualityFlags.from_bits(quality),
            has_device=bool(device),
        )
        traces.append(
            EcgTrace(
                meta=meta,
                samples=samples.reshape(N_LEADS, n_samples).copy(),
                sampling_rate_hz=rate,
                duration_s=duration,
            )
        )
    return traces
