"""Episode linkage, exclusions, patient-level splits, and label matrices.

Patients (never individual ECGs) are the unit of splitting so that no
patient's ECGs are shared between training and evaluation sets. Episode
linkage uses the closed interval [start_time, end_time].
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, EmptyCohort, UnlinkedRow
from .icd import IcdCode, LabelKind, LabelVocabulary, parse_code


class EpisodeKind(Enum):
    ED = "ED"
    HOSPITALIZATION = "Hospitalization"


class Sex(Enum):
    MALE = "M"
    FEMALE = "F"

    @property
    def bit(self) -> int:
        return 1 if self is Sex.MALE else 0


@dataclass(frozen=True)
class QualityFlags:
    muscle_artifact: bool = False
    ac_noise: bool = False
    baseline_wander: bool = False
    qrs_clipping: bool = False
    leads_off: bool = False

    @property
    def clean(self) -> bool:
        return not (
            self.muscle_artifact
            or self.ac_noise
            or self.baseline_wander
            or self.qrs_clipping
            or self.leads_off
        )

    def to_bits(self) -> int:
        flags = (
            self.muscle_artifact,
            self.ac_noise,
            self.baseline_wander,
            self.qrs_clipping,
            self.leads_off,
        )
        return sum(1 << i for i, flag in enumerate(flags) if flag)

    @classmethod
    def from_bits(cls, bits: int) -> "QualityFlags":
        return cls(*(bool(bits >> i & 1) for i in range(5)))


@dataclass(frozen=True)
class Episode:
    """One hospitalization or ED visit with its coded diagnoses."""

    episode_id: int
    patient_id: int
    kind: EpisodeKind
    start_time: int
    end_time: int
    codes: tuple[IcdCode, ...]

    def __post_init__(self):
        if self.start_time > self.end_time:
            raise ValueError(f"episode {self.episode_id}: start_time > end_time")


@dataclass(frozen=True)
class EcgMeta:
    ecg_id: int
    patient_id: int
    acquired_at: int
    age_years: float
    sex: Sex
    quality: QualityFlags
    has_device: bool

    def __post_init__(self):
        if self.age_years < 0:
            raise ValueError(f"ECG {self.ecg_id}: negative age")


@dataclass(frozen=True)
class CohortSplit:
    """Disjoint patient partition into external holdout and internal train/val."""

    internal_train: frozenset[int]
    internal_val: frozenset[int]
    external: frozenset[int]
    seed: int

    def __post_init__(self):
        sets = [self.internal_train, self.internal_val, self.external]
        total = sum(len(s) for s in sets)
        if len(self.internal_train | self.internal_val | self.external) != total:
            raise ValueError("split sets are not pairwise disjoint")

    @property
    def internal(self) -> frozenset[int]:
        return self.internal_train | self.internal_val

    @property
    def all_patients(self) -> frozenset[int]:
        return self.internal | self.external

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "external": sorted(self.external),
            "internal_train": sorted(self.internal_train),
            "internal_val": sorted(self.internal_val),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CohortSplit":
        return cls(
            internal_train=frozenset(obj["internal_train"]),
            internal_val=frozenset(obj["internal_val"]),
            external=frozenset(obj["external"]),
            seed=int(obj["seed"]),
        )


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_patients(
    patients: Iterable[int], external_frac: float, val_frac: float, seed: int
) -> CohortSplit:
    """Seeded uniform shuffle then prefix cut; deterministic given seed.

    |external| = round(external_frac * N) and, within the remainder,
    |internal_val| = round(val_frac * |internal|), rounding half away
    from zero.
    """
    if not 0 < external_frac < 1:
        raise ValueError(f"external_frac must be in (0, 1), got {external_frac}")
    if not 0 <= val_frac < 1:
        raise ValueError(f"val_frac must be in [0, 1), got {val_frac}")
    ids = sorted(set(patients))
    if not ids:
        raise EmptyCohort("no patients to split")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_external = _round_half_away(external_frac * len(order))
    external = order[:n_external]
    internal = order[n_external:]
    n_val = _round_half_away(val_frac * len(internal))
    return CohortSplit(
        internal_train=frozenset(internal[n_val:]),
        internal_val=frozenset(internal[:n_val]),
        external=frozenset(external),
        seed=seed,
    )


def link_ecgs(
    ecgs: Sequence[EcgMeta], episodes: Sequence[Episode]
) -> list[tuple[int, int]]:
    """Link ECGs to episodes of the same patient whose interval covers them.

    An ECG may link to several overlapping episodes; unlinked ECGs are
    simply absent (count them with count_unlinked). Output is sorted by
    (ecg_id, episode_id).
    """
    by_patient: dict[int, list[Episode]] = {}
    for ep in episodes:
        by_patient.setdefault(ep.patient_id, []).append(ep)
    links = []
    for ecg in ecgs:
        for ep in by_patient.get(ecg.patient_id, ()):
            if ep.start_time <= ecg.acquired_at <= ep.end_time:
                links.append((ecg.ecg_id, ep.episode_id))
    links.sort()
    return links


def count_unlinked(ecgs: Sequence[EcgMeta], links: Sequence[tuple[int, int]]) -> int:
    linked = {ecg_id for ecg_id, _ in links}
    return sum(1 for ecg in ecgs if ecg.ecg_id not in linked)


def apply_exclusions(ecgs: Sequence[EcgMeta]) -> list[EcgMeta]:
    """Retain clean-quality, device-free, adult (>= 18 years) ECGs."""
    return [
        ecg
        for ecg in ecgs
        if ecg.quality.clean and not ecg.has_device and ecg.age_years >= 18
    ]


def first_ecg_per_episode(
    links: Sequence[tuple[int, int]], ecgs: Sequence[EcgMeta]
) -> list[tuple[int, int]]:
    """Earliest linked ECG per episode; timestamp ties go to the smaller ecg_id."""
    by_id = {ecg.ecg_id: ecg for ecg in ecgs}
    best: dict[int, tuple[int, int]] = {}
    for ecg_id, episode_id in links:
        ecg = by_id.get(ecg_id)
        if ecg is None:
            raise DataError(f"link references unknown ECG {ecg_id}")
        key = (ecg.acquired_at, ecg_id)
        if episode_id not in best or key < best[episode_id]:
            best[episode_id] = key
    return [(episode_id, key[1]) for episode_id, key in sorted(best.items())]


@dataclass(frozen=True)
class LabelMatrix:
    """Binary ECG-by-label matrix with per-label prevalence."""

    rows: tuple[int, ...]
    vocabulary: LabelVocabulary
    bits: np.ndarray
    prevalence: np.ndarray

    def __post_init__(self):
        n, width = self.bits.shape
        if n != len(self.rows) or width != len(self.vocabulary):
            raise ValueError("label matrix shape does not match rows/vocabulary")
        if self.bits.size and not np.isin(self.bits, (0, 1)).all():
            raise ValueError("label matrix entries must be 0/1")


def build_label_matrix(
    rows: Sequence[int],
    links: Sequence[tuple[int, int]],
    episodes: Sequence[Episode],
    vocab: LabelVocabulary,
) -> LabelMatrix:
    """Set bit (i, j) when row ECG i links to an episode carrying label j.

    Category vocabularies match on the 3-character prefix. Every row must
    have at least one link.
    """
    ep_by_id = {ep.episode_id: ep for ep in episodes}
    episodes_by_ecg: dict[int, list[Episode]] = {}
    for ecg_id, episode_id in links:
        ep = ep_by_id.get(episode_id)
        if ep is None:
            raise DataError(f"link references unknown episode {episode_id}")
        episodes_by_ecg.setdefault(ecg_id, []).append(ep)

    bits = np.zeros((len(rows), len(vocab)), dtype=np.uint8)
    for i, ecg_id in enumerate(rows):
        linked = episodes_by_ecg.get(ecg_id)
        if not linked:
            raise UnlinkedRow(f"row ECG {ecg_id} has no episode link")
        for ep in linked:
            for code in ep.codes:
                label = IcdCode(code.text[:3]) if vocab.kind is LabelKind.CATEGORY else code
                if label in vocab:
                    bits[i, vocab.index(label)] = 1
    prevalence = bits.mean(axis=0, dtype=np.float64) if len(rows) else np.zeros(len(vocab))
    return LabelMatrix(rows=tuple(rows), vocabulary=vocab, bits=bits, prevalence=prevalence)


# --- CSV / JSON interchange ---------------------------------------------

def iso_utc(ts: int) -> str:
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_iso_utc(text: str) -> int:
    dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


_EPISODE_HEADER = ["episode_id", "patient_id", "kind", "start_time", "end_time", "codes"]
_ECG_HEADER = [
    "ecg_id",
    "patient_id",
    "acquired_at",
    "age_years",
    "sex",
    "muscle_artifact",
    "ac_noise",
    "baseline_wander",
    "qrs_clipping",
    "leads_off",
    "has_device",
]


def write_episodes_csv(episodes: Sequence[Episode], path, config_digest: str | None = None):
    with open(path, "w", newline="") as f:
        if config_digest is not None:
            f.write(f"# config_digest={config_digest}\n")
        writer = csv.writer(f)
        writer.writerow(_EPISODE_HEADER)
        for ep in episodes:
            writer.writerow(
                [
                    ep.episode_id,
                    ep.patient_id,
                    ep.kind.value,
                    iso_utc(ep.start_time),
                    iso_utc(ep.end_time),
                    ";".join(code.text for code in ep.codes),
                ]
            )


def read_episodes_csv(path) -> list[Episode]:
    episodes = []
    with open(path, newline="") as f:
        reader = csv.DictReader(line for line in f if not line.startswith("#"))
        for row in reader:
            codes = tuple(parse_code(c) for c in row["codes"].split(";") if c)
            episodes.append(
                Episode(
                    episode_id=int(row["episode_id"]),
                    patient_id=int(row["patient_id"]),
                    kind=EpisodeKind(row["kind"]),
                    start_time=parse_iso_utc(row["start_time"]),
                    end_time=parse_iso_utc(row["end_time"]),
                    codes=codes,
                )
            )
    return episodes


def write_ecg_meta_csv(ecgs: Sequence[EcgMeta], path, config_digest: str | None = None):
    with open(path, "w", newline="") as f:
        if config_digest is not None:
            f.write(f"# config_digest={config_digest}\n")
        writer = csv.writer(f)
        writer.writerow(_ECG_HEADER)
        for ecg in ecgs:
            q = ecg.quality
            writer.writerow(
                [
                    ecg.ecg_id,
                    ecg.patient_id,
                    iso_utc(ecg.acquired_at),
                    repr(float(ecg.age_years)),
                    ecg.sex.value,
                    int(q.muscle_artifact),
                    int(q.ac_noise),
                    int(q.baseline_wander),
                    int(q.qrs_clipping),
                    int(q.leads_off),
                    int(ecg.has_device),
                ]
            )


def read_ecg_meta_csv(path) -> list[EcgMeta]:
    ecgs = []
    with open(path, newline="") as f:
        reader = csv.DictReader(line for line in f if not line.startswith("#"))
        for row in reader:
            ecgs.append(
                EcgMeta(
                    ecg_id=int(row["ecg_id"]),
                    patient_id=int(row["patient_id"]),
                    acquired_at=parse_iso_utc(row["acquired_at"]),
                    age_years=float(row["age_years"]),
                    sex=Sex(row["sex"]),
                    quality=QualityFlags(
                        muscle_artifact=row["muscle_artifact"] == "1",
                        ac_noise=row["ac_noise"] == "1",
                        baseline_wander=row["baseline_wander"] == "1",
                        qrs_clipping=row["qrs_clipping"] == "1",
                        leads_off=row["leads_off"] == "1",
                    ),
                    has_device=row["has_device"] == "1",
                )
            )
    return ecgs


def write_links_csv(links: Sequence[tuple[int, int]], path, config_digest: str | None = None):
    with open(path, "w", newline="") as f:
        if config_digest is not None:
            f.write(f"# config_digest={config_digest}\n")
        writer = csv.writer(f)
        writer.writerow(["ecg_id", "episode_id"])
        writer.writerows(links)


def read_links_csv(path) -> list[tuple[int, int]]:
    with open(path, newline="") as f:
        rows = list(csv.reader(line for line in f if not line.startswith("#")))
    return [(int(r[0]), int(r[1])) for r in rows[1:]]


def write_split_json(split: CohortSplit, path, config_digest: str | None = None):
    obj = split.to_json()
    if config_digest is not None:
        obj["config_digest"] = config_digest
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def read_split_json(path) -> CohortSplit:
    with open(path) as f:
        return CohortSplit.from_json(json.load(f))
