"""ICD-10 code parsing, category truncation, and label vocabulary building.

An ICD-10 code is 3 to 7 characters: a letter followed by letters or
digits. The first 3 characters name the broader disease category
(I214 -> I21). Codes are treated as opaque labels; no code ontology is
consulted beyond the prefix rule.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Sequence

from .errors import DanglingLink, MalformedCode

if TYPE_CHECKING:  # pragma: no cover
    from .cohort import Episode

_CODE_RE = re.compile(r"^[A-Z][A-Z0-9]{2,6}$")


@dataclass(frozen=True, order=True)
class IcdCode:
    """A validated, normalized ICD-10 code."""

    text: str

    def __post_init__(self):
        if not _CODE_RE.match(self.text):
            raise MalformedCode(f"not a valid ICD-10 code: {self.text!r}")

    def __str__(self):
        return self.text


class LabelKind(Enum):
    FULL_CODE = "code"
    CATEGORY = "category"


def parse_code(raw: str) -> IcdCode:
    """Normalize (trim, uppercase) and validate a raw code string."""
    text = raw.strip().upper()
    if not _CODE_RE.match(text):
        raise MalformedCode(f"not a valid ICD-10 code: {raw!r}")
    return IcdCode(text)


def category_of(code: IcdCode) -> IcdCode:
    """First 3 characters of the code; idempotent on 3-char codes."""
    return IcdCode(code.text[:3])


def chapter_of(code: IcdCode) -> str:
    """Chapter key used for report grouping: the code's first letter.

    Deliberately not the official chapter letter-range table; the
    grouping is presentational and this variant is dataset-independent.
    """
    return code.text[0]


def _label_text(code: IcdCode, kind: LabelKind) -> str:
    if kind is LabelKind.CATEGORY:
        return code.text[:3]
    return code.text


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered label space for one classifier output head.

    Entries are (label, support) sorted lexicographically by label text;
    support counts distinct linked ECGs and every entry satisfies
    support >= min_support.
    """

    kind: LabelKind
    entries: tuple[tuple[IcdCode, int], ...]
    min_support: int

    def __post_init__(self):
        if self.min_support < 1:
            raise ValueError("min_support must be >= 1")
        texts = [label.text for label, _ in self.entries]
        if texts != sorted(texts) or len(set(texts)) != len(texts):
            raise ValueError("entries must be unique and sorted by label text")
        for label, support in self.entries:
            if support < self.min_support:
                raise ValueError(f"{label} support {support} < min_support {self.min_support}")
            if self.kind is LabelKind.CATEGORY and len(label.text) != 3:
                raise ValueError(f"category label {label} is not 3 characters")

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> tuple[IcdCode, ...]:
        return tuple(label for label, _ in self.entries)

    def index(self, label: IcdCode) -> int:
        return self._index_map[label.text]

    def __contains__(self, label: IcdCode) -> bool:
        return label.text in self._index_map

    @property
    def _index_map(self) -> dict[str, int]:
        # cached on first use; the dataclass is frozen so this is stable
        cached = self.__dict__.get("_index_map_cache")
        if cached is None:
            cached = {label.text: i for i, (label, _) in enumerate(self.entries)}
            object.__setattr__(self, "_index_map_cache", cached)
        return cached


def build_vocabulary(
    episodes: Sequence["Episode"],
    ecg_links: Iterable[tuple[int, int]],
    kind: LabelKind,
    min_support: int,
) -> LabelVocabulary:
    """Count distinct linked ECGs per label and keep labels above threshold.

    An ECG linked to several episodes that carry the same label counts
    once. Category labels match on the 3-character prefix.
    """
    if min_support < 1:
        raise ValueError("min_support must be >= 1")
    by_id = {ep.episode_id: ep for ep in episodes}
    ecgs_per_label: dict[str, set[int]] = {}
    for ecg_id, episode_id in ecg_links:
        ep = by_id.get(episode_id)
        if ep is None:
            raise DanglingLink(f"link for ECG {ecg_id} references unknown episode {episode_id}")
        for code in ep.codes:
            ecgs_per_label.setdefault(_label_text(code, kind), set()).add(ecg_id)
    entries = tuple(
        (IcdCode(text), len(ecgs))
        for text, ecgs in sorted(ecgs_per_label.items())
        if len(ecgs) >= min_support
    )
    return LabelVocabulary(kind=kind, entries=entries, min_support=min_support)


def write_vocabulary_csv(vocab: LabelVocabulary, path, config_digest: str | None = None) -> None:
    """Emit the vocabulary as CSV with columns label, kind, support, index."""
    with open(path, "w", newline="") as f:
        if config_digest is not None:
            f.write(f"# config_digest={config_digest}\n")
        writer = csv.writer(f)
        writer.writerow(["label", "kind", "support", "index"])
        for i, (label, support) in enumerate(vocab.entries):
            writer.writerow([label.text, vocab.kind.value, support, i])


def read_vocabulary_csv(path, min_support: int = 1) -> LabelVocabulary:
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(line for line in f if not line.startswith("#"))]
    header, body = rows[0], rows[1:]
    if header != ["label", "kind", "support", "index"]:
        raise ValueError(f"unexpected vocabulary header in {path}: {header}")
    kinds = {r[1] for r in body}
    if len(kinds) > 1:
        raise ValueError(f"mixed label kinds in {path}")
    kind = LabelKind(kinds.pop()) if body else LabelKind.FULL_CODE
    entries = tuple((parse_code(r[0]), int(r[2])) for r in body)
    return LabelVocabulary(kind=kind, entries=entries, min_support=min_support)
