"""Two-stage label selection, external replication, and the validated report.

Stage one screens internal-validation metrics: a label is kept when its
AUROC beats the base tier strictly and its average precision clears
either the absolute floor or the prevalence-lift floor (both non-strict).
Stage two checks each kept label against external metrics at the tier it
earned. Labels with a degenerate external column stay in the denominator
as non-replicated, so replication rates use the selection counts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .errors import ConfigInvalid, UnknownLabel
from .icd import IcdCode, LabelKind, chapter_of, parse_code
from .metrics import LabelMetrics

_REPORT_VERSION = 1


@dataclass(frozen=True)
class SelectionRule:
    auroc_tiers: tuple[float, float] = (0.80, 0.90)
    min_auprc: float = 0.05
    precision_lift: float = 20.0

    def __post_init__(self):
        if not self.auroc_tiers[0] < self.auroc_tiers[1]:
            raise ConfigInvalid("auroc_tiers must be ascending")
        if not 0.0 < self.min_auprc < 1.0:
            raise ConfigInvalid("min_auprc must be in (0,1)")
        if self.precision_lift <= 1.0:
            raise ConfigInvalid("precision_lift must be > 1")

    def tier_name(self, index: int) -> str:
        return f"T{round(self.auroc_tiers[index] * 100)}"

    def to_json(self) -> dict:
        return {
            "auroc_tiers": list(self.auroc_tiers),
            "min_auprc": self.min_auprc,
            "precision_lift": self.precision_lift,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SelectionRule":
        return cls(
            auroc_tiers=tuple(obj["auroc_tiers"]),
            min_auprc=float(obj["min_auprc"]),
            precision_lift=float(obj["precision_lift"]),
        )


@dataclass(frozen=True)
class SelectedLabel:
    label: IcdCode
    kind: LabelKind
    tier: str
    tier_threshold: float
    internal: LabelMetrics
    external: Optional[LabelMetrics] = None
    replicated: Optional[bool] = None
    degenerate_external: bool = False

    @property
    def chapter(self) -> str:
        return chapter_of(self.label)


def select_labels(internal_metrics: Sequence[LabelMetrics],
                  rule: SelectionRule) -> list[SelectedLabel]:
    """Keep labels with AUROC strictly above the base tier and enough precision.

    The precision gate passes when auprc >= min_auprc or auprc >=
    precision_lift * prevalence (both non-strict). Degenerate labels
    (absent metrics) are never selected.
    """
    base, high = rule.auroc_tiers
    out = []
    for m in internal_metrics:
        if m.auroc is None or m.auprc is None:
            continue
        if not m.auroc > base:
            continue
        if not (m.auprc >= rule.min_auprc
                or m.auprc >= rule.precision_lift * m.prevalence):
            continue
        index = 1 if m.auroc > high else 0
        out.append(
            SelectedLabel(
                label=m.label,
                kind=m.kind,
                tier=rule.tier_name(index),
                tier_threshold=rule.auroc_tiers[index],
                internal=m,
            )
        )
    return out


def replicate(selected: Sequence[SelectedLabel],
              external_metrics: Sequence[LabelMetrics]) -> list[SelectedLabel]:
    """Attach external metrics and per-tier replication flags.

    A label replicates when its external AUROC strictly exceeds its own
    tier threshold. A degenerate external column (absent AUROC) keeps
    the label in the output as non-replicated with a flag.
    """
    by_key = {(m.label.text, m.kind): m for m in external_metrics}
    out = []
    for s in selected:
        ext = by_key.get((s.label.text, s.kind))
        if ext is None:
            raise UnknownLabel(f"external metrics missing selected label {s.label}")
        if ext.auroc is None:
            out.append(replace(s, external=ext, replicated=False,
                               degenerate_external=True))
        else:
            out.append(replace(s, external=ext,
                               replicated=ext.auroc > s.tier_threshold))
    return out


# --- report ---------------------------------------------------------------

def _canonical(selected: Sequence[SelectedLabel]) -> tuple[SelectedLabel, ...]:
    return tuple(
        sorted(
            selected,
            key=lambda s: (s.kind.value, s.chapter, -s.internal.auroc, s.label.text),
        )
    )


@dataclass(frozen=True)
class ScreenReport:
    metadata: dict
    selected: tuple[SelectedLabel, ...]

    def groups(self) -> dict[str, dict[str, list[SelectedLabel]]]:
        """Entries by label kind, then ICD chapter, internal AUROC descending."""
        out: dict[str, dict[str, list[SelectedLabel]]] = {}
        for s in _canonical(self.selected):
            out.setdefault(s.kind.value, {}).setdefault(s.chapter, []).append(s)
        return out

    def summary(self) -> dict:
        out: dict = {"total_selected": len(self.selected), "kinds": {}}
        for kind in sorted({s.kind.value for s in self.selected}):
            entries = [s for s in self.selected if s.kind.value == kind]
            tiers = {}
            for tier in sorted({s.tier for s in entries}):
                tier_entries = [s for s in entries if s.tier == tier]
                n_rep = sum(1 for s in tier_entries if s.replicated)
                tiers[tier] = {
                    "selected": len(tier_entries),
                    "replicated": n_rep,
                    "replication_rate": n_rep / len(tier_entries),
                }
            n_rep = sum(1 for s in entries if s.replicated)
            out["kinds"][kind] = {
                "selected": len(entries),
                "replicated": n_rep,
                "replication_rate": n_rep / len(entries) if entries else None,
                "tiers": tiers,
            }
        return out


def _metrics_json(m: Optional[LabelMetrics]) -> Optional[dict]:
    if m is None:
        return None
    return {
        "n_eval": m.n_eval,
        "n_pos": m.n_pos,
        "prevalence": m.prevalence,
        "auroc": m.auroc,
        "auprc": m.auprc,
    }


def _metrics_from_json(obj: Optional[dict], label: IcdCode,
                       kind: LabelKind) -> Optional[LabelMetrics]:
    if obj is None:
        return None
    return LabelMetrics(
        label=label,
        kind=kind,
        n_eval=int(obj["n_eval"]),
        n_pos=int(obj["n_pos"]),
        prevalence=float(obj["prevalence"]),
        auroc=obj["auroc"],
        auprc=obj["auprc"],
    )


def report_to_json(report: ScreenReport) -> dict:
    groups_obj: dict = {}
    for kind, chapters in report.groups().items():
        groups_obj[kind] = {}
        for chapter, entries in chapters.items():
            groups_obj[kind][chapter] = [
                {
                    "label": s.label.text,
                    "tier": s.tier,
                    "tier_threshold": s.tier_threshold,
                    "internal": _metrics_json(s.internal),
                    "external": _metrics_json(s.external),
                    "replicated": s.replicated,
                    "degenerate_external": s.degenerate_external,
                }
                for s in entries
            ]
    return {
        "version": _REPORT_VERSION,
        "metadata": report.metadata,
        "groups": groups_obj,
        "summary": report.summary(),
    }


def report_from_json(obj: dict) -> ScreenReport:
    if obj.get("version") != _REPORT_VERSION:
        raise ConfigInvalid(f"unsupported report version {obj.get('version')}")
    selected = []
    for kind_text, chapters in obj["groups"].items():
        kind = LabelKind(kind_text)
        for entries in chapters.values():
            for e in entries:
                label = parse_code(e["label"])
                selected.append(
                    SelectedLabel(
                        label=label,
                        kind=kind,
                        tier=e["tier"],
                        tier_threshold=float(e["tier_threshold"]),
                        internal=_metrics_from_json(e["internal"], label, kind),
                        external=_metrics_from_json(e["external"], label, kind),
                        replicated=e["replicated"],
                        degenerate_external=bool(e["degenerate_external"]),
                    )
                )
    return ScreenReport(metadata=obj["metadata"], selected=_canonical(selected))


def selected_to_json(s: SelectedLabel) -> dict:
    return {
        "label": s.label.text,
        "kind": s.kind.value,
        "tier": s.tier,
        "tier_threshold": s.tier_threshold,
        "internal": _metrics_json(s.internal),
        "external": _metrics_json(s.external),
        "replicated": s.replicated,
        "degenerate_external": s.degenerate_external,
    }


def selected_from_json(obj: dict) -> SelectedLabel:
    label = parse_code(obj["label"])
    kind = LabelKind(obj["kind"])
    return SelectedLabel(
        label=label,
        kind=kind,
        tier=obj["tier"],
        tier_threshold=float(obj["tier_threshold"]),
        internal=_metrics_from_json(obj["internal"], label, kind),
        external=_metrics_from_json(obj["external"], label, kind),
        replicated=obj["replicated"],
        degenerate_external=bool(obj["degenerate_external"]),
    )


_REPORT_CSV_HEADER = [
    "kind", "chapter", "label", "tier", "auroc_internal", "auprc_internal",
    "prevalence_internal", "auroc_external", "replicated",
]


def emit_report(selected: Sequence[SelectedLabel], metadata: dict,
                json_path, csv_path) -> ScreenReport:
    """Write the machine (JSON) and human (CSV) report files."""
    report = ScreenReport(metadata=dict(metadata), selected=_canonical(selected))
    with open(json_path, "w") as f:
        json.dump(report_to_json(report), f, indent=1, sort_keys=True)
        f.write("\n")
    with open(csv_path, "w", newline="") as f:
        digest = metadata.get("config_digest")
        if digest:
            f.write(f"# config_digest={digest}\n")
        writer = csv.writer(f)
        writer.writerow(_REPORT_CSV_HEADER)
        for kind, chapters in report.groups().items():
            for chapter, entries in chapters.items():
                for s in entries:
                    writer.writerow(
                        [
                            kind,
                            chapter,
                            s.label.text,
                            s.tier,
                            repr(s.internal.auroc),
                            repr(s.internal.auprc),
                            repr(s.internal.prevalence),
                            "" if s.external is None or s.external.auroc is None
                            else repr(s.external.auroc),
                            {True: "yes", False: "no", None: ""}[s.replicated],
                        ]
                    )
    return report


def read_report(path) -> ScreenReport:
    with open(path) as f:
        return report_from_json(json.load(f))
