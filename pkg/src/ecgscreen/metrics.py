"""Exact rank-based per-label metrics: AUROC, average precision, prevalence.

AUROC is the Mann-Whitney statistic with midranks, so tied scores count
half a win. Average precision processes tied scores as one group at the
group's combined rank, which makes the result invariant to the input
order of tied rows. Both are O(n log n) and exact up to float summation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateLabels, ShapeMismatch
from .icd import IcdCode, LabelKind, LabelVocabulary, parse_code


@dataclass(frozen=True)
class LabelMetrics:
    """Evaluation summary for one label column.

    auroc/auprc are None exactly when the column is degenerate (no
    positives, or no negatives for auroc).
    """

    label: IcdCode
    kind: LabelKind
    n_eval: int
    n_pos: int
    prevalence: float
    auroc: Optional[float]
    auprc: Optional[float]

    @property
    def degenerate(self) -> bool:
        return self.auroc is None


def _validate_pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.shape != s.shape:
        raise ShapeMismatch(f"scores {s.shape} and labels {y.shape} must be equal 1-d")
    if not np.isfinite(s).all():
        raise ShapeMismatch("scores must be finite")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ShapeMismatch("labels must be binary 0/1")
    return s, y.astype(np.int64)


def _midranks(s: np.ndarray) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[order[j + 1]] == s[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC: (sum of positive ranks - n_pos(n_pos+1)/2) / (n_pos*n_neg)."""
    s, y = _validate_pair(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} positives of {len(y)}")
    ranks = _midranks(s)
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision with tied scores treated as one rank group.

    Walking groups in descending score order, each group contributes its
    positive count times the precision of everything ranked at or above
    it; the sum is divided by the total positive count. All intermediate
    arithmetic is exact rational (counts are integers), rounded to float
    once at the end, so any equivalent formulation gives the same bits.
    """
    s, y = _validate_pair(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DegenerateLabels("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    boundaries = np.flatnonzero(np.diff(s_sorted)) + 1
    group_ends = np.concatenate([boundaries, [len(s_sorted)]])
    ap = Fraction(0)
    tp = 0
    for start, end in zip(np.concatenate([[0], boundaries]), group_ends):
        r = int(y_sorted[start:end].sum())
        if r:
            tp += r
            ap += Fraction(tp * r, int(end))
    return float(ap / n_pos)


def evaluate_labels(
    prob_matrix: np.ndarray,
    label_matrix: np.ndarray,
    vocab: LabelVocabulary,
    threads: int = 1,
) -> list[LabelMetrics]:
    """Per-column metrics; degenerate columns yield absent auroc/auprc.

    Columns are independent, so threads > 1 fans them out over a pool;
    the result order and values do not depend on the thread count.
    """
    probs = np.asarray(prob_matrix, dtype=np.float64)
    labels = np.asarray(label_matrix)
    if probs.ndim != 2 or probs.shape != labels.shape:
        raise ShapeMismatch(
            f"probability matrix {probs.shape} does not match labels {labels.shape}"
        )
    if probs.shape[1] != len(vocab):
        raise ShapeMismatch(
            f"{probs.shape[1]} columns for a vocabulary of {len(vocab)} labels"
        )
    n_eval = probs.shape[0]

    def one(j: int) -> LabelMetrics:
        col = labels[:, j]
        n_pos = int(col.sum())
        degenerate = n_pos == 0 or n_pos == n_eval
        return LabelMetrics(
            label=vocab.labels[j],
            kind=vocab.kind,
            n_eval=n_eval,
            n_pos=n_pos,
            prevalence=n_pos / n_eval if n_eval else 0.0,
            auroc=None if degenerate else auroc(probs[:, j], col),
            auprc=None if degenerate else auprc(probs[:, j], col),
        )

    if threads > 1 and len(vocab) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(len(vocab))))
    return [one(j) for j in range(len(vocab))]


_METRICS_HEADER = ["label", "kind", "n_eval", "n_pos", "prevalence", "auroc", "auprc"]


def write_metrics_csv(
    metrics: Sequence[LabelMetrics], path, config_digest: str | None = None
) -> None:
    """Emit one row per label; absent auroc/auprc become empty fields."""
    with open(path, "w", newline="") as f:
        if config_digest is not None:
            f.write(f"# config_digest={config_digest}\n")
        writer = csv.writer(f)
        writer.writerow(_METRICS_HEADER)
        for m in metrics:
            writer.writerow(
                [
                    m.label.text,
                    m.kind.value,
                    m.n_eval,
                    m.n_pos,
                    repr(m.prevalence),
                    "" if m.auroc is None else repr(m.auroc),
                    "" if m.auprc is None else repr(m.auprc),
                ]
            )


def read_metrics_csv(path) -> list[LabelMetrics]:
    with open(path, newline="") as f:
        reader = csv.DictReader(line for line in f if not line.startswith("#"))
        if reader.fieldnames != _METRICS_HEADER:
            raise ValueError(f"unexpected metrics header in {path}: {reader.fieldnames}")
        out = []
        for row in reader:
            out.append(
                LabelMetrics(
                    label=parse_code(row["label"]),
                    kind=LabelKind(row["kind"]),
                    n_eval=int(row["n_eval"]),
                    n_pos=int(row["n_pos"]),
                    prevalence=float(row["prevalence"]),
                    auroc=float(row["auroc"]) if row["auroc"] else None,
                    auprc=float(row["auprc"]) if row["auprc"] else None,
                )
            )
    return out
