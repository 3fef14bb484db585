"""Token-level evaluation: per-class and macro/micro P/R/F1, report tables
in the familiar row layout, prediction interchange and a timing harness.

The background class is counted in the confusion tallies but excluded from
macro and micro averaging by default (configurable).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .core import Document, Label, LABEL_BY_NAME, METADATA_LABELS
from .errors import FormatError


def f1(p: float, r: float) -> float:
    """Harmonic mean; 0 by convention when both rates vanish."""
    if p + r == 0:
        return 0.0
    return 2.0 * p * r / (p + r)


@dataclass
class ConfusionCounts:
    """Per-class true-positive / false-positive / false-negative token counts."""

    tp: dict[Label, int] = field(default_factory=lambda: {l: 0 for l in Label})
    fp: dict[Label, int] = field(default_factory=lambda: {l: 0 for l in Label})
    fn: dict[Label, int] = field(default_factory=lambda: {l: 0 for l in Label})
    pairs: dict[tuple[Label, Label], int] = field(default_factory=dict)

    def add(self, gold: Label, pred: Label) -> None:
        self.pairs[(gold, pred)] = self.pairs.get((gold, pred), 0) + 1
        if gold is pred:
            self.tp[gold] += 1
        else:
            self.fn[gold] += 1
            self.fp[pred] += 1

    def gold_total(self, label: Label) -> int:
        return self.tp[label] + self.fn[label]


@dataclass
class TimingStats:
    mean_s: float
    std_s: float
    runs: list[float]


@dataclass
class MetricsReport:
    per_class: dict[Label, tuple[float, float, float]]
    macro: tuple[float, float, float]
    micro: tuple[float, float, float]
    counts: ConfusionCounts
    documents: int
    averaged_labels: tuple[Label, ...]
    timing: TimingStats | None = None

    def to_json_dict(self) -> dict:
        out = {
            "documents": self.documents,
            "per_class": {
                l.value: {"precision": p, "recall": r, "f1": f}
                for l, (p, r, f) in self.per_class.items()
            },
            "macro": dict(zip(("precision", "recall", "f1"), self.macro)),
            "micro": dict(zip(("precision", "recall", "f1"), self.micro)),
        }
        if self.timing is not None:
            out["seconds_per_document"] = {
                "mean": self.timing.mean_s,
                "std": self.timing.std_s,
            }
        return out


def _rates(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r, f1(p, r)


def score(
    gold_docs: list[Document],
    predictions: dict[str, list[Label]],
    averaged_labels=METADATA_LABELS,
) -> MetricsReport:
    """Compare per-token predictions against gold annotations.

    Every gold document must have a prediction list covering every token.
    Macro averages the per-class metrics over ``averaged_labels`` unweighted;
    micro derives them from counts summed over the same classes.
    """
    counts = ConfusionCounts()
    for doc in gold_docs:
        if doc.id not in predictions:
            raise ValueError(f"no prediction for document {doc.id}")
        pred = predictions[doc.id]
        gold = doc.token_labels()
        if len(pred) != len(gold):
            raise ValueError(
                f"{doc.id}: prediction covers {len(pred)} tokens, document has {len(gold)}"
            )
        for g, p in zip(gold, pred):
            counts.add(g, p)

    per_class = {l: _rates(counts.tp[l], counts.fp[l], counts.fn[l]) for l in Label}
    avg = list(averaged_labels)
    macro_p = float(np.mean([per_class[l][0] for l in avg]))
    macro_r = float(np.mean([per_class[l][1] for l in avg]))
    macro_f = float(np.mean([per_class[l][2] for l in avg]))
    tp = sum(counts.tp[l] for l in avg)
    fp = sum(counts.fp[l] for l in avg)
    fn = sum(counts.fn[l] for l in avg)
    return MetricsReport(
        per_class=per_class,
        macro=(macro_p, macro_r, macro_f),
        micro=_rates(tp, fp, fn),
        counts=counts,
        documents=len(gold_docs),
        averaged_labels=tuple(avg),
    )


def round3(value: float) -> str:
    """Three decimals, half-up (0.7305 renders as 0.731)."""
    return str(Decimal(repr(value)).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def render_table(report: MetricsReport) -> str:
    """Nine class rows plus Macro Average and Micro Average.

    Classes without gold tokens render as N/A. The micro F1 cell is computed
    here although the reference tables leave it blank; the footnote marks it.
    """
    headers = ("Category", "Precision", "Recall", "F1-score")
    rows = []
    for label in METADATA_LABELS:
        p, r, f = report.per_class[label]
        if report.counts.gold_total(label) == 0:
            rows.append((label.value, "N/A", "N/A", "N/A"))
        else:
            rows.append((label.value, round3(p), round3(r), round3(f)))
    rows.append(("Macro Average", *map(round3, report.macro)))
    rows.append(("Micro Average", round3(report.micro[0]), round3(report.micro[1]),
                 round3(report.micro[2]) + "*"))
    widths = [max(len(r[i]) for r in rows + [headers]) for i in range(4)]
    lines = []
    fmt = "  ".join("{:<%d}" % w if i == 0 else "{:>%d}" % w for i, w in enumerate(widths))
    lines.append(fmt.format(*headers))
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append(fmt.format(*row))
    lines.append("* micro F1 computed by this tool; reference tables print N/A")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Prediction interchange
# ---------------------------------------------------------------------------


def save_predictions(path: str, predictions: dict[str, list[Label]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, labels in predictions.items():
            fh.write(json.dumps({"id": doc_id, "token_labels": [l.value for l in labels]}))
            fh.write("\n")


def load_external_predictions(path: str, gold_docs: list[Document]) -> dict[str, list[Label]]:
    """JSONL of {id, token_labels}; ids must exist in the gold corpus and
    labels must be known. Problems name the offending line."""
    known_ids = {d.id for d in gold_docs}
    out: dict[str, list[Label]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"invalid JSON: {e}", line=lineno) from e
            if not isinstance(rec, dict) or "id" not in rec or "token_labels" not in rec:
                raise FormatError("record needs id and token_labels", line=lineno)
            if rec["id"] not in known_ids:
                raise FormatError(f"unknown document id {rec['id']!r}", line=lineno)
            labels = []
            for name in rec["token_labels"]:
                if name not in LABEL_BY_NAME:
                    raise FormatError(f"unknown label {name!r}", line=lineno)
                labels.append(LABEL_BY_NAME[name])
            out[rec["id"]] = labels
    return out


# ---------------------------------------------------------------------------
# Timing harness
# ---------------------------------------------------------------------------


def time_inference(extractor, docs: list[Document], repeats: int = 3) -> TimingStats:
    """Wall-clock seconds per document, mean +/- std over ``repeats`` runs.

    One warm-up pass runs first and is not measured.
    """
    if repeats < 3:
        raise ValueError("need at least 3 repeats")
    if not docs:
        raise ValueError("empty corpus")
    for doc in docs:
        extractor(doc)
    runs = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for doc in docs:
            extractor(doc)
        runs.append((time.perf_counter() - t0) / len(docs))
    return TimingStats(
        mean_s=float(np.mean(runs)), std_s=float(np.std(runs)), runs=runs
    )
