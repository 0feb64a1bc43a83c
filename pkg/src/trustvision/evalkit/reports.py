"""Per-class summaries, error attribution and strata breakdowns."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import ClassSet
from .metrics import ConfusionMatrix, MetricsReport, evaluate_probs


@dataclass(frozen=True)
class PerClassRow:
    class_id: int
    name: str
    accuracy: float | None
    n_test: int
    train_count: int


@dataclass(frozen=True)
class PerClassReport:
    rows: list[PerClassRow]
    fraction_at_100: float
    fraction_ge: float
    threshold: float
    n_with_data: int

    def scatter_points(self) -> list[tuple[int, float]]:
        """(train_count, accuracy) pairs for classes that have test data."""
        return [(r.train_count, r.accuracy) for r in self.rows if r.accuracy is not None]

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows],
                "summary": {"fraction_at_100": self.fraction_at_100, "fraction_ge": self.fraction_ge,
                            "threshold": self.threshold, "n_with_data": self.n_with_data}}


def _name(class_set: ClassSet | None, i: int) -> str:
    return class_set.taxa[i].scientific_name if class_set is not None else str(i)


def per_class_report(cm: ConfusionMatrix, train_counts, threshold: float = 0.8) -> PerClassReport:
    """Per-class accuracy TP/row. Classes without test rows are listed but excluded from fractions."""
    train_counts = np.asarray(train_counts, dtype=int)
    if train_counts.size != cm.num_classes:
        raise ValueError("train_counts must have one entry per class")
    row = cm.counts.sum(axis=1)
    rows, accs = [], []
    for i in range(cm.num_classes):
        acc = None if row[i] == 0 else float(cm.counts[i, i] / row[i])
        if acc is not None:
            accs.append(acc)
        rows.append(PerClassRow(i, _name(cm.class_set, i), acc, int(row[i]), int(train_counts[i])))
    accs = np.array(accs)
    at100 = float((accs == 1.0).mean()) if accs.size else 0.0
    ge = float((accs >= threshold).mean()) if accs.size else 0.0
    return PerClassReport(rows, at100, ge, threshold, int(accs.size))


@dataclass(frozen=True)
class AttributionRecord:
    source: int
    source_name: str
    accuracy: float
    confounder: int
    confounder_name: str
    count: int
    fraction: float
    same_genus: bool
    same_family: bool
    confounder_train_count: int


def attribute_errors(cm: ConfusionMatrix, class_set: ClassSet, train_counts,
                     accuracy_ceiling: float = 0.2) -> list[AttributionRecord]:
    """For each class below ``accuracy_ceiling``, name its dominant wrong destination.

    ``fraction`` is that destination's share of the class's errors.
    """
    if not 0.0 <= accuracy_ceiling <= 1.0:
        raise ValueError("accuracy_ceiling must lie in [0, 1]")
    train_counts = np.asarray(train_counts, dtype=int)
    out = []
    for i in range(cm.num_classes):
        row = cm.counts[i]
        total = int(row.sum())
        if total == 0:
            continue
        acc = row[i] / total
        errors = total - int(row[i])
        if acc >= accuracy_ceiling or errors == 0:
            continue
        off = row.copy()
        off[i] = -1
        j = int(np.argmax(off))
        src, dst = class_set.taxa[i], class_set.taxa[j]
        out.append(AttributionRecord(i, src.scientific_name, float(acc), j, dst.scientific_name, int(row[j]),
                                     row[j] / errors, src.genus == dst.genus, src.family == dst.family,
                                     int(train_counts[j])))
    return out


@dataclass(frozen=True)
class StrataRow:
    tag: str
    class_count: int
    metrics: MetricsReport

    def table_row(self) -> dict:
        m = self.metrics
        return {"challenge": self.tag, "classes": self.class_count, "images": m.n_examples,
                "accuracy": m.accuracy, "macro_precision": m.macro_precision,
                "macro_recall": m.macro_recall, "macro_f1": m.macro_f1}


@dataclass(frozen=True)
class StrataReport:
    rows: list[StrataRow] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rows": [r.table_row() for r in self.rows]}


def strata_report(prob_rows, labels, strata_tags, num_classes: int | None = None) -> StrataReport:
    """One metrics row per distinct tag; multi-tagged examples count in each tag."""
    p = np.atleast_2d(np.asarray(prob_rows, dtype=np.float64))
    labels = np.asarray(labels, dtype=int)
    if len(strata_tags) != labels.size:
        raise ValueError("strata_tags must parallel the examples")
    groups: dict[str, list[int]] = defaultdict(list)
    for i, tags in enumerate(strata_tags):
        for t in tags:
            groups[t].append(i)
    C = num_classes or p.shape[1]
    rows = []
    for tag in sorted(groups):
        idx = np.array(groups[tag])
        m, _ = evaluate_probs(p[idx], labels[idx], C)
        rows.append(StrataRow(tag, int(np.unique(labels[idx]).size), m))
    return StrataReport(rows)


# ---------------------------------------------------------------------------
# export helpers


def rows_to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    columns = columns or list(rows[0].keys())
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})
    return buf.getvalue()


def aligned_table(rows: list[dict], columns: list[str] | None = None, floatfmt: str = "{:.4f}") -> str:
    """Plain-text table with space-aligned columns."""
    if not rows:
        return ""
    columns = columns or list(rows[0].keys())

    def fmt(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return floatfmt.format(v)
        return str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
