"""Confusion counts and the A / P / F1 / TP% / FP% metric suite.

Anomaly is the positive class. TP% is anomaly recall and FP% the false
alarm rate over benign superpixels, both as percentages. Degenerate 0/0
ratios are reported as 0 together with a flag instead of NaN.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fn: int
    fp: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.fp, self.tn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp, fn=self.fn + other.fn,
            fp=self.fp + other.fp, tn=self.tn + other.tn,
        )


@dataclass(frozen=True)
class EvalReport:
    variant: str
    network: str
    counts: ConfusionCounts
    accuracy: float
    precision: float
    f1: float
    tp_rate_percent: float
    fp_rate_percent: float
    flags: tuple[str, ...] = field(default=())


def compute_metrics(counts: ConfusionCounts, variant: str = "", network: str = "") -> EvalReport:
    """Derive the metric suite from confusion counts.

    A=(tp+tn)/total, P=tp/(tp+fp), R=tp/(tp+fn), F1=2PR/(P+R),
    TP%=100R, FP%=100 fp/(fp+tn); 0/0 -> 0 plus a degenerate flag.
    """
    if counts.total == 0:
        raise ValueError("cannot compute metrics over zero superpixels")
    flags = []

    def ratio(num: int, den: int, flag: str) -> float:
        if den == 0:
            flags.append(flag)
            return 0.0
        return num / den

    accuracy = (counts.tp + counts.tn) / counts.total
    precision = ratio(counts.tp, counts.tp + counts.fp, "precision=0/0")
    recall = ratio(counts.tp, counts.tp + counts.fn, "tp_rate=0/0")
    if precision + recall == 0.0:
        flags.append("f1=0/0")
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    fp_rate = ratio(counts.fp, counts.fp + counts.tn, "fp_rate=0/0")
    return EvalReport(
        variant=variant,
        network=network,
        counts=counts,
        accuracy=accuracy,
        precision=precision,
        f1=f1,
        tp_rate_percent=100.0 * recall,
        fp_rate_percent=100.0 * fp_rate,
        flags=tuple(flags),
    )


def round_half_up(value: float, digits: int = 2) -> float:
    """Half-up decimal rounding (0.005 -> 0.01), matching table precision."""
    q = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


def _fmt(value: float) -> str:
    return f"{round_half_up(value):.2f}"


def report_table(reports: list[EvalReport]) -> str:
    """Fixed-width text table: Data | Network | A | P | F1 | TP(%) | FP(%)."""
    if not reports:
        raise ValueError("need at least one report")
    header = ["Data", "Network", "A", "P", "F1", "TP(%)", "FP(%)"]
    rows = [
        [
            r.variant or "-",
            r.network or "-",
            _fmt(r.accuracy),
            _fmt(r.precision),
            _fmt(r.f1),
            _fmt(r.tp_rate_percent),
            _fmt(r.fp_rate_percent),
        ]
        for r in reports
    ]
    widths = [max(len(header[i]), max(len(row[i]) for row in rows)) for i in range(len(header))]
    lines = [" ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append(" ".join("-" * w for w in widths))
    for row in rows:
        lines.append(" ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def report_to_json(report: EvalReport) -> dict:
    """CLI-facing JSON schema for one variant."""
    return {
        "variant": report.variant,
        "counts": {
            "tp": report.counts.tp,
            "fn": report.counts.fn,
            "fp": report.counts.fp,
            "tn": report.counts.tn,
        },
        "metrics": {
            "A": report.accuracy,
            "P": report.precision,
            "F1": report.f1,
            "TP_pct": report.tp_rate_percent,
            "FP_pct": report.fp_rate_percent,
        },
        "flags": list(report.flags),
    }
