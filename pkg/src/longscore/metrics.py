"""Weighted kappa agreement statistics and grade-level QWK reports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, InputError, LabelError, UndefinedKappaError

REPORT_GRADES = (6, 8, 10)


@dataclass
class RatingTable:
    """Paired integer ratings over the inclusive ``score_range``."""

    pairs: list
    score_range: tuple
    groups: Optional[list] = None

    def __post_init__(self):
        lo, hi = self.score_range
        self.score_range = (int(lo), int(hi))
        self.pairs = [(int(a), int(b)) for a, b in self.pairs]
        if hi - lo + 1 < 2:
            raise InputError(f"score range {self.score_range} needs at least two scores")
        if self.groups is not None and len(self.groups) != len(self.pairs):
            raise InputError("one group label per pair is required")

    @classmethod
    def from_columns(cls, rater1, rater2, score_range, groups=None) -> "RatingTable":
        if len(rater1) != len(rater2):
            raise InputError("rater columns differ in length")
        return cls(list(zip(rater1, rater2)), tuple(score_range),
                   None if groups is None else list(groups))

    @property
    def n_scores(self) -> int:
        return self.score_range[1] - self.score_range[0] + 1

    def subset(self, group) -> "RatingTable":
        keep = [p for p, g in zip(self.pairs, self.groups) if g == group]
        return RatingTable(keep, self.score_range)


@dataclass
class AgreementMatrices:
    observed: np.ndarray
    expected: np.ndarray
    weights: np.ndarray


def weight_matrix(n: int, kind: str = "quadratic") -> np.ndarray:
    i = np.arange(n)
    diff = np.abs(i[:, None] - i[None, :]).astype(np.float64)
    if kind == "quadratic":
        return diff ** 2 / (n - 1) ** 2
    if kind == "linear":
        return diff / (n - 1)
    raise ConfigurationError(f"unknown weighting {kind!r}")


def build_matrices(table: RatingTable, weights: str = "quadratic") -> AgreementMatrices:
    """Observed and chance-expected joint proportions plus the weight matrix."""
    if not table.pairs:
        raise InputError("cannot compute agreement on an empty rating table")
    lo, hi = table.score_range
    r = np.asarray(table.pairs, dtype=np.int64)
    if ((r < lo) | (r > hi)).any():
        bad = r[((r < lo) | (r > hi)).any(axis=1)][0].tolist()
        raise LabelError(f"rating pair {bad} outside score range {table.score_range}")
    n = table.n_scores
    counts = np.zeros((n, n))
    np.add.at(counts, (r[:, 0] - lo, r[:, 1] - lo), 1.0)
    O = counts / len(r)
    E = np.outer(O.sum(axis=1), O.sum(axis=0))
    return AgreementMatrices(O, E, weight_matrix(n, weights))


def weighted_kappa(m: AgreementMatrices) -> float:
    """1 - sum(W*O) / sum(W*E); raises when the denominator vanishes."""
    den = float(np.sum(m.weights * m.expected))
    if den == 0.0:
        raise UndefinedKappaError("weighted kappa is 0/0: both raters use a single common score")
    return 1.0 - float(np.sum(m.weights * m.observed)) / den


def quadratic_weighted_kappa(rater1, rater2, score_range, weights: str = "quadratic") -> float:
    table = RatingTable.from_columns(rater1, rater2, score_range)
    return weighted_kappa(build_matrices(table, weights))


@dataclass
class KappaReport:
    """Overall and per-grade kappa for one model; ``None`` marks a blank cell."""

    model: str
    overall: Optional[float]
    by_group: dict = field(default_factory=dict)
    undefined: list = field(default_factory=list)

    def cell(self, group) -> Optional[float]:
        return self.by_group.get(group)


def _kappa_or_none(table: RatingTable, weights: str, label, undefined: list) -> Optional[float]:
    try:
        return weighted_kappa(build_matrices(table, weights))
    except UndefinedKappaError:
        undefined.append(label)
        return None


def per_group_report(table: RatingTable, model: str = "model", weights: str = "quadratic",
                     grades: Sequence[int] = REPORT_GRADES) -> KappaReport:
    """Overall kappa plus one kappa per grade.

    Grades without pairs are left blank. A degenerate group is left blank
    and listed in ``undefined`` so the caller can surface it.
    """
    undefined: list = []
    overall = _kappa_or_none(table, weights, "overall", undefined)
    by_group = {}
    present = set(table.groups or [])
    for g in grades:
        if g in present:
            by_group[g] = _kappa_or_none(table.subset(g), weights, g, undefined)
        else:
            by_group[g] = None
    return KappaReport(model, overall, by_group, undefined)


def reports_from_tables(tables: Mapping, weights: str = "quadratic") -> KappaReport:
    """Build a report from separate per-grade tables (keys are grades)."""
    pairs, groups, rng = [], [], None
    for grade, t in tables.items():
        pairs += t.pairs
        groups += [grade] * len(t.pairs)
        rng = t.score_range
    return per_group_report(RatingTable(pairs, rng, groups), weights=weights)


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.3f}"


REPORT_COLUMNS = ("model", "overall", "grade6", "grade8", "grade10")


def report_rows(reports: Sequence[KappaReport]) -> list[list[str]]:
    return [[r.model, _fmt(r.overall)] + [_fmt(r.cell(g)) for g in REPORT_GRADES] for r in reports]


def format_report_csv(reports: Sequence[KappaReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    w.writerows(report_rows(reports))
    return buf.getvalue()


def format_report_text(reports: Sequence[KappaReport]) -> str:
    header = ["Model", "Overall", "6", "8", "10"]
    rows = report_rows(reports)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = []
    for k, row in enumerate([header] + rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if k == 0:
            lines.append("-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> list[KappaReport]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        missing = [c for c in REPORT_COLUMNS if c not in row]
        if missing:
            raise InputError(f"report is missing columns {missing}")

        def val(c):
            return float(row[c]) if row[c] else None

        out.append(KappaReport(row["model"], val("overall"),
                               {g: val(f"grade{g}") for g in REPORT_GRADES}))
    return out
