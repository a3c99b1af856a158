"""Word error rate, the matched-pairs significance test and result tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .exceptions import EvaluationError

SIG_LEVEL = 0.01
TEST_NAME = "MAPSSWE (utterance-segment)"
SIG_MARK, NOSIG_MARK = "†", "−"


@dataclass
class UttScore:
    id: str
    n_ref_words: int
    n_sub: int
    n_del: int
    n_ins: int

    @property
    def n_err(self) -> int:
        return self.n_sub + self.n_del + self.n_ins


@dataclass
class WerReport:
    scores: list[UttScore]
    system: str = ""
    condition: str = ""
    lm: bool = False

    @property
    def wer(self) -> float:
        ref = sum(s.n_ref_words for s in self.scores)
        return sum(s.n_err for s in self.scores) / ref if ref else 0.0

    def errors(self) -> dict[str, int]:
        return {s.id: s.n_err for s in self.scores}


@dataclass
class SigResult:
    z: float
    p_two_tailed: float
    n_segments: int
    degenerate: bool = False

    @property
    def significant(self) -> bool:
        return self.p_two_tailed < SIG_LEVEL


def align_counts(ref: Sequence[str], hyp: Sequence[str]) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) of a minimum edit alignment.

    Ties between equally short alignments are broken by preferring a
    diagonal step, then a deletion, during the backtrace.
    """
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(sub, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    i, j, s, d, ins = n, m, 0, 0, 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), d, ins


def wer(refs: Mapping[str, Sequence[str]], hyps: Mapping[str, Sequence[str]], system: str = "",
        condition: str = "", lm: bool = False) -> WerReport:
    """Per-utterance edit counts and the pooled WER; inputs keyed by utterance id."""
    if set(refs) != set(hyps):
        missing = sorted(set(refs) ^ set(hyps))[:5]
        raise EvaluationError(f"reference/hypothesis ids differ, e.g. {missing}")
    scores = []
    for uid in sorted(refs):
        ref = list(refs[uid])
        if not ref:
            raise EvaluationError(f"empty reference for {uid}")
        s, d, i = align_counts(ref, list(hyps[uid]))
        scores.append(UttScore(uid, len(ref), s, d, i))
    return WerReport(scores, system, condition, lm)


def mapsswe(err_a: Sequence[float], err_b: Sequence[float]) -> SigResult:
    """Matched-pairs test on per-segment error counts (normal approximation)."""
    a, b = np.asarray(err_a, dtype=np.float64), np.asarray(err_b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError("both systems must be scored on the same segments")
    n = len(a)
    if n < 2:
        raise EvaluationError("need at least two segments")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return SigResult(0.0, 1.0, n)
        return SigResult(math.copysign(math.inf, mean), 0.0, n, degenerate=True)
    z = mean / (sd / math.sqrt(n))
    return SigResult(z, math.erfc(abs(z) / math.sqrt(2.0)), n)


def compare_reports(a: WerReport, b: WerReport) -> SigResult:
    ea, eb = a.errors(), b.errors()
    if set(ea) != set(eb):
        raise EvaluationError(f"systems {a.system!r} and {b.system!r} were scored on different test sets")
    ids = sorted(ea)
    return mapsswe([ea[i] for i in ids], [eb[i] for i in ids])


@dataclass
class ResultTable:
    row_labels: list[str]
    conditions: list[str]
    cells: dict[tuple[str, str, bool], float]
    marks: dict[tuple[str, str, bool], list[str]] = field(default_factory=dict)
    baselines: list[str] = field(default_factory=list)
    row_header: str = "Adaptation"

    def cell_text(self, key) -> str:
        if key not in self.cells:
            return ""
        text = f"{100 * self.cells[key]:.1f}"
        marks = self.marks.get(key)
        return f"{text}<sup>{','.join(marks)}</sup>" if marks else text

    def columns(self) -> list[tuple[str, bool]]:
        return [(c, lm) for c in self.conditions for lm in (False, True)]

    def to_markdown(self) -> str:
        heads = [self.row_header] + [
            (f"{c}: " if len(self.conditions) > 1 or c else "") + ("+LM" if lm else "test set")
            for c, lm in self.columns()
        ]
        lines = ["| " + " | ".join(heads) + " |", "|" + "|".join("---" for _ in heads) + "|"]
        for r in self.row_labels:
            lines.append("| " + " | ".join([r] + [self.cell_text((r, c, lm)) for c, lm in self.columns()]) + " |")
        if self.baselines:
            lines.append("")
            lines.append(
                f"WER [%]. Superscripts compare against {', '.join(self.baselines)} (in that order) with the "
                f"{TEST_NAME} test: {SIG_MARK} significant at p < {SIG_LEVEL}, {NOSIG_MARK} no significant difference."
            )
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["system", "condition", "lm", "wer_percent", "significance"])
        for r in self.row_labels:
            for c, lm in self.columns():
                key = (r, c, lm)
                if key in self.cells:
                    w.writerow([r, c, int(lm), f"{100 * self.cells[key]:.1f}", ",".join(self.marks.get(key, []))])
        return buf.getvalue()


def compare(systems: Sequence[WerReport], baseline: str | Sequence[str] | None = None) -> ResultTable:
    """Arrange reports as rows (system) by condition x {test set, +LM} columns.

    Every non-baseline cell gets one significance mark per baseline, computed
    against that baseline's report in the same cell.
    """
    baselines = [baseline] if isinstance(baseline, str) else list(baseline or [])
    rows = list(dict.fromkeys(r.system for r in systems))
    conditions = list(dict.fromkeys(r.condition for r in systems))
    by_key = {}
    for r in systems:
        key = (r.system, r.condition, r.lm)
        if key in by_key:
            raise EvaluationError(f"duplicate report for {key}")
        by_key[key] = r
    ids = None
    for r in systems:
        these = {s.id for s in r.scores}
        if ids is None:
            ids = these
        elif these != ids:
            raise EvaluationError("reports cover mismatched test sets")
    for b in baselines:
        if b not in rows:
            raise EvaluationError(f"baseline {b!r} not among systems {rows}")
    cells = {k: r.wer for k, r in by_key.items()}
    marks = {}
    if len(rows) > 1:
        for (sysname, cond, lm), rep in by_key.items():
            if sysname in baselines:
                continue
            m = []
            for b in baselines:
                base = by_key.get((b, cond, lm))
                if base is None:
                    continue
                m.append(SIG_MARK if compare_reports(rep, base).significant else NOSIG_MARK)
            if m:
                marks[(sysname, cond, lm)] = m
    return ResultTable(rows, conditions, cells, marks, baselines if len(rows) > 1 else [])


def report_to_dict(r: WerReport) -> dict:
    return {
        "system": r.system,
        "condition": r.condition,
        "lm": r.lm,
        "wer": r.wer,
        "scores": [[s.id, s.n_ref_words, s.n_sub, s.n_del, s.n_ins] for s in r.scores],
    }


def report_from_dict(d: dict) -> WerReport:
    try:
        scores = [UttScore(str(i), int(n), int(s), int(dl), int(ins)) for i, n, s, dl, ins in d["scores"]]
        return WerReport(scores, d.get("system", ""), d.get("condition", ""), bool(d.get("lm", False)))
    except (KeyError, TypeError, ValueError) as exc:
        raise EvaluationError(f"malformed WER report: {exc}") from None
