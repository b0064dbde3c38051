"""Set-based effectiveness metrics, paired t-tests and result tables."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

__all__ = [
    "METRICS",
    "DegenerateSample",
    "EmptyRun",
    "LengthMismatch",
    "RunSummary",
    "TTestResult",
    "TableReport",
    "TopicEval",
    "TopicSetMismatch",
    "bonferroni",
    "build_table",
    "evaluate_run",
    "evaluate_topic",
    "f_beta",
    "macro_average",
    "micro_average",
    "paired_t_test",
    "student_t_sf",
]

log = logging.getLogger(__name__)

METRICS = ("precision", "recall", "f1", "f3")


class EmptyRun(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class DegenerateSample(ArithmeticError):
    pass


class TopicSetMismatch(ValueError):
    def __init__(self, differing: Iterable[str]):
        self.differing = sorted(differing)
        super().__init__(f"runs cover different topics: {', '.join(self.differing)}")


def f_beta(precision: float, recall: float, beta: float) -> float:
    if precision == recall:
        # exact: F_beta of equal P and R is P for every beta; avoids rounding drift
        return precision
    b2 = beta * beta
    return (1 + b2) * precision * recall / (b2 * precision + recall)


@dataclass(frozen=True)
class TopicEval:
    topic_id: str
    retrieved: frozenset[str]
    relevant: frozenset[str]
    precision: float
    recall: float
    f1: float
    f3: float
    truncated: bool = False

    def metric(self, name: str) -> float:
        return getattr(self, name)

    def to_json(self) -> dict:
        return {
            "topic_id": self.topic_id,
            "n_retrieved": len(self.retrieved),
            "n_relevant": len(self.relevant),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "f3": self.f3,
            "truncated": self.truncated,
        }


def evaluate_topic(
    retrieved: Iterable[str],
    relevant: Iterable[str],
    topic_id: str = "",
    truncated: bool = False,
) -> TopicEval:
    """Precision, recall, F1 and F3 of one retrieved set.

    Empty denominators give 0.  A truncated retrieved set still yields
    numbers, but recall is then a lower bound and a warning is logged.
    """
    retrieved = frozenset(retrieved)
    relevant = frozenset(relevant)
    hits = len(retrieved & relevant)
    precision = hits / len(retrieved) if retrieved else 0.0
    recall = hits / len(relevant) if relevant else 0.0
    if not relevant:
        log.info("topic %s has no relevant documents; recall set to 0", topic_id or "?")
    if truncated:
        log.warning("topic %s: retrieved set was truncated, recall is a lower bound", topic_id or "?")
    return TopicEval(
        topic_id,
        retrieved,
        relevant,
        precision,
        recall,
        f_beta(precision, recall, 1.0),
        f_beta(precision, recall, 3.0),
        truncated,
    )


@dataclass(frozen=True)
class RunSummary:
    per_topic: tuple[TopicEval, ...]
    macro: Mapping[str, float]

    @property
    def n_topics(self) -> int:
        return len(self.per_topic)

    @property
    def topic_ids(self) -> tuple[str, ...]:
        return tuple(t.topic_id for t in self.per_topic)

    def vector(self, metric: str, order: Sequence[str] | None = None) -> list[float]:
        by_id = {t.topic_id: t for t in self.per_topic}
        order = order or sorted(by_id)
        return [by_id[tid].metric(metric) for tid in order]


def macro_average(evals: Sequence[TopicEval]) -> RunSummary:
    if not evals:
        raise EmptyRun("cannot average an empty run")
    n = len(evals)
    macro = {m: math.fsum(e.metric(m) for e in evals) / n for m in METRICS}
    return RunSummary(tuple(evals), macro)


def micro_average(evals: Sequence[TopicEval]) -> dict[str, float]:
    """Pooled metrics: hits, retrieved and relevant counts are summed over topics first."""
    if not evals:
        raise EmptyRun("cannot average an empty run")
    hits = sum(len(e.retrieved & e.relevant) for e in evals)
    retrieved = sum(len(e.retrieved) for e in evals)
    relevant = sum(len(e.relevant) for e in evals)
    precision = hits / retrieved if retrieved else 0.0
    recall = hits / relevant if relevant else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f_beta(precision, recall, 1.0),
        "f3": f_beta(precision, recall, 3.0),
    }


def evaluate_run(
    retrieved: Mapping[str, Iterable[str]],
    qrels: Mapping[str, Iterable[str]],
    truncated: Mapping[str, bool] | None = None,
) -> RunSummary:
    truncated = truncated or {}
    evals = [
        evaluate_topic(retrieved[tid], qrels.get(tid, ()), tid, truncated.get(tid, False))
        for tid in sorted(retrieved)
    ]
    return macro_average(evals)


# --- Student's t distribution -------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    # the fraction converges fast only on one side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for T ~ t(df)."""
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float
    raw_p: float
    df: int
    degenerate: bool = False


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test on ``a - b``.

    Identical samples give ``t=0, p=1``.  Constant non-zero differences have
    no variance; the result is flagged ``degenerate`` with an infinite t and
    ``p=0``.
    """
    if len(a) != len(b):
        raise LengthMismatch(f"samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise LengthMismatch("paired t-test needs at least two pairs")
    d = [x - y for x, y in zip(a, b)]
    mean = math.fsum(d) / n
    var = math.fsum((x - mean) ** 2 for x in d) / (n - 1)
    sd = math.sqrt(var)
    if sd == 0.0 or sd <= 1e-15 * max(1.0, abs(mean)):
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n - 1)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n - 1, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, min(1.0, student_t_sf(t, n - 1)), n - 1)


def bonferroni(raw_p: float, m: int) -> float:
    if not 0.0 <= raw_p <= 1.0:
        raise ValueError("p-value must lie in [0, 1]")
    if m < 1:
        raise ValueError("family size must be positive")
    return min(1.0, raw_p * m)


# --- tables -------------------------------------------------------------------


@dataclass(frozen=True)
class Comparison:
    family: str  # a: best prompt per backend, b: best backend per prompt, c: manual baseline
    baseline_id: str
    candidate_id: str
    metric: str
    t_statistic: float
    raw_p: float
    adjusted_p: float
    significant: bool


@dataclass
class TableReport:
    metrics: tuple[str, ...]
    prompts: tuple[str, ...]
    backends: tuple[str, ...]
    cells: dict[tuple[str, str, str], float]
    markers: dict[tuple[str, str, str], str]
    comparisons: list[Comparison]
    family_sizes: dict[tuple[str, str], int]
    baseline: Mapping[str, float] | None
    alpha: float = 0.05
    title: str = ""
    baseline_label: str = "manual"
    n_topics: int = 0

    def header_lines(self) -> list[str]:
        lines = [
            f"# {self.title}" if self.title else "# results",
            f"# paired t-test, Bonferroni-corrected, significant if adjusted p < {self.alpha}",
            "# a: vs best prompt for the backend; b: vs best backend for the prompt; "
            f"c: vs {self.baseline_label} baseline",
        ]
        if self.n_topics < 2:
            lines.append("# fewer than two topics: no significance tests")
        for (family, metric), m in sorted(self.family_sizes.items()):
            lines.append(f"# family {family} / {metric}: m = {m}")
        return lines

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "prompt", "backend", "value", "markers"])
        for metric in self.metrics:
            if self.baseline is not None:
                writer.writerow([metric, self.baseline_label, "", f"{self.baseline[metric]:.4f}", ""])
            for prompt in self.prompts:
                for backend in self.backends:
                    key = (metric, prompt, backend)
                    if key in self.cells:
                        writer.writerow([metric, prompt, backend, f"{self.cells[key]:.4f}", self.markers.get(key, "")])
        return buf.getvalue()

    def comparisons_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(
            ["family", "metric", "baseline", "candidate", "t", "raw_p", "adjusted_p", "significant"]
        )
        for c in self.comparisons:
            writer.writerow(
                [c.family, c.metric, c.baseline_id, c.candidate_id, f"{c.t_statistic:.6g}",
                 f"{c.raw_p:.6g}", f"{c.adjusted_p:.6g}", int(c.significant)]
            )
        return buf.getvalue()

    def to_text(self) -> str:
        def cell(metric: str, prompt: str, backend: str) -> str:
            key = (metric, prompt, backend)
            if key not in self.cells:
                return "--"
            value = f"{self.cells[key]:.4f}".lstrip("0")
            mark = self.markers.get(key, "")
            return f"{value}^{mark}" if mark else value

        head = ["metric", "prompt", *self.backends]
        rows = []
        for metric in self.metrics:
            if self.baseline is not None:
                rows.append([metric, self.baseline_label, f"{self.baseline[metric]:.4f}".lstrip("0")] + [""] * (len(self.backends) - 1))
            for prompt in self.prompts:
                rows.append([metric, prompt, *(cell(metric, prompt, b) for b in self.backends)])
        widths = [max(len(r[i]) for r in [head, *rows]) for i in range(len(head))]
        fmt = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
        out = self.header_lines() + [fmt(head), fmt(["-" * w for w in widths])]
        out += [fmt(r) for r in rows]
        return "\n".join(out) + "\n"


def _check_topics(runs: Mapping[str, RunSummary]) -> tuple[str, ...]:
    reference: set[str] | None = None
    differing: set[str] = set()
    for summary in runs.values():
        ids = set(summary.topic_ids)
        if reference is None:
            reference = ids
        else:
            differing |= ids ^ reference
    if differing:
        raise TopicSetMismatch(differing)
    return tuple(sorted(reference or ()))


def build_table(
    runs: Mapping[tuple[str, str], RunSummary],
    baseline: RunSummary | None = None,
    metrics: Sequence[str] = METRICS,
    alpha: float = 0.05,
    title: str = "",
    baseline_label: str = "manual",
) -> TableReport:
    """Assemble a prompts x backends table with a/b/c significance markers.

    ``runs`` maps ``(prompt, backend)`` to an evaluated run.  Each marker
    family is Bonferroni-corrected separately per metric, with ``m`` equal to
    the number of tests actually performed in that family.
    """
    named = {f"{p}/{b}": s for (p, b), s in runs.items()}
    if baseline is not None:
        named[baseline_label] = baseline
    order = _check_topics(named)

    prompts = tuple(dict.fromkeys(p for p, _ in runs))
    backends = tuple(dict.fromkeys(b for _, b in runs))
    cells = {(m, p, b): s.macro[m] for (p, b), s in runs.items() for m in metrics}

    planned: list[tuple[str, str, tuple[str, str], tuple[str, str] | None]] = []
    for metric in metrics:
        for backend in backends:
            column = [(p, backend) for p in prompts if (p, backend) in runs]
            best = max(column, key=lambda k: runs[k].macro[metric], default=None)
            planned += [("a", metric, k, best) for k in column if k != best]
        for prompt in prompts:
            row = [(prompt, b) for b in backends if (prompt, b) in runs]
            best = max(row, key=lambda k: runs[k].macro[metric], default=None)
            planned += [("b", metric, k, best) for k in row if k != best]
        if baseline is not None:
            planned += [("c", metric, k, None) for k in runs]
    if len(order) < 2:
        planned = []

    family_sizes: dict[tuple[str, str], int] = {}
    for family, metric, _, _ in planned:
        family_sizes[(family, metric)] = family_sizes.get((family, metric), 0) + 1

    comparisons = []
    marks: dict[tuple[str, str, str], list[str]] = {}
    for family, metric, key, ref in planned:
        ref_summary = baseline if ref is None else runs[ref]
        ref_id = baseline_label if ref is None else f"{ref[0]}/{ref[1]}"
        result = paired_t_test(runs[key].vector(metric, order), ref_summary.vector(metric, order))
        adjusted = bonferroni(result.raw_p, family_sizes[(family, metric)])
        significant = adjusted < alpha
        comparisons.append(
            Comparison(family, ref_id, f"{key[0]}/{key[1]}", metric, result.t, result.raw_p, adjusted, significant)
        )
        if significant:
            marks.setdefault((metric, *key), []).append(family)

    markers = {k: ",".join(sorted(v)) for k, v in marks.items()}
    return TableReport(
        tuple(metrics), prompts, backends, cells, markers, comparisons, family_sizes,
        dict(baseline.macro) if baseline is not None else None, alpha, title, baseline_label, len(order),
    )
