"""Formulation, refinement and guided experiments with validation and retries.

Each attempt runs extract -> rule check -> retrieval-count check.  The loop
stops at the first valid query; after ``max_attempts`` failures the last
extracted query is kept.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from .corpus import CorpusIndex, Qrels, Topic
from .entrez import QuerySyntaxRejected, ValidityPolicy, validate_count
from .evaluation import evaluate_topic
from .llm import (
    Backend,
    BackendError,
    ChatRequest,
    GenerationConfig,
    NoQueryFound,
    PromptTemplate,
    extract_query,
    generate,
    load_extractor_instruction,
    render_prompt,
)
from .matcher import MeshHierarchy, RetrievalResult, evaluate
from .query import ParseError, QueryError, ValidityReport, check_rules, combine_or, parse, serialize

__all__ = [
    "Attempt",
    "GenerationRecord",
    "GuidedOutcome",
    "LocalRetriever",
    "MissingBaseline",
    "NoSeeds",
    "OneShotExample",
    "PipelineConfig",
    "QueryGenerator",
    "RunWriter",
    "SeedStrategy",
    "attempt_stats",
    "load_records",
    "persist_run",
    "select_guided",
    "verify_manifest",
]

log = logging.getLogger(__name__)

FORMULATION_PROMPTS = ("p1", "p2", "p3", "p4", "p5")
REFINEMENT_PROMPTS = ("p6", "p7")
VERDICTS = ("valid", "rule_invalid", "retrieval_invalid", "extraction_failed")


class MissingBaseline(KeyError):
    def __init__(self, topic_id: str, role: str):
        super().__init__(role)
        self.topic_id = topic_id
        self.role = role

    def __str__(self) -> str:
        return f"topic {self.topic_id} has no {self.role} baseline query"


class NoSeeds(ValueError):
    pass


class Retriever(Protocol):
    def search(self, query_text: str, search_date: date | None = None) -> RetrievalResult: ...


class LocalRetriever:
    """Executes query text against a local index; the offline stand-in for PubMed."""

    def __init__(
        self,
        index: CorpusIndex,
        hierarchy: MeshHierarchy | None = None,
        mode: str = "left_to_right",
    ):
        self.index = index
        self.hierarchy = hierarchy
        self.mode = mode
        self.calls = 0

    def search(self, query_text: str, search_date: date | None = None) -> RetrievalResult:
        self.calls += 1
        return evaluate(parse(query_text, self.mode), self.index, search_date, self.hierarchy)


@dataclass(frozen=True)
class PipelineConfig:
    max_attempts: int = 20
    validity: ValidityPolicy = ValidityPolicy()
    retrieval_target: str = "local_index"
    keep_last_on_exhaustion: bool = True
    use_search_date: bool = True

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        if self.retrieval_target not in ("local_index", "entrez"):
            raise ValueError(f"unknown retrieval target {self.retrieval_target!r}")

    def to_json(self) -> dict:
        data = asdict(self)
        data["validity"] = asdict(self.validity)
        return data


@dataclass(frozen=True)
class OneShotExample:
    """The worked example bound into one-shot prompts (CD010438 by default)."""

    topic_id: str
    title: str
    query: str

    @classmethod
    def from_topic(cls, topic: Topic, role: str = "manual") -> "OneShotExample":
        if role not in topic.baseline_queries:
            raise MissingBaseline(topic.topic_id, role)
        return cls(topic.topic_id, topic.title, topic.baseline_queries[role])


@dataclass(frozen=True)
class Attempt:
    raw_output: str
    extracted_query: str
    rule_report: ValidityReport
    retrieval_count: int | None
    verdict: str
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "raw_output": self.raw_output,
            "extracted_query": self.extracted_query,
            "rule_report": self.rule_report.to_json(),
            "retrieval_count": self.retrieval_count,
            "verdict": self.verdict,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Attempt":
        return cls(
            data["raw_output"],
            data["extracted_query"],
            ValidityReport.from_json(data["rule_report"]),
            data["retrieval_count"],
            data["verdict"],
            data.get("error"),
        )


@dataclass(frozen=True)
class GenerationRecord:
    topic_id: str
    prompt_id: str
    backend_id: str
    attempts: tuple[Attempt, ...]
    final_query: str
    final_valid: bool
    base_role: str | None = None
    seed_pmid: str | None = None
    notes: tuple[str, ...] = ()

    @property
    def attempts_used(self) -> int:
        return len(self.attempts)

    def to_json(self) -> dict:
        return {
            "topic_id": self.topic_id,
            "prompt_id": self.prompt_id,
            "backend_id": self.backend_id,
            "base_role": self.base_role,
            "seed_pmid": self.seed_pmid,
            "attempts_used": self.attempts_used,
            "final_query": self.final_query,
            "final_valid": self.final_valid,
            "notes": list(self.notes),
            "attempts": [a.to_json() for a in self.attempts],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "GenerationRecord":
        return cls(
            data["topic_id"],
            data["prompt_id"],
            data["backend_id"],
            tuple(Attempt.from_json(a) for a in data["attempts"]),
            data["final_query"],
            data["final_valid"],
            data.get("base_role"),
            data.get("seed_pmid"),
            tuple(data.get("notes", ())),
        )


@dataclass(frozen=True)
class SeedStrategy:
    mode: str = "per_seed"  # per_seed, best, combined
    selection_metric: str = "recall"

    def __post_init__(self) -> None:
        if self.mode not in ("per_seed", "best", "combined"):
            raise ValueError(f"unknown seed strategy {self.mode!r}")
        if self.selection_metric not in ("recall", "f1", "f3"):
            raise ValueError(f"unknown selection metric {self.selection_metric!r}")


@dataclass(frozen=True)
class GuidedOutcome:
    topic_id: str
    strategy: SeedStrategy
    records: tuple[GenerationRecord, ...]
    final_query: str | None
    selected_seed: str | None = None
    seed_scores: Mapping[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "topic_id": self.topic_id,
            "strategy": self.strategy.mode,
            "selection_metric": self.strategy.selection_metric,
            "final_query": self.final_query,
            "selected_seed": self.selected_seed,
            "seed_scores": dict(sorted(self.seed_scores.items())),
        }


def seed_text_from_index(index: CorpusIndex) -> Callable[[str], str | None]:
    def lookup(pmid: str) -> str | None:
        doc = index.documents.get(pmid)
        if doc is None:
            return None
        return f"Title: {doc.title}\nAbstract: {doc.abstract}".strip()

    return lookup


class QueryGenerator:
    """Runs the generate/validate/retry loop for one experiment configuration."""

    def __init__(
        self,
        templates: Mapping[str, PromptTemplate],
        retriever: Retriever,
        config: PipelineConfig = PipelineConfig(),
        extractor: Backend | None = None,
        extractor_config: GenerationConfig | None = None,
        example: OneShotExample | None = None,
        seed_lookup: Callable[[str], str | None] | None = None,
        extractor_instruction: PromptTemplate | None = None,
    ):
        self.templates = templates
        self.retriever = retriever
        self.config = config
        self.extractor = extractor
        self.extractor_config = extractor_config or (
            GenerationConfig(extractor.backend_id, temperature=0.0) if extractor else None
        )
        self.extractor_instruction = extractor_instruction or (
            load_extractor_instruction() if extractor else None
        )
        self.example = example
        self.seed_lookup = seed_lookup

    # -- core loop ---------------------------------------------------------

    def _attempt(self, request: ChatRequest, backend: Backend, topic: Topic) -> tuple[Attempt, bool]:
        """One generate-validate pass.  Returns the attempt and whether to abort."""
        mode = request.config.output_mode
        empty = ValidityReport()
        try:
            raw = generate(request, backend)
        except BackendError as exc:
            verdict = Attempt("", "", empty, None, "extraction_failed", f"backend: {exc}")
            return verdict, not exc.transient
        try:
            query = extract_query(
                raw, self.extractor, mode, self.extractor_config, self.extractor_instruction
            )
        except (NoQueryFound, BackendError) as exc:
            return Attempt(raw, "", empty, None, "extraction_failed", str(exc)), False
        report = check_rules(query)
        if not report.valid:
            return Attempt(raw, query, report, None, "rule_invalid"), False
        cutoff = topic.search_date if self.config.use_search_date else None
        try:
            result = self.retriever.search(query, cutoff)
        except (QueryError, QuerySyntaxRejected) as exc:
            return Attempt(raw, query, report, None, "retrieval_invalid", str(exc)), False
        verdict = "valid" if validate_count(result, self.config.validity) else "retrieval_invalid"
        return Attempt(raw, query, report, result.count, verdict), False

    def _loop(
        self,
        topic: Topic,
        prompt_id: str,
        backend: Backend,
        gen_config: GenerationConfig,
        bindings: Mapping[str, str],
        base_role: str | None = None,
        seed_pmid: str | None = None,
    ) -> GenerationRecord:
        template = self.templates[prompt_id]
        request = render_prompt(template, topic, bindings, gen_config.output_mode, gen_config)
        attempts: list[Attempt] = []
        notes: list[str] = []
        ignored = getattr(backend, "unsupported", None) or getattr(
            getattr(backend, "inner", None), "unsupported", None
        )
        if ignored:
            notes.append(f"backend ignores: {', '.join(sorted(ignored))}")
        for _ in range(self.config.max_attempts):
            attempt, abort = self._attempt(request, backend, topic)
            attempts.append(attempt)
            if attempt.verdict == "valid":
                break
            if abort:
                notes.append("aborted after permanent backend error")
                break
        valid = attempts[-1].verdict == "valid"
        # the last generated query, skipping attempts that produced none
        final = next((a.extracted_query for a in reversed(attempts) if a.extracted_query), "")
        if not valid and not self.config.keep_last_on_exhaustion:
            final = ""
        return GenerationRecord(
            topic.topic_id,
            prompt_id,
            backend.backend_id,
            tuple(attempts),
            final,
            valid,
            base_role,
            seed_pmid,
            tuple(notes),
        )

    # -- experiment flows --------------------------------------------------

    def _example_bindings(self, prompt_id: str) -> dict[str, str]:
        if self.templates[prompt_id].kind.endswith("one_shot"):
            if self.example is None:
                return {}
            return {"example_topic": self.example.title, "example_query": self.example.query}
        return {}

    def run_formulation(
        self, topic: Topic, prompt_id: str, backend: Backend, gen_config: GenerationConfig
    ) -> GenerationRecord:
        if prompt_id not in FORMULATION_PROMPTS:
            raise ValueError(f"{prompt_id} is not a formulation prompt")
        return self._loop(topic, prompt_id, backend, gen_config, self._example_bindings(prompt_id))

    def run_refinement(
        self,
        topic: Topic,
        prompt_id: str,
        base_role: str,
        backend: Backend,
        gen_config: GenerationConfig,
    ) -> GenerationRecord:
        if prompt_id not in REFINEMENT_PROMPTS:
            raise ValueError(f"{prompt_id} is not a refinement prompt")
        if base_role not in topic.baseline_queries:
            raise MissingBaseline(topic.topic_id, base_role)
        bindings = self._example_bindings(prompt_id)
        bindings["query_to_refine"] = topic.baseline_queries[base_role]
        return self._loop(topic, prompt_id, backend, gen_config, bindings, base_role=base_role)

    def run_guided(
        self,
        topic: Topic,
        backend: Backend,
        gen_config: GenerationConfig,
        strategy: SeedStrategy = SeedStrategy(),
        qrels: Qrels | None = None,
    ) -> GuidedOutcome:
        """Generate one query per seed study, then apply the seed strategy.

        ``best`` evaluates every valid per-seed query against ``qrels`` and
        keeps the highest-scoring one (ties go to the lexicographically
        smallest seed pmid); ``combined`` ORs all per-seed final queries.
        """
        if not topic.seed_pmids:
            raise NoSeeds(f"topic {topic.topic_id} has no seed studies")
        if strategy.mode == "best" and qrels is None:
            raise ValueError("the best-seed strategy needs relevance judgments")
        lookup = self.seed_lookup or (lambda pmid: None)
        records = []
        for pmid in topic.seed_pmids:
            text = lookup(pmid)
            if text is None:
                records.append(
                    GenerationRecord(topic.topic_id, "guided", backend.backend_id, (), "", False,
                                     seed_pmid=pmid, notes=(f"seed document {pmid} not found",))
                )
                continue
            records.append(
                self._loop(topic, "guided", backend, gen_config, {"seed_studies": text}, seed_pmid=pmid)
            )

        return select_guided(topic, records, strategy, self.retriever, qrels, self.config.use_search_date)


def select_guided(
    topic: Topic,
    records: Sequence[GenerationRecord],
    strategy: SeedStrategy,
    retriever: Retriever | None = None,
    qrels: Qrels | None = None,
    use_search_date: bool = True,
) -> GuidedOutcome:
    """Turn per-seed guided records into the final query of a seed strategy."""
    records = tuple(r for r in records if r.topic_id == topic.topic_id)
    usable = [r for r in records if r.final_query and _parses(r.final_query)]
    if strategy.mode == "per_seed":
        return GuidedOutcome(topic.topic_id, strategy, records, None)
    if strategy.mode == "combined":
        if not usable:
            return GuidedOutcome(topic.topic_id, strategy, records, None)
        combined = combine_or([parse(r.final_query) for r in usable])
        return GuidedOutcome(topic.topic_id, strategy, records, serialize(combined))

    if retriever is None or qrels is None:
        raise ValueError("the best-seed strategy needs a retriever and relevance judgments")
    cutoff = topic.search_date if use_search_date else None
    relevant = qrels.relevant(topic.topic_id)
    scores: dict[str, float] = {}
    for rec in usable:
        result = retriever.search(rec.final_query, cutoff)
        scores[rec.seed_pmid] = evaluate_topic(result.pmids, relevant).metric(strategy.selection_metric)
    if not scores:
        return GuidedOutcome(topic.topic_id, strategy, records, None, seed_scores=scores)
    # highest score wins; ties go to the lexicographically smallest pmid
    chosen = min(scores, key=lambda p: (-scores[p], p))
    final = next(r.final_query for r in usable if r.seed_pmid == chosen)
    return GuidedOutcome(topic.topic_id, strategy, records, final, chosen, scores)


def _parses(text: str) -> bool:
    try:
        parse(text)
    except (ParseError, QueryError):
        return False
    return True


# --- persistence ----------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def records_filename(prompt_id: str, backend_id: str, suffix: str = "") -> str:
    safe = lambda s: "".join(c if c.isalnum() or c in "._-" else "_" for c in s)
    name = f"records-{safe(prompt_id)}{('-' + safe(suffix)) if suffix else ''}-{safe(backend_id)}.jsonl"
    return name


def _record_key(data: Mapping) -> tuple:
    return (data["topic_id"], data.get("base_role") or "", data.get("seed_pmid") or "")


def dump_jsonl(rows: Iterable[Mapping]) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows)


def load_records(path: str | Path) -> list[GenerationRecord]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [GenerationRecord.from_json(json.loads(line)) for line in fh if line.strip()]


class RunWriter:
    """Single writer for one records file; keeps records sorted for stable bytes."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._rows = {_record_key(r.to_json()): r.to_json() for r in load_records(self.path)}

    def completed_topics(self) -> set[str]:
        return {k[0] for k in self._rows}

    def add(self, records: Iterable[GenerationRecord]) -> None:
        for rec in records:
            data = rec.to_json()
            self._rows[_record_key(data)] = data
        self.flush()

    def flush(self) -> None:
        _atomic_write_text(self.path, dump_jsonl(self._rows[k] for k in sorted(self._rows)))


def persist_run(
    records: Sequence[GenerationRecord],
    run_dir: str | Path,
    config_snapshot: Mapping | None = None,
    templates: Mapping[str, PromptTemplate] | None = None,
    collection: str | None = None,
) -> dict:
    """Write records grouped by (prompt, backend) and a manifest of file hashes."""
    run_dir = Path(run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        groups: dict[str, list[GenerationRecord]] = {}
        for rec in records:
            groups.setdefault(records_filename(rec.prompt_id, rec.backend_id), []).append(rec)
        for name, recs in groups.items():
            writer = RunWriter(run_dir / name)
            writer.add(recs)
        return write_manifest(run_dir, config_snapshot, templates, collection)
    except OSError as exc:
        raise OSError(f"cannot write run directory {run_dir}: {exc}") from exc


def write_manifest(
    run_dir: str | Path,
    config_snapshot: Mapping | None = None,
    templates: Mapping[str, PromptTemplate] | None = None,
    collection: str | None = None,
) -> dict:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    previous = json.loads(manifest_path.read_text(encoding="utf-8")) if manifest_path.exists() else {}
    files = {
        p.name: _sha256(p)
        for p in sorted(run_dir.iterdir())
        if p.is_file() and p.name != "manifest.json" and p.suffix in (".jsonl", ".json", ".csv", ".txt")
    }
    manifest = {
        "collection": collection if collection is not None else previous.get("collection"),
        "config": dict(config_snapshot) if config_snapshot is not None else previous.get("config", {}),
        "prompts": (
            {k: t.digest for k, t in sorted(templates.items())}
            if templates is not None
            else previous.get("prompts", {})
        ),
        "files": files,
    }
    _atomic_write_text(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def verify_manifest(run_dir: str | Path) -> list[str]:
    """Return integrity problems; an empty list means every listed file matches."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        return ["manifest.json is missing"]
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    problems = []
    for name, digest in manifest.get("files", {}).items():
        path = run_dir / name
        if not path.exists():
            problems.append(f"{name}: missing")
        elif _sha256(path) != digest:
            problems.append(f"{name}: hash mismatch")
    return problems


# --- retry accounting ------------------------------------------------------------


def attempt_stats(records: Iterable[GenerationRecord]) -> list[dict]:
    """Mean number of attempts to the first valid query, per backend and prompt family.

    Only records that reached a valid query contribute to the mean; the
    number of exhausted records is reported alongside.
    """
    groups: dict[tuple[str, str], list[GenerationRecord]] = {}
    for rec in records:
        family = "refinement" if rec.prompt_id in REFINEMENT_PROMPTS else (
            "guided" if rec.prompt_id == "guided" else "formulation"
        )
        groups.setdefault((rec.backend_id, family), []).append(rec)
    rows = []
    for (backend_id, family), recs in sorted(groups.items()):
        valid = [r.attempts_used for r in recs if r.final_valid]
        rows.append(
            {
                "backend": backend_id,
                "family": family,
                "n_records": len(recs),
                "n_valid": len(valid),
                "n_exhausted": len(recs) - len(valid),
                "mean_attempts_to_valid": (sum(valid) / len(valid)) if valid else None,
            }
        )
    return rows
