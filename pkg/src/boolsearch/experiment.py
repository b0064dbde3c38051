"""Run configuration and the generate -> execute -> evaluate -> report stages.

A run directory holds::

    manifest.json
    records-<prompt>-<backend>.jsonl        generation records
    finals-guided_<strategy>-<backend>.jsonl
    results-<label>-<backend>.jsonl         retrieved pmids per topic
    evaluation.jsonl, summary.csv
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .corpus import CorpusIndex, Qrels, Topic, dedup_seed_qrels, ingest_documents, ingest_qrels, ingest_topics
from .entrez import EntrezClient, EntrezConfig, QuerySyntaxRejected, ValidityPolicy
from .evaluation import METRICS, RunSummary, TopicEval, build_table, evaluate_topic, macro_average
from .llm import (
    PROMPT_KINDS,
    Backend,
    ChatCompletionsBackend,
    GenerationConfig,
    PromptTemplate,
    ReplayBackend,
    ScriptedBackend,
    load_extractor_instruction,
    load_templates,
)
from .matcher import MeshHierarchy, RetrievalResult
from .pipeline import (
    REFINEMENT_PROMPTS,
    GenerationRecord,
    LocalRetriever,
    OneShotExample,
    PipelineConfig,
    QueryGenerator,
    RunWriter,
    SeedStrategy,
    _atomic_write_text,
    attempt_stats,
    dump_jsonl,
    load_records,
    records_filename,
    seed_text_from_index,
    select_guided,
    write_manifest,
)
from .query import QueryError

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class BackendSpec:
    id: str
    type: str = "chat"  # chat, scripted, replay
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str | None = None
    temperature: float = 1.0
    seed: int = 42
    output_mode: str = "plain_text"
    max_output_tokens: int = 4096
    unsupported: tuple[str, ...] = ()
    rate_limit: float = 5.0
    script: tuple[str, ...] = ()
    by_topic: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    cache: bool = False

    def generation_config(self, **overrides: Any) -> GenerationConfig:
        params = dict(
            backend_id=self.id,
            temperature=self.temperature,
            random_seed=self.seed,
            output_mode=self.output_mode,
            max_output_tokens=self.max_output_tokens,
        )
        params.update(overrides)
        return GenerationConfig(**params)


@dataclass
class Experiment:
    prompts: tuple[str, ...]
    backends: tuple[str, ...]
    strategies: tuple[str, ...] = ("per_seed",)
    selection_metric: str = "recall"
    base_roles: tuple[str, ...] = ("manual",)


@dataclass(frozen=True)
class PlanItem:
    prompt: str
    backend: str
    base_roles: tuple[str, ...] = ()
    strategies: tuple[str, ...] = ()
    selection_metric: str = "recall"

    def describe(self) -> str:
        extra = ""
        if self.base_roles:
            extra = f" base={','.join(self.base_roles)}"
        if self.strategies:
            extra = f" strategy={','.join(self.strategies)}"
        return f"{self.prompt} x {self.backend}{extra}"


@dataclass
class RunConfig:
    """Everything needed for a reproducible run, loaded from one YAML file.

    Paths are kept as written and resolved against ``base_dir`` so the config
    snapshot stored in a run manifest does not depend on where it ran.
    """

    base_dir: Path
    raw: Mapping[str, Any]
    collection: str
    documents: str | None
    documents_format: str
    topics: str
    qrels: str | None
    mesh_hierarchy: str | None
    prompts_dir: str | None
    example_topic: str | None
    example_file: str | None
    backends: dict[str, BackendSpec]
    extractor: str | None
    pipeline: PipelineConfig
    parse_mode: str
    entrez: EntrezConfig
    entrez_api_key_env: str | None
    output_dir: str
    run_id: str
    experiments: list[Experiment]

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def run_dir(self) -> Path:
        return self.path(self.output_dir) / self.run_id

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: str | Path = ".") -> "RunConfig":
        try:
            coll = raw["collection"]
            backends = {}
            for spec in raw.get("backends", []):
                spec = dict(spec)
                for key in ("unsupported", "script"):
                    spec[key] = tuple(spec.get(key, ()))
                spec["by_topic"] = {str(k): tuple(v) for k, v in (spec.get("by_topic") or {}).items()}
                backends[spec["id"]] = BackendSpec(**spec)
            pipe = raw.get("pipeline", {})
            retrieval = raw.get("retrieval", {})
            ez = dict(retrieval.get("entrez", {}))
            api_key_env = ez.pop("api_key_env", None)
            if "retry_backoff" in ez:
                ez["retry_backoff"] = tuple(ez["retry_backoff"])
            experiments = [
                Experiment(
                    prompts=tuple(e["prompts"]),
                    backends=tuple(e["backends"]),
                    strategies=tuple(e.get("strategies", ("per_seed",))),
                    selection_metric=e.get("selection_metric", "recall"),
                    base_roles=tuple(e.get("base_roles", ("manual",))),
                )
                for e in raw.get("experiments", [])
            ]
            example = raw.get("example", {})
            config = cls(
                base_dir=Path(base_dir),
                raw=raw,
                collection=coll.get("name", "seed-original"),
                documents=coll.get("documents"),
                documents_format=coll.get("documents_format", "jsonl"),
                topics=coll["topics"],
                qrels=coll.get("qrels"),
                mesh_hierarchy=coll.get("mesh_hierarchy"),
                prompts_dir=raw.get("prompts_dir"),
                example_topic=example.get("topic_id", "CD010438"),
                example_file=example.get("file"),
                backends=backends,
                extractor=raw.get("extractor"),
                pipeline=PipelineConfig(
                    max_attempts=pipe.get("max_attempts", 20),
                    validity=ValidityPolicy(pipe.get("min_count", 1), pipe.get("max_count", 1_000_000)),
                    retrieval_target=retrieval.get("target", "local_index"),
                    keep_last_on_exhaustion=pipe.get("keep_last_on_exhaustion", True),
                    use_search_date=pipe.get("use_search_date", True),
                ),
                parse_mode=pipe.get("parse_mode", "left_to_right"),
                entrez=EntrezConfig(**ez),
                entrez_api_key_env=api_key_env,
                output_dir=raw.get("output_dir", "runs"),
                run_id=str(raw.get("run_id", "run")),
                experiments=experiments,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        return config

    def validate(self) -> None:
        """Check paths, backend references and credentials before any API call."""
        problems = []
        for label, value in (
            ("documents", self.documents),
            ("topics", self.topics),
            ("qrels", self.qrels),
            ("mesh_hierarchy", self.mesh_hierarchy),
            ("prompts_dir", self.prompts_dir),
            ("example file", self.example_file),
        ):
            if value is not None and not self.path(value).exists():
                problems.append(f"{label} path does not exist: {value}")
        if self.pipeline.retrieval_target == "local_index" and self.documents is None:
            problems.append("local_index retrieval needs collection.documents")
        known = set(PROMPT_KINDS)
        for exp in self.experiments:
            for p in exp.prompts:
                if p not in known:
                    problems.append(f"unknown prompt {p!r}")
            for b in exp.backends:
                if b not in self.backends:
                    problems.append(f"experiment references unknown backend {b!r}")
        if self.extractor is not None and self.extractor not in self.backends:
            problems.append(f"unknown extractor backend {self.extractor!r}")
        for spec in self.backends.values():
            if spec.type == "chat":
                if not spec.endpoint:
                    problems.append(f"backend {spec.id} has no endpoint")
                if spec.api_key_env and not os.environ.get(spec.api_key_env):
                    problems.append(f"backend {spec.id}: environment variable {spec.api_key_env} is not set")
            elif spec.type not in ("scripted", "replay"):
                problems.append(f"backend {spec.id}: unknown type {spec.type!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    def snapshot(self) -> dict:
        return json.loads(json.dumps(self.raw, sort_keys=True, default=str))

    def plan(
        self,
        prompts: Iterable[str] | None = None,
        backends: Iterable[str] | None = None,
        strategies: Iterable[str] | None = None,
    ) -> list[PlanItem]:
        """Expand the experiment matrix, optionally narrowed by CLI overrides."""
        prompts = tuple(prompts or ())
        backends = tuple(backends or ())
        strategies = tuple(strategies or ())
        experiments = self.experiments
        if prompts and backends:
            experiments = [Experiment(prompts, backends, strategies or ("per_seed",))]
        items: dict[tuple[str, str], PlanItem] = {}
        for exp in experiments:
            for p in exp.prompts:
                if prompts and p not in prompts:
                    continue
                for b in exp.backends:
                    if backends and b not in backends:
                        continue
                    roles = exp.base_roles if p in REFINEMENT_PROMPTS else ()
                    strats = (strategies or exp.strategies) if p == "guided" else ()
                    items[(p, b)] = PlanItem(p, b, tuple(roles), tuple(strats), exp.selection_metric)
        return list(items.values())


# --- loaded collection --------------------------------------------------------


@dataclass
class Collection:
    topics: list[Topic]
    index: CorpusIndex | None
    qrels: Qrels | None
    hierarchy: MeshHierarchy | None
    example: OneShotExample | None

    def topic(self, topic_id: str) -> Topic:
        for t in self.topics:
            if t.topic_id == topic_id:
                return t
        raise KeyError(topic_id)


def load_collection(config: RunConfig) -> Collection:
    index = (
        ingest_documents(config.path(config.documents), config.documents_format)
        if config.documents
        else None
    )
    all_topics = ingest_topics(config.path(config.topics), "seed-original" if config.collection == "seed-dedup" else config.collection)
    topics = ingest_topics(config.path(config.topics), config.collection)
    qrels = ingest_qrels(config.path(config.qrels)) if config.qrels else None
    if qrels is not None and config.collection == "seed-dedup":
        qrels = dedup_seed_qrels(qrels)
    hierarchy = MeshHierarchy.load(config.path(config.mesh_hierarchy)) if config.mesh_hierarchy else None

    example = None
    if config.example_file:
        data = json.loads(config.path(config.example_file).read_text(encoding="utf-8"))
        example = OneShotExample(data["topic_id"], data["title"], data["query"])
    elif config.example_topic:
        match = [t for t in all_topics if t.topic_id == config.example_topic]
        if match and "manual" in match[0].baseline_queries:
            example = OneShotExample.from_topic(match[0])
    return Collection(topics, index, qrels, hierarchy, example)


def make_retriever(config: RunConfig, collection: Collection, target: str | None = None):
    target = target or config.pipeline.retrieval_target
    if target == "local_index":
        if collection.index is None:
            raise ConfigError("local retrieval needs a document collection")
        return LocalRetriever(collection.index, collection.hierarchy, config.parse_mode)
    if target == "entrez":
        ez = config.entrez
        if config.entrez_api_key_env and os.environ.get(config.entrez_api_key_env):
            ez = replace(ez, api_key=os.environ[config.entrez_api_key_env])
        if ez.cache_dir is not None:
            ez = replace(ez, cache_dir=config.path(str(ez.cache_dir)))
        return EntrezClient(ez)
    raise ConfigError(f"unknown retrieval target {target!r}")


def make_backend(spec: BackendSpec, topic_id: str | None, cache_dir: Path | None) -> Backend:
    """Build a backend instance; scripted backends get a fresh script per topic."""
    if spec.type == "scripted":
        script = spec.by_topic.get(topic_id, spec.script) if topic_id is not None else spec.script
        backend: Backend = ScriptedBackend(script, spec.id)
    elif spec.type == "chat":
        backend = ChatCompletionsBackend(
            spec.id,
            spec.endpoint,
            spec.model,
            spec.api_key_env,
            rate_limit=spec.rate_limit,
            unsupported=spec.unsupported,
        )
    elif spec.type == "replay":
        if cache_dir is None:
            raise ConfigError(f"replay backend {spec.id} needs a cache directory")
        return ReplayBackend(cache_dir / f"completions-{spec.id}.jsonl", None, spec.id)
    else:
        raise ConfigError(f"unknown backend type {spec.type!r}")
    if spec.cache and cache_dir is not None:
        backend = ReplayBackend(cache_dir / f"completions-{spec.id}.jsonl", backend, spec.id)
    return backend


# --- stages ---------------------------------------------------------------------


@dataclass
class GenerateStats:
    run_dir: Path
    records_written: int = 0
    topics_skipped: int = 0
    backend_calls: int = 0


def _count_calls(backend: Backend) -> int:
    if isinstance(backend, ReplayBackend):
        return _count_calls(backend.inner) if backend.inner is not None else 0
    return getattr(backend, "calls", 0)


def run_generate(
    config: RunConfig,
    plan: list[PlanItem],
    jobs: int = 1,
    collection: Collection | None = None,
) -> GenerateStats:
    """Generate records for every plan item, skipping topics already on disk."""
    collection = collection or load_collection(config)
    templates = load_templates(config.path(config.prompts_dir))
    retriever = make_retriever(config, collection)
    run_dir = config.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = run_dir / "cache"
    stats = GenerateStats(run_dir)
    ext_spec = config.backends.get(config.extractor) if config.extractor else None
    instruction = load_extractor_instruction(config.path(config.prompts_dir)) if ext_spec else None

    for item in plan:
        if item.prompt not in templates:
            raise ConfigError(f"no template for prompt {item.prompt!r}")
        if templates[item.prompt].kind.endswith("one_shot") and collection.example is None:
            raise ConfigError(f"{item.prompt} needs the one-shot example ({config.example_topic})")
        spec = config.backends[item.backend]
        writer = RunWriter(run_dir / records_filename(item.prompt, item.backend))
        done = {(r.topic_id, r.base_role) for r in load_records(writer.path)}

        def work(topic: Topic) -> tuple[list[GenerationRecord], int]:
            backend = make_backend(spec, topic.topic_id, cache_dir)
            extractor = make_backend(ext_spec, topic.topic_id, cache_dir) if ext_spec else None
            generator = QueryGenerator(
                templates,
                retriever,
                config.pipeline,
                extractor=extractor,
                extractor_config=ext_spec.generation_config(temperature=0.0) if ext_spec else None,
                example=collection.example,
                seed_lookup=seed_text_from_index(collection.index) if collection.index else None,
                extractor_instruction=instruction,
            )
            gen_config = spec.generation_config()
            if item.prompt in REFINEMENT_PROMPTS:
                recs = [
                    generator.run_refinement(topic, item.prompt, role, backend, gen_config)
                    for role in item.base_roles
                    if (topic.topic_id, role) not in done
                ]
            elif item.prompt == "guided":
                recs = list(generator.run_guided(topic, backend, gen_config).records)
            else:
                recs = [generator.run_formulation(topic, item.prompt, backend, gen_config)]
            calls = _count_calls(backend) + (_count_calls(extractor) if extractor else 0)
            return recs, calls

        pending = []
        for topic in collection.topics:
            roles = item.base_roles or (None,)
            if item.prompt in REFINEMENT_PROMPTS:
                roles = tuple(r for r in item.base_roles if r in topic.baseline_queries)
                if not roles:
                    log.info("topic %s has none of the baseline roles %s; skipped for %s",
                             topic.topic_id, ", ".join(item.base_roles), item.prompt)
                    continue
            if all((topic.topic_id, r) in done for r in roles):
                stats.topics_skipped += 1
                continue
            pending.append(topic)

        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            for recs, calls in pool.map(work, pending):
                writer.add(recs)
                stats.records_written += len(recs)
                stats.backend_calls += calls

        if item.prompt == "guided":
            _write_guided_finals(config, collection, retriever, item, writer.path)

    write_manifest(run_dir, config.snapshot(), templates, config.collection)
    return stats


def _write_guided_finals(config, collection, retriever, item: PlanItem, records_path: Path) -> None:
    records = load_records(records_path)
    for mode in item.strategies:
        if mode == "per_seed":
            continue
        strategy = SeedStrategy(mode, item.selection_metric)
        rows = []
        for topic in collection.topics:
            recs = [r for r in records if r.topic_id == topic.topic_id]
            if not recs:
                continue
            outcome = select_guided(
                topic, recs, strategy, retriever, collection.qrels, config.pipeline.use_search_date
            )
            rows.append(outcome.to_json())
        path = records_path.parent / f"finals-guided_{mode}-{item.backend}.jsonl"
        _atomic_write_text(path, dump_jsonl(rows))


def _label(record: Mapping) -> str:
    if record.get("base_role") and record["prompt_id"] in REFINEMENT_PROMPTS:
        return f"{record['prompt_id']}-{record['base_role']}"
    return record["prompt_id"]


def _retrieve(retriever, query: str, topic: Topic, use_date: bool) -> dict:
    if not query:
        return {"count": 0, "truncated": False, "pmids": [], "error": "no query"}
    try:
        result = retriever.search(query, topic.search_date if use_date else None)
    except (QueryError, QuerySyntaxRejected) as exc:
        return {"count": 0, "truncated": False, "pmids": [], "error": str(exc)}
    return {**result.to_json(), "error": None}


def run_execute(
    config: RunConfig,
    run_dir: Path,
    target: str | None = None,
    with_baselines: bool = False,
    collection: Collection | None = None,
) -> list[Path]:
    """Execute every final query in a run directory and store the retrieved pmids."""
    collection = collection or load_collection(config)
    retriever = make_retriever(config, collection, target)
    topics = {t.topic_id: t for t in collection.topics}
    use_date = config.pipeline.use_search_date
    sources = sorted(run_dir.glob("records-*.jsonl")) + sorted(run_dir.glob("finals-*.jsonl"))
    if not sources and not with_baselines:
        raise FileNotFoundError(f"no generation records in {run_dir}")
    outputs: dict[str, list[dict]] = {}

    for path in sources:
        with open(path, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        if path.name.startswith("finals-"):
            label, _, backend = path.stem[len("finals-"):].partition("-")
        for row in rows:
            topic = topics.get(row["topic_id"])
            if topic is None:
                continue
            if path.name.startswith("records-"):
                label, backend = _label(row), row["backend_id"]
            out = {
                "topic_id": row["topic_id"],
                "label": label,
                "backend": backend,
                "seed_pmid": row.get("seed_pmid") if label == "guided" else None,
                "query": row.get("final_query") or "",
            }
            out.update(_retrieve(retriever, out["query"], topic, use_date))
            if out["truncated"]:
                log.warning("%s/%s topic %s: result truncated at retmax", label, backend, row["topic_id"])
            outputs.setdefault(f"results-{label}-{backend}.jsonl", []).append(out)

    if with_baselines:
        for topic in collection.topics:
            for role, query in sorted(topic.baseline_queries.items()):
                out = {"topic_id": topic.topic_id, "label": f"baseline-{role}", "backend": "baseline",
                       "seed_pmid": None, "query": query}
                out.update(_retrieve(retriever, query, topic, use_date))
                outputs.setdefault(f"results-baseline-{role}-baseline.jsonl", []).append(out)

    written = []
    for name, rows in sorted(outputs.items()):
        rows.sort(key=lambda r: (r["topic_id"], r["seed_pmid"] or ""))
        _atomic_write_text(run_dir / name, dump_jsonl(rows))
        written.append(run_dir / name)
    write_manifest(run_dir)
    return written


def run_evaluate(
    config: RunConfig,
    run_dir: Path,
    strict: bool = False,
    collection: Collection | None = None,
) -> list[dict]:
    collection = collection or load_collection(config)
    if collection.qrels is None:
        raise ConfigError("evaluation needs collection.qrels")
    rows = []
    for path in sorted(run_dir.glob("results-*.jsonl")):
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                res = json.loads(line)
                if res["truncated"] and strict:
                    raise ValueError(f"{path.name}: topic {res['topic_id']} result is truncated")
                ev = evaluate_topic(
                    res["pmids"], collection.qrels.relevant(res["topic_id"]), res["topic_id"], res["truncated"]
                )
                row = {"label": res["label"], "backend": res["backend"], "seed_pmid": res["seed_pmid"]}
                row.update(ev.to_json())
                rows.append(row)
    rows.sort(key=lambda r: (r["label"], r["backend"], r["topic_id"], r["seed_pmid"] or ""))
    _atomic_write_text(run_dir / "evaluation.jsonl", dump_jsonl(rows))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label", "backend", "n_topics", "n_truncated", *METRICS])
    for (label, backend), summary, truncated in _summaries(rows):
        writer.writerow([label, backend, summary.n_topics, truncated,
                         *(f"{summary.macro[m]:.4f}" for m in METRICS)])
    _atomic_write_text(run_dir / "summary.csv", buf.getvalue())
    write_manifest(run_dir)
    return rows


def _topic_eval(row: Mapping) -> TopicEval:
    return TopicEval(row["topic_id"], frozenset(), frozenset(), row["precision"], row["recall"],
                     row["f1"], row["f3"], row["truncated"])


def _summaries(rows: Iterable[Mapping]):
    groups: dict[tuple[str, str], list[Mapping]] = {}
    for row in rows:
        if row["seed_pmid"] is not None:
            continue
        groups.setdefault((row["label"], row["backend"]), []).append(row)
    for key in sorted(groups):
        evals = [_topic_eval(r) for r in groups[key]]
        yield key, macro_average(evals), sum(1 for r in groups[key] if r["truncated"])


def _run_names(run_dirs: list[Path]) -> list[str]:
    """Directory names, with ``#k`` appended to repeats so every run stays distinct."""
    seen: dict[str, int] = {}
    names = []
    for rd in run_dirs:
        k = seen.get(rd.name, 0)
        seen[rd.name] = k + 1
        names.append(rd.name if k == 0 else f"{rd.name}#{k + 1}")
    return names


def run_report(
    run_dirs: list[Path],
    out_dir: Path,
    baseline: str | None = None,
    metrics: Iterable[str] = METRICS,
    title: str = "",
) -> dict[str, Path]:
    """Build the significance-marked table plus attempt and variability CSVs.

    With several run directories, the first one holding a (label, backend)
    pair supplies it to the table; every run's rows go to the variability CSV
    and every run's records to the attempt statistics.
    """
    rows: list[Mapping] = []
    table_rows: list[Mapping] = []
    records: list[GenerationRecord] = []
    claimed: set[tuple[str, str]] = set()
    names = _run_names(run_dirs)
    for rd, name in zip(run_dirs, names):
        path = rd / "evaluation.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"{rd} has not been evaluated")
        with open(path, encoding="utf-8") as fh:
            run_rows = [{**json.loads(line), "run": name} for line in fh if line.strip()]
        rows += run_rows
        pairs = {(r["label"], r["backend"]) for r in run_rows}
        table_rows += [r for r in run_rows if (r["label"], r["backend"]) not in claimed]
        claimed |= pairs
        for rec_path in sorted(rd.glob("records-*.jsonl")):
            records += load_records(rec_path)

    runs: dict[tuple[str, str], RunSummary] = {}
    base_summary = None
    for (label, backend), summary, _ in _summaries(table_rows):
        if label.startswith("baseline-"):
            if baseline is not None and label == f"baseline-{baseline}":
                base_summary = summary
            continue
        runs[(label, backend)] = summary
    if baseline is not None and base_summary is None:
        raise ValueError(f"no executed baseline-{baseline} results found")

    table = build_table(runs, base_summary, tuple(metrics), title=title, baseline_label=baseline or "manual")
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {
        "table.txt": table.to_text(),
        "table.csv": table.to_csv(),
        "comparisons.csv": table.comparisons_csv(),
    }

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["backend", "family", "n_records", "n_valid", "n_exhausted", "mean_attempts_to_valid"])
    for r in attempt_stats(records):
        mean = r["mean_attempts_to_valid"]
        w.writerow([r["backend"], r["family"], r["n_records"], r["n_valid"], r["n_exhausted"],
                    "" if mean is None else f"{mean:.4f}"])
    outputs["attempts.csv"] = buf.getvalue()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["topic", "prompt", "backend", "seed_pmid", "run", "recall"])
    order = {name: i for i, name in enumerate(names)}
    for row in sorted(rows, key=lambda r: (r["label"], r["backend"], r["topic_id"], r["seed_pmid"] or "", order[r["run"]])):
        if row["label"].startswith("baseline-"):
            continue
        w.writerow([row["topic_id"], row["label"], row["backend"], row["seed_pmid"] or "", row["run"],
                    f"{row['recall']:.4f}"])
    outputs["variability.csv"] = buf.getvalue()

    paths = {}
    for name, text in outputs.items():
        _atomic_write_text(out_dir / name, text)
        paths[name] = out_dir / name
    return paths
