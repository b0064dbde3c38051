"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from .corpus import CorpusError, ingest_documents, ingest_qrels, ingest_topics
from .experiment import (
    ConfigError,
    RunConfig,
    load_collection,
    run_evaluate,
    run_execute,
    run_generate,
    run_report,
)
from .query import check_rules

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _guard(func):
    """Map exceptions onto the documented exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except click.exceptions.Exit:
            raise
        except (ConfigError, CorpusError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
            logging.getLogger(__name__).debug("runtime failure", exc_info=True)
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)

    return wrapper


def _load_config(path: str) -> RunConfig:
    config = RunConfig.load(path)
    config.validate()
    return config


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose: int) -> None:
    """Boolean query generation, validation and evaluation for systematic-review search."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--documents", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "doc_format", type=click.Choice(["jsonl", "medline-text"]), default="jsonl")
@click.option("--topics", type=click.Path(exists=True, dir_okay=False))
@click.option("--collection", type=click.Choice(["clef-tar", "seed-original", "seed-dedup"]), default="seed-original")
@click.option("--qrels", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), help="Write normalized documents as JSONL.")
@_guard
def ingest(documents, doc_format, topics, collection, qrels, out) -> None:
    """Load collection files, report counts and optionally normalize documents."""
    summary: dict[str, int] = {}
    if documents:
        index = ingest_documents(documents, doc_format)
        summary["documents"] = len(index)
        if out:
            with open(out, "w", encoding="utf-8") as fh:
                for pmid in sorted(index.documents):
                    doc = index.documents[pmid]
                    fh.write(json.dumps(doc.to_json(), sort_keys=True) + "\n")
    if topics:
        summary["topics"] = len(ingest_topics(topics, collection))
    if qrels:
        judged = ingest_qrels(qrels)
        summary["qrels_topics"] = len(judged.judgments)
    for key, value in summary.items():
        click.echo(f"{key}\t{value}")


@main.command()
@click.argument("query", required=False)
@click.option("--file", "query_file", type=click.Path(exists=True, dir_okay=False),
              help="One query per line; blank lines are skipped.")
@click.option("--json", "as_json", is_flag=True, help="Print reports as JSON.")
@_guard
def validate(query, query_file, as_json) -> None:
    """Check query text against the syntax rules; exit 1 if any query is invalid."""
    if (query is None) == (query_file is None):
        raise ConfigError("give exactly one of QUERY or --file")
    if query_file:
        queries = [q for q in Path(query_file).read_text(encoding="utf-8").splitlines() if q.strip()]
    else:
        queries = [query]
    failed = 0
    for n, text in enumerate(queries, 1):
        report = check_rules(text)
        prefix = f"[{n}] " if len(queries) > 1 else ""
        if as_json:
            click.echo(json.dumps(report.to_json(), sort_keys=True))
        elif report.valid:
            click.echo(f"{prefix}valid")
        else:
            for v in report.violations:
                click.echo(f"{prefix}{v.rule} at offset {v.position}: {v.detail}")
        failed += not report.valid
    sys.exit(EXIT_INVALID if failed else EXIT_OK)


@main.command()
@click.argument("config_path", metavar="CONFIG", type=click.Path(exists=True, dir_okay=False))
@click.option("--prompt", "prompts", multiple=True, help="Restrict to these prompt ids.")
@click.option("--backend", "backends", multiple=True, help="Restrict to these backend ids.")
@click.option("--strategy", "strategies", multiple=True,
              type=click.Choice(["per_seed", "best", "combined"]), help="Seed strategies for guided.")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--dry-run", is_flag=True, help="Print the planned experiment matrix and exit.")
@_guard
def generate(config_path, prompts, backends, strategies, jobs, dry_run) -> None:
    """Generate queries for every topic in the configured experiment matrix."""
    config = _load_config(config_path)
    plan = config.plan(prompts, backends, strategies)
    if not plan:
        raise ConfigError("the experiment matrix is empty")
    for item in plan:
        unknown = item.backend not in config.backends
        if unknown:
            raise ConfigError(f"unknown backend {item.backend!r}")
    if dry_run:
        for item in plan:
            click.echo(item.describe())
        click.echo(f"{len(plan)} configurations -> {config.run_dir}")
        return
    stats = run_generate(config, plan, jobs=jobs)
    click.echo(
        f"{stats.run_dir}: {stats.records_written} records written, "
        f"{stats.topics_skipped} topics already complete, {stats.backend_calls} backend calls"
    )


@main.command()
@click.argument("config_path", metavar="CONFIG", type=click.Path(exists=True, dir_okay=False))
@click.option("--run-dir", type=click.Path(file_okay=False), help="Defaults to the configured run directory.")
@click.option("--target", type=click.Choice(["local", "entrez"]), default=None)
@click.option("--with-baselines", is_flag=True, help="Also execute the topics' baseline queries.")
@_guard
def execute(config_path, run_dir, target, with_baselines) -> None:
    """Run every final query and store the retrieved pmids."""
    config = _load_config(config_path)
    run_dir = Path(run_dir) if run_dir else config.run_dir
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    mapped = {"local": "local_index", "entrez": "entrez", None: None}[target]
    written = run_execute(config, run_dir, mapped, with_baselines)
    for path in written:
        with open(path, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        truncated = sum(r["truncated"] for r in rows)
        note = f" ({truncated} truncated)" if truncated else ""
        click.echo(f"{path.name}: {len(rows)} results{note}")


@main.command()
@click.argument("config_path", metavar="CONFIG", type=click.Path(exists=True, dir_okay=False))
@click.option("--run-dir", type=click.Path(file_okay=False))
@click.option("--strict", is_flag=True, help="Fail instead of warning on truncated results.")
@_guard
def evaluate(config_path, run_dir, strict) -> None:
    """Score executed results against the relevance judgments."""
    config = _load_config(config_path)
    run_dir = Path(run_dir) if run_dir else config.run_dir
    rows = run_evaluate(config, run_dir, strict=strict, collection=load_collection(config))
    click.echo((run_dir / "summary.csv").read_text(encoding="utf-8"), nl=False)
    truncated = sum(r["truncated"] for r in rows)
    if truncated:
        click.echo(f"warning: {truncated} truncated results were scored", err=True)


@main.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--baseline", default=None, help="Baseline role to compare against, e.g. manual.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Output directory (defaults to <first run>/report).")
@click.option("--metric", "metrics", multiple=True, type=click.Choice(["precision", "recall", "f1", "f3"]))
@click.option("--title", default="")
@_guard
def report(run_dirs, baseline, out_dir, metrics, title) -> None:
    """Build the significance-marked table and the retry/variability CSVs."""
    dirs = [Path(d) for d in run_dirs]
    out = Path(out_dir) if out_dir else dirs[0] / "report"
    kwargs = {"metrics": metrics} if metrics else {}
    paths = run_report(dirs, out, baseline=baseline, title=title, **kwargs)
    click.echo(paths["table.txt"].read_text(encoding="utf-8"), nl=False)


if __name__ == "__main__":  # pragma: no cover
    main()
