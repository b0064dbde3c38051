"""Document, topic and relevance-judgment ingestion plus the local inverted index.

Documents are JSON Lines records with the fields ``pmid``, ``title``,
``abstract``, ``mesh``, ``pub_types`` and ``entry_date``; MEDLINE text
exports are accepted as well.  Topics are JSON Lines records, qrels use the
usual ``topic 0 pmid relevance`` layout.
"""

from __future__ import annotations

import json
import re
from bisect import bisect_left
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping

__all__ = [
    "CLEF_DUPLICATE_TOPICS",
    "SEED_MERGE_GROUPS",
    "CorpusError",
    "CorpusIndex",
    "Document",
    "DuplicatePmid",
    "MalformedRecord",
    "Qrels",
    "Topic",
    "TopicError",
    "build_index",
    "dedup_seed_qrels",
    "dedup_seed_topics",
    "ingest_documents",
    "ingest_qrels",
    "ingest_topics",
    "normalize_heading",
    "parse_date",
    "tokenize_text",
]

# CLEF TAR 2017/2018 topics that appear twice once the two years are pooled.
CLEF_DUPLICATE_TOPICS = (
    "CD010771",
    "CD011145",
    "CD010772",
    "CD010775",
    "CD010783",
    "CD010896",
    "CD007431",
    "CD010860",
)

# Seed-collection topics describing the same review; the first id survives.
SEED_MERGE_GROUPS = (
    ("51", "52", "53"),
    ("43", "96"),
    ("7", "67"),
    ("8", "112"),
)

TOPIC_COLLECTIONS = ("clef-tar", "seed-original", "seed-dedup")
DOCUMENT_FORMATS = ("jsonl", "medline-text")

# the four searchable text fields of a document
FIELDS = ("title", "abstract", "mesh", "pub_type")

_TOKEN_RE = re.compile(r"[^\W_]+(?:-[^\W_]+)*")
_SPACE_RE = re.compile(r"\s+")


class CorpusError(ValueError):
    """Base class for ingestion failures."""


class MalformedRecord(CorpusError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DuplicatePmid(CorpusError):
    def __init__(self, pmids: Iterable[str]):
        self.pmids = sorted(set(pmids))
        super().__init__(f"duplicate pmid(s): {', '.join(self.pmids)}")


class TopicError(CorpusError):
    pass


def tokenize_text(text: str) -> list[str]:
    """Lowercase ``text`` and split it into alphanumeric tokens.

    Hyphens survive only between alphanumeric runs, so ``"pre-exposure"``
    stays one token while ``"-x-"`` becomes ``["x"]``.
    """
    return _TOKEN_RE.findall(text.casefold())


def normalize_heading(text: str) -> str:
    return _SPACE_RE.sub(" ", text.replace("&", " and ")).strip().casefold()


def parse_date(value: str | date) -> date:
    if isinstance(value, date):
        return value
    text = value.strip()
    for fmt in ("%Y-%m-%d", "%Y/%m/%d", "%Y/%m/%d %H:%M", "%Y%m%d"):
        try:
            return datetime.strptime(text, fmt).date()
        except ValueError:
            continue
    raise ValueError(f"not a calendar date: {value!r}")


@dataclass(frozen=True)
class Document:
    pmid: str
    title: str = ""
    abstract: str = ""
    mesh_headings: tuple[str, ...] = ()
    publication_types: tuple[str, ...] = ()
    entry_date: date = date(1900, 1, 1)

    def __post_init__(self) -> None:
        if not self.pmid:
            raise ValueError("pmid must be non-empty")

    def field_texts(self, name: str) -> tuple[str, ...]:
        """Return the separately-matchable text units of one field.

        Title and abstract are one unit each; every MeSH heading and every
        publication type is its own unit so phrases never span two of them.
        """
        if name == "title":
            return (self.title,) if self.title else ()
        if name == "abstract":
            return (self.abstract,) if self.abstract else ()
        if name == "mesh":
            return self.mesh_headings
        if name == "pub_type":
            return self.publication_types
        raise KeyError(name)

    def to_json(self) -> dict:
        return {
            "pmid": self.pmid,
            "title": self.title,
            "abstract": self.abstract,
            "mesh": list(self.mesh_headings),
            "pub_types": list(self.publication_types),
            "entry_date": self.entry_date.isoformat(),
        }

    @classmethod
    def from_json(cls, record: Mapping) -> "Document":
        pmid = str(record.get("pmid", "") or "").strip()
        if not pmid:
            raise ValueError("missing pmid")
        title = record.get("title") or ""
        abstract = record.get("abstract") or ""
        if not title and not abstract:
            raise ValueError(f"pmid {pmid} has neither title nor abstract")
        raw_date = record.get("entry_date")
        return cls(
            pmid=pmid,
            title=str(title),
            abstract=str(abstract),
            mesh_headings=tuple(record.get("mesh") or ()),
            publication_types=tuple(record.get("pub_types") or ()),
            entry_date=parse_date(raw_date) if raw_date else date(1900, 1, 1),
        )


@dataclass(frozen=True)
class Topic:
    topic_id: str
    title: str
    search_date: date
    seed_pmids: tuple[str, ...] = ()
    baseline_queries: Mapping[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "topic_id": self.topic_id,
            "title": self.title,
            "search_date": self.search_date.isoformat(),
            "seed_pmids": list(self.seed_pmids),
            "baseline_queries": dict(self.baseline_queries),
        }

    @classmethod
    def from_json(cls, record: Mapping) -> "Topic":
        topic_id = str(record["topic_id"]).strip()
        if not topic_id:
            raise ValueError("empty topic_id")
        baselines = dict(record.get("baseline_queries") or {})
        unknown = set(baselines) - {"manual", "conceptual", "objective"}
        if unknown:
            raise ValueError(f"unknown baseline role(s): {sorted(unknown)}")
        return cls(
            topic_id=topic_id,
            title=str(record.get("title", "")),
            search_date=parse_date(record["search_date"]),
            seed_pmids=tuple(str(p) for p in record.get("seed_pmids") or ()),
            baseline_queries=baselines,
        )


@dataclass(frozen=True)
class Qrels:
    judgments: Mapping[str, frozenset[str]]

    def relevant(self, topic_id: str) -> frozenset[str]:
        return self.judgments.get(topic_id, frozenset())

    def __len__(self) -> int:
        return len(self.judgments)


class CorpusIndex:
    """Immutable field-scoped inverted index over a set of documents.

    ``postings[field][token]`` holds the pmids whose ``field`` contains the
    normalized token.  ``sequences[field][pmid]`` keeps the token sequence of
    every text unit for phrase verification.  MeSH headings are additionally
    indexed whole (descriptor part, before any ``/``) and by qualifier.
    """

    def __init__(self, documents: Iterable[Document]):
        docs: dict[str, Document] = {}
        dupes: list[str] = []
        for doc in documents:
            if doc.pmid in docs:
                dupes.append(doc.pmid)
            docs[doc.pmid] = doc
        if dupes:
            raise DuplicatePmid(dupes)

        postings: dict[str, dict[str, set[str]]] = {f: defaultdict(set) for f in FIELDS}
        sequences: dict[str, dict[str, tuple[tuple[str, ...], ...]]] = {f: {} for f in FIELDS}
        descriptors: dict[str, set[str]] = defaultdict(set)
        pub_types: dict[str, set[str]] = defaultdict(set)
        qualifiers: dict[str, list[str]] = {}

        for pmid in sorted(docs):
            doc = docs[pmid]
            for name in FIELDS:
                units = tuple(tuple(tokenize_text(t)) for t in doc.field_texts(name))
                units = tuple(u for u in units if u)
                if not units:
                    continue
                sequences[name][pmid] = units
                for unit in units:
                    for tok in unit:
                        postings[name][tok].add(pmid)
            quals = []
            for heading in doc.mesh_headings:
                descriptor, _, rest = heading.partition("/")
                descriptors[normalize_heading(descriptor)].add(pmid)
                quals.extend(normalize_heading(q) for q in rest.split("/") if q.strip())
            if quals:
                qualifiers[pmid] = quals
            for pt in doc.publication_types:
                pub_types[normalize_heading(pt)].add(pmid)

        self._docs = MappingProxyType(docs)
        self._postings = MappingProxyType(
            {f: MappingProxyType({t: frozenset(s) for t, s in p.items()}) for f, p in postings.items()}
        )
        self._vocab = {f: tuple(sorted(p)) for f, p in postings.items()}
        self._sequences = MappingProxyType({f: MappingProxyType(s) for f, s in sequences.items()})
        self._descriptors = MappingProxyType({k: frozenset(v) for k, v in descriptors.items()})
        self._descriptor_keys = tuple(sorted(descriptors))
        self._pub_types = MappingProxyType({k: frozenset(v) for k, v in pub_types.items()})
        self._qualifiers = MappingProxyType({k: tuple(v) for k, v in qualifiers.items()})
        self._all = frozenset(docs)

    def __len__(self) -> int:
        return len(self._docs)

    def __contains__(self, pmid: object) -> bool:
        return pmid in self._docs

    @property
    def documents(self) -> Mapping[str, Document]:
        return self._docs

    @property
    def all_pmids(self) -> frozenset[str]:
        return self._all

    def postings(self, field_name: str, token: str) -> frozenset[str]:
        return self._postings[field_name].get(token, frozenset())

    def tokens(self, field_name: str) -> Mapping[str, frozenset[str]]:
        return self._postings[field_name]

    def prefix_tokens(self, field_name: str, prefix: str) -> Iterator[str]:
        vocab = self._vocab[field_name]
        i = bisect_left(vocab, prefix)
        while i < len(vocab) and vocab[i].startswith(prefix):
            yield vocab[i]
            i += 1

    def sequences(self, field_name: str) -> Mapping[str, tuple[tuple[str, ...], ...]]:
        return self._sequences[field_name]

    def descriptor(self, heading: str) -> frozenset[str]:
        return self._descriptors.get(heading, frozenset())

    def descriptors_with_prefix(self, prefix: str) -> Iterator[str]:
        keys = self._descriptor_keys
        i = bisect_left(keys, prefix)
        while i < len(keys) and keys[i].startswith(prefix):
            yield keys[i]
            i += 1

    def pub_type(self, name: str) -> frozenset[str]:
        return self._pub_types.get(name, frozenset())

    def qualifiers(self) -> Mapping[str, tuple[str, ...]]:
        return self._qualifiers

    def filter_by_date(self, cutoff: date | None) -> frozenset[str]:
        if cutoff is None:
            return self._all
        return frozenset(p for p, d in self._docs.items() if d.entry_date <= cutoff)


def build_index(documents: Iterable[Document]) -> CorpusIndex:
    return CorpusIndex(documents)


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise MalformedRecord(lineno, "expected a JSON object")
            yield lineno, record


_MEDLINE_TAG = re.compile(r"^([A-Z]{2,4})\s*-\s?(.*)$")


def _medline_records(path: Path) -> Iterator[tuple[int, dict[str, list[str]]]]:
    record: dict[str, list[str]] = {}
    start = 0
    last = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                if record:
                    yield start, record
                record, last = {}, None
                continue
            if line.startswith("      ") and last is not None:
                record[last][-1] += " " + line.strip()
                continue
            m = _MEDLINE_TAG.match(line)
            if not m:
                raise MalformedRecord(lineno, f"unrecognized MEDLINE line {line!r}")
            if not record:
                start = lineno
            last = m.group(1)
            record.setdefault(last, []).append(m.group(2).strip())
    if record:
        yield start, record


def _medline_to_json(fields: dict[str, list[str]]) -> dict:
    entry = fields.get("EDAT") or fields.get("DA")
    if not entry and fields.get("DP"):
        # publication dates look like "2019 Mar 5"; only the year is reliable
        year = re.match(r"\d{4}", fields["DP"][0])
        entry = [f"{year.group(0)}-01-01"] if year else None
    return {
        "pmid": (fields.get("PMID") or [""])[0],
        "title": " ".join(fields.get("TI", [])),
        "abstract": " ".join(fields.get("AB", [])),
        "mesh": [h.lstrip("*") for h in fields.get("MH", [])],
        "pub_types": fields.get("PT", []),
        "entry_date": entry[0] if entry else None,
    }


def ingest_documents(path: str | Path, format: str = "jsonl") -> CorpusIndex:
    """Read a document file and build its index.

    Raises :class:`MalformedRecord` naming the offending line (or, for MEDLINE
    text, the first line of the record) and :class:`DuplicatePmid` listing
    every repeated pmid.
    """
    path = Path(path)
    if format == "jsonl":
        records = _read_jsonl(path)
    elif format == "medline-text":
        records = ((n, _medline_to_json(r)) for n, r in _medline_records(path))
    else:
        raise CorpusError(f"unknown document format {format!r}; expected one of {DOCUMENT_FORMATS}")

    docs = []
    for lineno, record in records:
        try:
            docs.append(Document.from_json(record))
        except (ValueError, TypeError) as exc:
            raise MalformedRecord(lineno, str(exc)) from None
    return CorpusIndex(docs)


def dedup_seed_topics(topics: list[Topic]) -> list[Topic]:
    """Merge the Seed-collection topics that describe the same review.

    The surviving topic keeps its own title and search date; seed pmids of the
    whole group are unioned, preserving first-seen order.
    """
    by_id = {t.topic_id: t for t in topics}
    absorbed: dict[str, str] = {}
    for group in SEED_MERGE_GROUPS:
        missing = [tid for tid in group if tid not in by_id]
        if missing:
            raise TopicError(f"merge target(s) missing from topic file: {', '.join(missing)}")
        for tid in group[1:]:
            absorbed[tid] = group[0]

    merged: list[Topic] = []
    for topic in topics:
        if topic.topic_id in absorbed:
            continue
        group = next((g for g in SEED_MERGE_GROUPS if g[0] == topic.topic_id), None)
        if group:
            seeds = list(dict.fromkeys(p for tid in group for p in by_id[tid].seed_pmids))
            baselines = {}
            for tid in reversed(group):
                baselines.update(by_id[tid].baseline_queries)
            topic = Topic(topic.topic_id, topic.title, topic.search_date, tuple(seeds), baselines)
        merged.append(topic)
    return merged


def dedup_seed_qrels(qrels: Qrels) -> Qrels:
    """Pool the included studies of merged Seed topics under the surviving id."""
    judgments = {k: set(v) for k, v in qrels.judgments.items()}
    for group in SEED_MERGE_GROUPS:
        target = judgments.setdefault(group[0], set())
        for tid in group[1:]:
            target |= judgments.pop(tid, set())
    return Qrels({k: frozenset(v) for k, v in judgments.items()})


def ingest_topics(path: str | Path, collection: str = "seed-original") -> list[Topic]:
    if collection not in TOPIC_COLLECTIONS:
        raise TopicError(f"unknown collection {collection!r}; expected one of {TOPIC_COLLECTIONS}")
    topics: list[Topic] = []
    seen: set[str] = set()
    for lineno, record in _read_jsonl(Path(path)):
        try:
            topic = Topic.from_json(record)
        except (KeyError, ValueError, TypeError) as exc:
            raise MalformedRecord(lineno, f"bad topic: {exc}") from None
        if topic.topic_id in seen:
            raise TopicError(f"duplicate topic_id {topic.topic_id!r} at line {lineno}")
        seen.add(topic.topic_id)
        topics.append(topic)

    if collection == "clef-tar":
        drop = set(CLEF_DUPLICATE_TOPICS)
        return [t for t in topics if t.topic_id not in drop]
    if collection == "seed-dedup":
        return dedup_seed_topics(topics)
    return topics


def ingest_qrels(path: str | Path) -> Qrels:
    judgments: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise MalformedRecord(lineno, f"expected 4 columns, got {len(parts)}")
            topic_id, _, pmid, rel = parts
            try:
                relevance = int(rel)
            except ValueError:
                raise MalformedRecord(lineno, f"non-integer relevance {rel!r}") from None
            bucket = judgments.setdefault(topic_id, set())
            if relevance > 0:
                bucket.add(pmid)
    return Qrels({k: frozenset(v) for k, v in judgments.items()})
