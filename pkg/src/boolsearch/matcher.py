"""Set-semantics execution of query ASTs against a local :class:`CorpusIndex`."""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import CorpusIndex, Document, normalize_heading, tokenize_text
from .query import QueryNode, Term, parse

__all__ = [
    "MeshHierarchy",
    "RetrievalResult",
    "evaluate",
    "match_document",
    "search",
]

TEXT_FIELDS = ("title", "abstract")
ALL_FIELDS = ("title", "abstract", "mesh", "pub_type")


@dataclass(frozen=True)
class RetrievalResult:
    """PMIDs returned by a query.

    ``count`` is the total number of hits.  It equals ``len(pmids)`` unless
    the result came from a remote search capped below the total, in which
    case ``truncated`` is set.
    """

    pmids: frozenset[str]
    count: int
    truncated: bool = False

    def __post_init__(self) -> None:
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if not self.truncated and self.count != len(self.pmids):
            raise ValueError(f"count {self.count} != {len(self.pmids)} pmids for an untruncated result")

    @classmethod
    def of(cls, pmids: Iterable[str]) -> "RetrievalResult":
        pmids = frozenset(pmids)
        return cls(pmids, len(pmids))

    def to_json(self) -> dict:
        return {"count": self.count, "truncated": self.truncated, "pmids": sorted(self.pmids)}

    @classmethod
    def from_json(cls, data: Mapping) -> "RetrievalResult":
        return cls(frozenset(data["pmids"]), int(data["count"]), bool(data.get("truncated", False)))


class MeshHierarchy:
    """Optional child -> parents map enabling explosion of ``[Mesh]`` terms."""

    def __init__(self, parents: Mapping[str, Iterable[str]]):
        self._parents = {
            normalize_heading(c): {normalize_heading(p) for p in ps} for c, ps in parents.items()
        }
        self._cache: dict[str, frozenset[str]] = {}

    @classmethod
    def load(cls, path: str | Path) -> "MeshHierarchy":
        """Read a JSON object or tab-separated ``child<TAB>parent`` lines."""
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".json":
            return cls(json.loads(text))
        parents: dict[str, list[str]] = {}
        for line in text.splitlines():
            if line.strip():
                child, parent = line.split("\t")
                parents.setdefault(child, []).append(parent)
        return cls(parents)

    def ancestors(self, heading: str) -> frozenset[str]:
        """Heading plus all of its transitive parents (normalized)."""
        if heading in self._cache:
            return self._cache[heading]
        seen = {heading}
        stack = [heading]
        while stack:
            for parent in self._parents.get(stack.pop(), ()):
                if parent not in seen:
                    seen.add(parent)
                    stack.append(parent)
        result = frozenset(seen)
        self._cache[heading] = result
        return result


def _heading_hit(query: str, wildcard: bool, candidates: Iterable[str]) -> bool:
    if wildcard:
        return any(c.startswith(query) for c in candidates)
    return query in candidates


def _seq_hit(needle: Sequence[str], wildcard: bool, unit: Sequence[str]) -> bool:
    k = len(needle)
    for i in range(len(unit) - k + 1):
        if list(unit[i : i + k - 1]) != list(needle[:-1]):
            continue
        last = unit[i + k - 1]
        if last == needle[-1] or (wildcard and last.startswith(needle[-1])):
            return True
    return False


def _text_hit(term: Term, doc: Document, fields: Sequence[str]) -> bool:
    needle = tokenize_text(term.text)
    if not needle:
        return False
    for name in fields:
        for text in doc.field_texts(name):
            if _seq_hit(needle, term.wildcard, tokenize_text(text)):
                return True
    return False


def _term_matches(term: Term, doc: Document, hierarchy: MeshHierarchy | None) -> bool:
    scope = term.scope
    query = normalize_heading(term.text)
    if scope in ("mesh", "mesh_noexp"):
        descriptors = {normalize_heading(h.partition("/")[0]) for h in doc.mesh_headings}
        if scope == "mesh" and hierarchy is not None:
            descriptors = set().union(*(hierarchy.ancestors(d) for d in descriptors))
        return _heading_hit(query, term.wildcard, descriptors)
    if scope == "pub_type":
        return _heading_hit(query, term.wildcard, {normalize_heading(p) for p in doc.publication_types})
    if scope == "subheading":
        quals = [
            normalize_heading(q) for h in doc.mesh_headings for q in h.split("/")[1:] if q.strip()
        ]
        return bool(query) and any(query in q for q in quals)
    if scope == "title_abstract":
        return _text_hit(term, doc, TEXT_FIELDS)
    return _text_hit(term, doc, ALL_FIELDS)


def match_document(
    node: QueryNode, doc: Document, hierarchy: MeshHierarchy | None = None
) -> bool:
    """Decide whether a single document satisfies the query, without an index."""
    if isinstance(node, Term):
        return _term_matches(node, doc, hierarchy)
    left = match_document(node.left, doc, hierarchy)
    if node.operator == "AND":
        return left and match_document(node.right, doc, hierarchy)
    if node.operator == "OR":
        return left or match_document(node.right, doc, hierarchy)
    return left and not match_document(node.right, doc, hierarchy)


class _Executor:
    def __init__(self, index: CorpusIndex, allowed: frozenset[str], hierarchy: MeshHierarchy | None):
        self.index = index
        self.allowed = allowed
        self.hierarchy = hierarchy

    def run(self, node: QueryNode) -> frozenset[str]:
        if isinstance(node, Term):
            return self.term(node) & self.allowed
        left = self.run(node.left)
        right = self.run(node.right)
        if node.operator == "AND":
            return left & right
        if node.operator == "OR":
            return left | right
        return left - right

    def term(self, term: Term) -> frozenset[str]:
        scope = term.scope
        query = normalize_heading(term.text)
        if scope in ("mesh", "mesh_noexp"):
            return self.mesh(query, term.wildcard, explode=scope == "mesh")
        if scope == "pub_type":
            return self.pub_type(query, term.wildcard)
        if scope == "subheading":
            if not query:
                return frozenset()
            return frozenset(
                p for p, quals in self.index.qualifiers().items() if any(query in q for q in quals)
            )
        fields = TEXT_FIELDS if scope == "title_abstract" else ALL_FIELDS
        return self.text(term, fields)

    def mesh(self, query: str, wildcard: bool, explode: bool) -> frozenset[str]:
        idx = self.index
        if explode and self.hierarchy is not None:
            out: set[str] = set()
            for key in idx.descriptors_with_prefix(""):
                if _heading_hit(query, wildcard, self.hierarchy.ancestors(key)):
                    out |= idx.descriptor(key)
            return frozenset(out)
        if not wildcard:
            return idx.descriptor(query)
        return frozenset().union(*(idx.descriptor(k) for k in idx.descriptors_with_prefix(query)))

    def pub_type(self, query: str, wildcard: bool) -> frozenset[str]:
        idx = self.index
        if not wildcard:
            return idx.pub_type(query)
        out: set[str] = set()
        for pmid in idx.all_pmids:
            doc = idx.documents[pmid]
            if any(normalize_heading(p).startswith(query) for p in doc.publication_types):
                out.add(pmid)
        return frozenset(out)

    def text(self, term: Term, fields: Sequence[str]) -> frozenset[str]:
        needle = tokenize_text(term.text)
        if not needle:
            return frozenset()
        out: set[str] = set()
        for name in fields:
            candidates = self.candidates(name, needle, term.wildcard)
            if len(needle) == 1:
                out |= candidates
                continue
            seqs = self.index.sequences(name)
            for pmid in candidates - out:
                if any(_seq_hit(needle, term.wildcard, unit) for unit in seqs[pmid]):
                    out.add(pmid)
        return frozenset(out)

    def candidates(self, name: str, needle: Sequence[str], wildcard: bool) -> frozenset[str]:
        idx = self.index
        if wildcard:
            last = frozenset().union(*(idx.postings(name, t) for t in idx.prefix_tokens(name, needle[-1])))
        else:
            last = idx.postings(name, needle[-1])
        for tok in needle[:-1]:
            if not last:
                break
            last = last & idx.postings(name, tok)
        return last


def evaluate(
    node: QueryNode,
    index: CorpusIndex,
    cutoff: date | None = None,
    hierarchy: MeshHierarchy | None = None,
) -> RetrievalResult:
    """Run a query against the index.

    Documents entered after ``cutoff`` are removed from every term's postings
    before the Boolean operators are applied.
    """
    allowed = index.filter_by_date(cutoff)
    return RetrievalResult.of(_Executor(index, allowed, hierarchy).run(node))


def search(
    query_text: str,
    index: CorpusIndex,
    cutoff: date | None = None,
    mode: str = "left_to_right",
    hierarchy: MeshHierarchy | None = None,
) -> RetrievalResult:
    return evaluate(parse(query_text, mode), index, cutoff, hierarchy)
