from __future__ import annotations

import random
import time
from datetime import date

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boolsearch.corpus import CorpusIndex, Document
from boolsearch.matcher import MeshHierarchy, RetrievalResult, evaluate, match_document, search
from boolsearch.query import FieldTag, Op, Term, combine_or, depth, parse

VOCAB = ["rabies", "vaccine", "vaccination", "vaccinia", "vacuole", "child", "post-exposure", "dog", "bite", "trial"]
HEADINGS = ["Rabies", "Rabies Vaccines", "Vaccination", "Humans", "Dogs", "Child/immunology", "Bites and Stings/therapy"]
PUBS = ["Journal Article", "Randomized Controlled Trial", "Review"]
TAGS = [None, "tiab", "Mesh", "MeSH:noexp", "All Fields", "sh", "pt", "sb", "dp"]


def random_doc(rng: random.Random, n: int) -> Document:
    def words(k):
        return " ".join(rng.choice(VOCAB) for _ in range(k))

    return Document(
        str(n),
        words(rng.randint(0, 5)).capitalize() or "Untitled",
        words(rng.randint(0, 12)),
        tuple(rng.sample(HEADINGS, rng.randint(0, 3))),
        tuple(rng.sample(PUBS, rng.randint(0, 2))),
        date(2015 + rng.randint(0, 8), rng.randint(1, 12), 1),
    )


def random_term(rng: random.Random) -> Term:
    tag = rng.choice(TAGS)
    field = FieldTag(tag) if tag else None
    if tag in ("Mesh", "MeSH:noexp"):
        text = rng.choice(HEADINGS + ["rabies vaccines", "Bites and Stings", "vacc"]).split("/")[0]
    elif tag == "pt":
        text = rng.choice(PUBS + ["trial"])
    elif tag == "sh":
        text = rng.choice(["immunology", "therapy", "immun", "none"])
    else:
        k = rng.choice([1, 1, 1, 2])
        text = " ".join(rng.choice(VOCAB) for _ in range(k))
    wildcard = rng.random() < 0.25
    if wildcard:
        text = text[: max(1, len(text) - rng.randint(0, 4))].rstrip() or text
    return Term(text, phrase=" " in text, wildcard=wildcard, field=field)


def random_query(rng: random.Random, max_depth: int):
    if max_depth <= 1 or rng.random() < 0.3:
        return random_term(rng)
    return Op(
        rng.choice(["AND", "OR", "NOT"]),
        random_query(rng, max_depth - 1),
        random_query(rng, max_depth - 1),
    )


def brute_force(node, docs, cutoff=None, hierarchy=None):
    """Per-document oracle.  The cutoff removes documents from every term's hits,
    which for NOT means the left operand is already restricted."""
    return {
        d.pmid
        for d in docs
        if (cutoff is None or d.entry_date <= cutoff) and match_document(node, d, hierarchy)
    }


def test_oracle_equivalence_1000_cases():
    rng = random.Random(20240601)
    start = time.perf_counter()
    for case in range(1000):
        docs = [random_doc(rng, n) for n in range(rng.randint(1, 100))]
        index = CorpusIndex(docs)
        node = random_query(rng, 5)
        assert depth(node) <= 5
        cutoff = rng.choice([None, date(2019, 6, 1)])
        got = evaluate(node, index, cutoff).pmids
        assert got == brute_force(node, docs, cutoff), (case, node)
    assert time.perf_counter() - start < 30


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_oracle_equivalence_property(seed):
    rng = random.Random(seed)
    docs = [random_doc(rng, n) for n in range(rng.randint(0, 30))]
    node = random_query(rng, 4)
    assert evaluate(node, CorpusIndex(docs)).pmids == brute_force(node, docs)


def test_oracle_equivalence_with_hierarchy():
    hierarchy = MeshHierarchy({"Rabies Vaccines": ["Vaccines"], "Vaccines": ["Biological Products"], "Dogs": ["Mammals"]})
    rng = random.Random(5)
    for _ in range(200):
        docs = [random_doc(rng, n) for n in range(rng.randint(1, 40))]
        node = Op("OR", random_query(rng, 3), Term(rng.choice(["Vaccines", "Mammals", "Biological Products"]), True, False, FieldTag("Mesh")))
        assert evaluate(node, CorpusIndex(docs), None, hierarchy).pmids == brute_force(node, docs, None, hierarchy)


# --- examples ------------------------------------------------------------------------

D1 = Document("d1", "a b")
D2 = Document("d2", "c")
SMALL = CorpusIndex([D1, D2])


def test_term_all_fields():
    assert evaluate(Term("b"), SMALL).pmids == {"d1"}


def test_not_is_set_difference():
    universe = Op("OR", Term("a"), Term("c"))
    assert evaluate(Op("NOT", universe, Term("c")), SMALL).pmids == {"d1"}


def test_phrase_and_wildcards():
    doc = Document("1", "Trial", "Outcomes after rabies vaccine in children; vaccination and vaccinia.")
    assert match_document(Term("rabies vaccine", phrase=True), doc)
    assert not match_document(Term("vaccine rabies", phrase=True), doc)
    assert match_document(Term("vaccin", wildcard=True), Document("2", "vaccination"))
    assert match_document(Term("vaccin", wildcard=True), Document("3", "vaccinia"))
    assert not match_document(Term("vaccin", wildcard=True), Document("4", "vacuole"))


def test_phrase_does_not_cross_fields():
    doc = Document("1", "rabies", "vaccine")
    assert not match_document(Term("rabies vaccine", phrase=True), doc)


def test_field_scopes():
    doc = Document(
        "1",
        "Dog bites",
        "Rabies prophylaxis",
        ("Rabies Vaccines", "Bites and Stings/therapy"),
        ("Randomized Controlled Trial",),
    )
    tiab = FieldTag("tiab")
    assert match_document(Term("dog", field=tiab), doc)
    assert not match_document(Term("vaccines", field=tiab), doc)
    assert match_document(Term("rabies vaccines", True, field=FieldTag("Mesh")), doc)
    # MeSH requires the whole heading; a word of a heading is not enough
    assert not match_document(Term("rabies", field=FieldTag("Mesh")), doc)
    assert match_document(Term("bites & stings", True, field=FieldTag("MeSH Terms")), doc)
    assert match_document(Term("therap", field=FieldTag("sh")), doc)
    assert match_document(Term("randomized controlled trial", True, field=FieldTag("pt")), doc)
    assert not match_document(Term("trial", field=FieldTag("pt")), doc)
    # unknown tags and filters fall back to all fields
    assert match_document(Term("vaccines", field=FieldTag("dp")), doc)
    assert match_document(Term("trial", field=FieldTag("sb")), doc)


def test_mesh_explosion_only_with_hierarchy_and_not_noexp():
    doc = Document("1", "x", "", ("Rabies Vaccines",))
    h = MeshHierarchy({"Rabies Vaccines": ["Viral Vaccines"], "Viral Vaccines": ["Vaccines"]})
    exp = Term("Vaccines", field=FieldTag("Mesh"))
    noexp = Term("Vaccines", field=FieldTag("MeSH:noexp"))
    assert not match_document(exp, doc)
    assert match_document(exp, doc, h)
    assert not match_document(noexp, doc, h)


def test_hierarchy_load_tsv_and_json(tmp_path):
    (tmp_path / "h.tsv").write_text("A\tB\nB\tC\n", encoding="utf-8")
    (tmp_path / "h.json").write_text('{"A": ["B"], "B": ["C"]}', encoding="utf-8")
    for name in ("h.tsv", "h.json"):
        assert MeshHierarchy.load(tmp_path / name).ancestors("a") == {"a", "b", "c"}


def test_cutoff_applied_before_not():
    old = Document("old", "rabies", entry_date=date(2010, 1, 1))
    new = Document("new", "rabies dog", entry_date=date(2022, 1, 1))
    index = CorpusIndex([old, new])
    q = Op("NOT", Term("rabies"), Term("dog"))
    assert evaluate(q, index, date(2015, 1, 1)).pmids == {"old"}
    assert evaluate(Term("dog"), index, date(2015, 1, 1)).pmids == frozenset()


def test_search_text_modes():
    index = CorpusIndex([Document("1", "a"), Document("2", "b c"), Document("3", "c")])
    assert search("a OR b AND c", index).pmids == {"2"}
    assert search("a OR b AND c", index, mode="precedence").pmids == {"1", "2"}


def test_retrieval_result_invariants():
    assert RetrievalResult.of(["1", "2", "2"]).count == 2
    with pytest.raises(ValueError):
        RetrievalResult(frozenset({"1"}), 2)
    truncated = RetrievalResult(frozenset({"1"}), 5, truncated=True)
    assert RetrievalResult.from_json(truncated.to_json()) == truncated


# --- properties -----------------------------------------------------------------------


def _random_index(seed, n=40):
    rng = random.Random(seed)
    docs = [random_doc(rng, i) for i in range(n)]
    return rng, docs, CorpusIndex(docs)


@given(st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_de_morgan(seed):
    rng, docs, index = _random_index(seed)
    a, b = random_query(rng, 3), random_query(rng, 3)
    universe = index.all_pmids
    # a universal left operand: every document has a title built from these words
    everything = combine_or([Term(w) for w in VOCAB] + [Term("untitled")])
    assert evaluate(everything, index).pmids == universe
    lhs = evaluate(Op("NOT", everything, Op("OR", a, b)), index).pmids
    rhs = universe - (evaluate(a, index).pmids | evaluate(b, index).pmids)
    assert lhs == rhs


@given(st.integers(0, 10_000), st.dates(date(2014, 1, 1), date(2024, 1, 1)), st.dates(date(2014, 1, 1), date(2024, 1, 1)))
@settings(max_examples=100, deadline=None)
def test_date_cutoff_monotone_for_positive_queries(seed, d1, d2):
    rng, docs, index = _random_index(seed)
    lo, hi = sorted((d1, d2))
    node = random_query(rng, 4)
    # NOT-free queries are monotone in the document set
    while any(isinstance(n, Op) and n.operator == "NOT" for n in _nodes(node)):
        node = random_query(rng, 4)
    assert evaluate(node, index, lo).pmids <= evaluate(node, index, hi).pmids


def _nodes(node):
    yield node
    if isinstance(node, Op):
        yield from _nodes(node.left)
        yield from _nodes(node.right)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_cutoff_restricts_to_earlier_documents(seed):
    rng, docs, index = _random_index(seed)
    node = random_query(rng, 4)
    cutoff = date(2019, 1, 1)
    dates = {d.pmid: d.entry_date for d in docs}
    assert all(dates[p] <= cutoff for p in evaluate(node, index, cutoff).pmids)


@given(st.integers(0, 10_000))
@settings(max_examples=50, deadline=None)
def test_idempotent_and_combine_or_union(seed):
    rng, docs, index = _random_index(seed)
    q1, q2 = random_query(rng, 3), random_query(rng, 3)
    assert evaluate(q1, index) == evaluate(q1, index)
    combined = evaluate(combine_or([q1, q2]), index).pmids
    assert combined == evaluate(q1, index).pmids | evaluate(q2, index).pmids
    assert evaluate(q1, index).pmids <= combined


def test_golden_topic22_parses_and_executes_locally():
    from conftest import golden_rows

    docs = [
        Document("1", "Rabies pre-exposure prophylaxis", "immunogenicity of rabies vaccine", ("Rabies Vaccines",)),
        Document("2", "Dog bites", "no relevant content"),
    ]
    index = CorpusIndex(docs)
    for row in golden_rows():
        node = parse(row["query"])
        assert evaluate(node, index).pmids == brute_force(node, docs)
