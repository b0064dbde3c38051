from __future__ import annotations

import json
from datetime import date

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boolsearch.corpus import (
    CLEF_DUPLICATE_TOPICS,
    SEED_MERGE_GROUPS,
    CorpusIndex,
    Document,
    DuplicatePmid,
    MalformedRecord,
    Topic,
    TopicError,
    dedup_seed_qrels,
    ingest_documents,
    ingest_qrels,
    ingest_topics,
    normalize_heading,
    parse_date,
    tokenize_text,
)


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


# --- documents ------------------------------------------------------------------------


def test_ingest_two_documents(tmp_path):
    path = write_jsonl(
        tmp_path / "d.jsonl",
        [
            {"pmid": "1", "title": "Rabies vaccine", "abstract": "", "mesh": ["Rabies"], "pub_types": [], "entry_date": "2019-01-02"},
            {"pmid": "2", "abstract": "dog bites"},
        ],
    )
    index = ingest_documents(path)
    assert len(index) == 2
    assert index.documents["2"].title == "" and index.documents["2"].mesh_headings == ()
    assert index.documents["1"].entry_date == date(2019, 1, 2)


def test_ingest_empty_file(tmp_path):
    (tmp_path / "e.jsonl").write_text("", encoding="utf-8")
    assert len(ingest_documents(tmp_path / "e.jsonl")) == 0


def test_duplicate_pmid(tmp_path):
    path = write_jsonl(tmp_path / "d.jsonl", [{"pmid": "123", "title": "a"}, {"pmid": "123", "title": "b"}])
    with pytest.raises(DuplicatePmid) as err:
        ingest_documents(path)
    assert "123" in str(err.value)


@pytest.mark.parametrize(
    "lines,line_no",
    [
        (['{"pmid": "1", "title": "a"}', "{not json"], 2),
        (['{"pmid": "1"}'], 1),
        (['{"title": "x"}'], 1),
        (['{"pmid": "1", "title": "a", "entry_date": "2019-02-30"}'], 1),
        (['["list"]'], 1),
    ],
)
def test_malformed_records_name_line(tmp_path, lines, line_no):
    (tmp_path / "d.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(MalformedRecord) as err:
        ingest_documents(tmp_path / "d.jsonl")
    assert err.value.line == line_no


def test_medline_text_format(tmp_path):
    text = (
        "PMID- 111\n"
        "TI  - Rabies vaccination in\n"
        "      children\n"
        "AB  - Pre-exposure prophylaxis.\n"
        "MH  - *Rabies Vaccines/administration & dosage\n"
        "MH  - Humans\n"
        "PT  - Journal Article\n"
        "EDAT- 2018/05/01 06:00\n"
        "\n"
        "PMID- 112\n"
        "TI  - Other\n"
        "DP  - 2017 Mar 5\n"
    )
    (tmp_path / "m.txt").write_text(text, encoding="utf-8")
    index = ingest_documents(tmp_path / "m.txt", "medline-text")
    doc = index.documents["111"]
    assert doc.title == "Rabies vaccination in children"
    assert doc.mesh_headings == ("Rabies Vaccines/administration & dosage", "Humans")
    assert doc.entry_date == date(2018, 5, 1)
    assert index.documents["112"].entry_date == date(2017, 1, 1)
    assert index.descriptor("rabies vaccines") == {"111"}


def test_unknown_format(tmp_path):
    (tmp_path / "d").write_text("", encoding="utf-8")
    with pytest.raises(ValueError):
        ingest_documents(tmp_path / "d", "xml")


def test_normalization_helpers():
    assert tokenize_text("Pre-exposure, (PrEP) -x- COVID-19!") == ["pre-exposure", "prep", "x", "covid-19"]
    assert normalize_heading("Bites  &  Stings") == "bites and stings"
    assert parse_date("2020/03/04") == parse_date("20200304") == date(2020, 3, 4)
    with pytest.raises(ValueError):
        parse_date("March 2020")


def test_index_is_immutable():
    index = CorpusIndex([Document("1", "a")])
    with pytest.raises(TypeError):
        index.documents["2"] = Document("2", "b")
    with pytest.raises(TypeError):
        index.tokens("title")["zzz"] = frozenset()


WORD = st.sampled_from(["rabies", "vaccine", "pre-exposure", "Dog", "bite", "COVID-19", "x"])
TEXT = st.lists(WORD, max_size=6).map(" ".join)


@st.composite
def documents(draw):
    n = draw(st.integers(0, 15))
    docs = []
    for i in range(n):
        title = draw(TEXT)
        abstract = draw(TEXT)
        if not title and not abstract:
            title = "x"
        mesh = tuple(draw(st.lists(st.sampled_from(["Rabies", "Rabies Vaccines/immunology", "Humans"]), max_size=2, unique=True)))
        pubs = tuple(draw(st.lists(st.sampled_from(["Review", "Journal Article"]), max_size=2, unique=True)))
        docs.append(Document(str(i), title, abstract, mesh, pubs))
    return docs


@given(documents())
@settings(max_examples=150)
def test_postings_sound_and_complete(docs):
    index = CorpusIndex(docs)
    by_id = {d.pmid: d for d in docs}
    for field in ("title", "abstract", "mesh", "pub_type"):
        union = set()
        for token, pmids in index.tokens(field).items():
            union |= pmids
            for pmid in pmids:
                assert pmid in by_id
                tokens = {t for text in by_id[pmid].field_texts(field) for t in tokenize_text(text)}
                assert token in tokens
        non_empty = {d.pmid for d in docs if any(tokenize_text(t) for t in d.field_texts(field))}
        assert union == non_empty


@given(documents())
@settings(max_examples=50)
def test_ingest_deterministic(tmp_path_factory, docs):
    path = tmp_path_factory.mktemp("d") / "d.jsonl"
    path.write_text("".join(json.dumps(d.to_json()) + "\n" for d in docs), encoding="utf-8")
    a, b = ingest_documents(path), ingest_documents(path)
    assert dict(a.documents) == dict(b.documents)
    for field in ("title", "abstract", "mesh", "pub_type"):
        assert dict(a.tokens(field)) == dict(b.tokens(field))


# --- topics ----------------------------------------------------------------------------

MERGE_IDS = [tid for group in SEED_MERGE_GROUPS for tid in group]


def seed_topics_fixture():
    ids = MERGE_IDS + [str(i) for i in range(200, 231)]
    assert len(ids) == 40
    return [
        {
            "topic_id": tid,
            "title": f"Review {tid}",
            "search_date": f"2017-01-{1 + k % 28:02d}",
            "seed_pmids": [f"{tid}01", f"{tid}02", "999"],
            "baseline_queries": {"manual": f"q{tid}[tiab]"},
        }
        for k, tid in enumerate(ids)
    ]


def test_seed_original_and_dedup(tmp_path):
    path = write_jsonl(tmp_path / "t.jsonl", seed_topics_fixture())
    assert len(ingest_topics(path, "seed-original")) == 40
    merged = ingest_topics(path, "seed-dedup")
    assert len(merged) == 35 == 40 - sum(len(g) - 1 for g in SEED_MERGE_GROUPS)
    by_id = {t.topic_id: t for t in merged}
    for group in SEED_MERGE_GROUPS:
        survivor = by_id[group[0]]
        assert all(tid not in by_id for tid in group[1:])
        expected = {f"{tid}0{i}" for tid in group for i in (1, 2)} | {"999"}
        assert set(survivor.seed_pmids) == expected
        assert len(survivor.seed_pmids) == len(expected)
        assert survivor.title == f"Review {group[0]}"
    assert by_id["51"].search_date == ingest_topics(path)[MERGE_IDS.index("51")].search_date


def test_dedup_missing_merge_target(tmp_path):
    rows = [r for r in seed_topics_fixture() if r["topic_id"] != "112"]
    path = write_jsonl(tmp_path / "t.jsonl", rows)
    with pytest.raises(TopicError, match="112"):
        ingest_topics(path, "seed-dedup")


def test_clef_drops_duplicates(tmp_path):
    rows = [{"topic_id": tid, "title": tid, "search_date": "2017-01-01"} for tid in CLEF_DUPLICATE_TOPICS]
    rows += [{"topic_id": "CD010438", "title": "x", "search_date": "2017-01-01"}]
    path = write_jsonl(tmp_path / "t.jsonl", rows)
    ids = [t.topic_id for t in ingest_topics(path, "clef-tar")]
    assert ids == ["CD010438"]
    assert "CD010771" not in ids
    assert len(CLEF_DUPLICATE_TOPICS) == 8


def test_unknown_collection_and_bad_topics(tmp_path):
    path = write_jsonl(tmp_path / "t.jsonl", [{"topic_id": "1", "title": "a", "search_date": "2017-01-01"}])
    with pytest.raises(TopicError):
        ingest_topics(path, "trec")
    dup = write_jsonl(tmp_path / "u.jsonl", [{"topic_id": "1", "search_date": "2017-01-01"}] * 2)
    with pytest.raises(TopicError):
        ingest_topics(dup)
    bad_role = write_jsonl(tmp_path / "v.jsonl", [{"topic_id": "1", "search_date": "2017-01-01", "baseline_queries": {"auto": "x"}}])
    with pytest.raises(MalformedRecord):
        ingest_topics(bad_role)
    bad_date = write_jsonl(tmp_path / "w.jsonl", [{"topic_id": "1", "search_date": "soon"}])
    with pytest.raises(MalformedRecord):
        ingest_topics(bad_date)


def test_topic_json_round_trip():
    t = Topic("T1", "x", date(2020, 1, 1), ("1", "2"), {"manual": "a AND b"})
    assert Topic.from_json(t.to_json()) == t


# --- qrels -----------------------------------------------------------------------------


def test_qrels_examples(tmp_path):
    (tmp_path / "a").write_text("T1 0 555 1\n", encoding="utf-8")
    assert ingest_qrels(tmp_path / "a").relevant("T1") == {"555"}
    (tmp_path / "b").write_text("T1 0 555 0\n", encoding="utf-8")
    q = ingest_qrels(tmp_path / "b")
    assert "T1" in q.judgments and q.relevant("T1") == frozenset()
    (tmp_path / "c").write_text("T1 0 1 1\nT1 0 2 2\nT2 0 3 0\n", encoding="utf-8")
    q = ingest_qrels(tmp_path / "c")
    assert len(q) == 2 and q.relevant("T1") == {"1", "2"}


def test_qrels_errors(tmp_path):
    (tmp_path / "a").write_text("T1 0 1 1\nT1 0 2 yes\n", encoding="utf-8")
    with pytest.raises(MalformedRecord) as err:
        ingest_qrels(tmp_path / "a")
    assert err.value.line == 2
    (tmp_path / "b").write_text("T1 1 1\n", encoding="utf-8")
    with pytest.raises(MalformedRecord):
        ingest_qrels(tmp_path / "b")


def test_qrels_dedup_pools_merged_topics(tmp_path):
    lines = "".join(f"{tid} 0 {tid}00 1\n" for tid in MERGE_IDS)
    (tmp_path / "q").write_text(lines, encoding="utf-8")
    pooled = dedup_seed_qrels(ingest_qrels(tmp_path / "q"))
    assert pooled.relevant("51") == {"5100", "5200", "5300"}
    assert "52" not in pooled.judgments
