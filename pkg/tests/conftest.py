from __future__ import annotations

import json
import random
from datetime import date
from pathlib import Path

import pytest
import yaml

from boolsearch.corpus import Document, Topic

DATA = Path(__file__).parent / "data"

THEMES = {
    "T1": ("asthma", "inhaler", "Asthma"),
    "T2": ("diabetes", "insulin", "Diabetes Mellitus"),
    "T3": ("stroke", "thrombolysis", "Stroke"),
    "T4": ("sepsis", "antibiotic", "Sepsis"),
    "T5": ("glaucoma", "intraocular", "Glaucoma"),
}
FILLER = ("patients", "outcome", "cohort", "risk", "children", "adults", "therapy", "dose", "quality", "review")


def golden_rows() -> list[dict]:
    with open(DATA / "golden_queries.jsonl", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def make_documents(seed: int = 7, per_topic: int = 12) -> list[Document]:
    """A small themed corpus; a third of each theme's documents postdate the search cutoff."""
    rng = random.Random(seed)
    docs = []
    n = 1000
    for tid, (word, drug, heading) in THEMES.items():
        for i in range(per_topic):
            n += 1
            words = rng.sample(FILLER, 4)
            if i % 2 == 0:
                words.append(drug)
            title = f"{word.title()} {' '.join(words[:2])}"
            abstract = f"We studied {word} in {' '.join(words[2:])}."
            pub = ("Randomized Controlled Trial",) if i % 3 == 0 else ("Journal Article",)
            entry = date(2021, 6, 1) if i % 3 == 2 else date(2018, 1, 1 + i)
            docs.append(Document(str(n), title, abstract, (heading, "Humans"), pub, entry))
    return docs


def make_topics() -> list[Topic]:
    topics = []
    for k, (tid, (word, drug, heading)) in enumerate(THEMES.items()):
        base = 1001 + 12 * k
        topics.append(
            Topic(
                tid,
                f"Effectiveness of {drug} for {word}",
                date(2020, 1, 1),
                (str(base), str(base + 1), str(base + 3)),
                {"manual": f'({word}[tiab] OR "{heading}"[Mesh]) AND {drug}[tiab]'},
            )
        )
    return topics


def write_collection(root: Path) -> dict[str, str]:
    docs = make_documents()
    topics = make_topics()
    (root / "docs.jsonl").write_text(
        "".join(json.dumps(d.to_json(), sort_keys=True) + "\n" for d in docs), encoding="utf-8"
    )
    (root / "topics.jsonl").write_text(
        "".join(json.dumps(t.to_json(), sort_keys=True) + "\n" for t in topics), encoding="utf-8"
    )
    lines = []
    for k, tid in enumerate(THEMES):
        for i in range(12):
            pmid = 1001 + 12 * k + i
            # trials and every drug document count as included studies
            lines.append(f"{tid} 0 {pmid} {int(i % 3 == 0 or i % 2 == 0)}\n")
    (root / "qrels.txt").write_text("".join(lines), encoding="utf-8")
    (root / "example.json").write_text(
        json.dumps({"topic_id": "EX1", "title": "Statins for prevention", "query": "statin*[tiab] AND prevention[tiab]"}),
        encoding="utf-8",
    )
    return {"documents": "docs.jsonl", "topics": "topics.jsonl", "qrels": "qrels.txt"}


def scripted_outputs(variant: int) -> dict[str, list[str]]:
    """Per-topic scripts: one unusable reply, then a chatty reply holding a valid query."""
    scripts = {}
    for tid, (word, drug, heading) in THEMES.items():
        good = (
            f"Here is the search strategy:\n\n({word}[tiab] OR \"{heading}\"[Mesh]) AND ({drug}[tiab] OR trial[pt])"
            if variant == 0
            else f"Query: {word}[tiab] AND (\"{heading}\"[Mesh] OR {drug}*[tiab])"
        )
        scripts[tid] = ["I cannot help with (that AND OR this", good] * 25
    return scripts


def write_config(root: Path, **overrides) -> Path:
    paths = write_collection(root)
    config = {
        "collection": {"name": "seed-original", **paths},
        "example": {"file": "example.json"},
        "backends": [
            {"id": "alpha", "type": "scripted", "by_topic": scripted_outputs(0)},
            {"id": "beta", "type": "scripted", "by_topic": scripted_outputs(1), "output_mode": "plain_text"},
        ],
        "pipeline": {"max_attempts": 20},
        "retrieval": {"target": "local_index"},
        "output_dir": "runs",
        "run_id": "r1",
        "experiments": [
            {"prompts": ["p1", "p2", "p4", "p6"], "backends": ["alpha", "beta"], "base_roles": ["manual"]},
        ],
    }
    config.update(overrides)
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=True), encoding="utf-8")
    return path


@pytest.fixture
def fixture_config(tmp_path) -> Path:
    return write_config(tmp_path)
