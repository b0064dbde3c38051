"""LLM-assisted Boolean query formulation, validation and evaluation for systematic-review search."""

from __future__ import annotations

from .corpus import CorpusIndex, Document, Qrels, Topic, ingest_documents, ingest_qrels, ingest_topics
from .evaluation import build_table, evaluate_topic, paired_t_test
from .matcher import RetrievalResult, evaluate, match_document, search
from .query import check_rules, parse, serialize, tokenize

__version__ = "0.1.0"

__all__ = [
    "CorpusIndex",
    "Document",
    "Qrels",
    "RetrievalResult",
    "Topic",
    "build_table",
    "check_rules",
    "evaluate",
    "evaluate_topic",
    "ingest_documents",
    "ingest_qrels",
    "ingest_topics",
    "match_document",
    "paired_t_test",
    "parse",
    "search",
    "serialize",
    "tokenize",
]
