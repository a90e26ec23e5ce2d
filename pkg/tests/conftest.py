import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qgen.bm25 import build_bm25_index
from qgen.corpus import load_corpus, load_qrels, load_queries
from qgen.embeddings import CachingEmbedder, HashingEmbedder

MINI_DIR = Path(__file__).parent.parent / "src" / "qgen" / "data" / "mini"
GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def mini_corpus():
    return load_corpus(MINI_DIR / "corpus.jsonl")


@pytest.fixture(scope="session")
def mini_queries():
    return load_queries(MINI_DIR / "queries.jsonl")


@pytest.fixture(scope="session")
def mini_qrels(mini_queries, mini_corpus):
    return load_qrels(MINI_DIR / "qrels.tsv", queries=mini_queries, corpus=mini_corpus)


@pytest.fixture(scope="session")
def mini_index(mini_corpus):
    return build_bm25_index(mini_corpus)


@pytest.fixture()
def embedder():
    return CachingEmbedder(HashingEmbedder())


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        print(f"\nACCEPTANCE {name}: {report.outcome.upper()}", flush=True)
