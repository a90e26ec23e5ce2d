import math
import random

import pytest

from oracles import naive_bm25, naive_softmax_target, naive_topk
from qgen.bm25 import (
    bm25_retrieve_topk,
    bm25_score,
    bm25_softmax_score,
    build_bm25_index,
)
from qgen.corpus import Document, load_corpus


def corpus_of(texts: dict[str, str]):
    return {d: Document(id=d, title="", text=t) for d, t in texts.items()}


def random_mini_corpus(rng, max_docs=100):
    vocab = [f"w{i}" for i in range(30)]
    n_docs = rng.randint(2, max_docs)
    return {
        f"d{i:03d}": " ".join(rng.choices(vocab, k=rng.randint(3, 40)))
        for i in range(n_docs)
    }


def test_avg_doc_len():
    corpus = corpus_of({"a": "w x y z", "b": "a b c d e f", "c": "a b c d e f g h"})
    index = build_bm25_index(corpus)
    assert index.avg_doc_len == 6.0


def test_absent_term_empty_postings(mini_index):
    assert "zzzunseen" not in mini_index.postings


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        build_bm25_index({})


def test_hand_computed_single_doc():
    # one document "a b a", query "a": idf = ln(4/3), tf part = 2*1.9/2.9
    corpus = corpus_of({"d": "a b a"})
    index = build_bm25_index(corpus, k1=0.9, b=0.4)
    expected = math.log(4 / 3) * (2 * 1.9 / 2.9)
    got = bm25_score(index, "a", "d")
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.37696271562647143, abs=1e-12)
    assert got == pytest.approx(naive_bm25({"d": "a b a"}, "a", "d"), abs=1e-12)


def test_no_shared_terms_scores_zero(mini_index):
    assert bm25_score(mini_index, "zzz yyy", "mini-001") == 0.0


def test_unknown_doc_rejected(mini_index):
    with pytest.raises(KeyError):
        bm25_score(mini_index, "coral", "nope")
    with pytest.raises(KeyError):
        bm25_softmax_score(mini_index, "coral", "nope")


def test_tf_monotonicity():
    low = corpus_of({"d": "a b c c c", "e": "x y z q r"})
    high = corpus_of({"d": "a a b c c", "e": "x y z q r"})
    s_low = bm25_score(build_bm25_index(low), "a", "d")
    s_high = bm25_score(build_bm25_index(high), "a", "d")
    assert s_high > s_low


def test_query_term_frequency_multiplier():
    corpus = corpus_of({"d": "a b", "e": "c d"})
    index = build_bm25_index(corpus)
    assert bm25_score(index, "a a", "d") == pytest.approx(2 * bm25_score(index, "a", "d"))


def test_softmax_single_doc_is_one():
    index = build_bm25_index(corpus_of({"d": "anything here"}))
    assert bm25_softmax_score(index, "whatever", "d") == 1.0


def test_softmax_uniform_when_no_match():
    index = build_bm25_index(corpus_of({f"d{i}": f"tok{i}" for i in range(4)}))
    for i in range(4):
        assert bm25_softmax_score(index, "unmatched", f"d{i}") == pytest.approx(0.25)


def test_softmax_hand_value():
    # raw scores (s, 0, 0) -> target prob e^s / (e^s + 2)
    corpus = corpus_of({"d1": "apple apple banana", "d2": "cherry plum", "d3": "fig date"})
    index = build_bm25_index(corpus)
    s = bm25_score(index, "apple", "d1")
    expected = math.exp(s) / (math.exp(s) + 2.0)
    assert bm25_softmax_score(index, "apple", "d1") == pytest.approx(expected, abs=1e-12)
    # frozen reference: three docs with raw scores (2, 0, 0)
    assert math.exp(2) / (math.exp(2) + 2) == pytest.approx(0.7869860421615985, abs=1e-12)


def test_softmax_sums_to_one(mini_index, mini_queries):
    for query in list(mini_queries.values())[:5]:
        total = sum(
            bm25_softmax_score(mini_index, query.text, doc_id)
            for doc_id in mini_index.doc_lengths
        )
        assert total == pytest.approx(1.0, abs=1e-9)


def test_index_matches_naive_oracle_on_random_corpora():
    rng = random.Random(1234)
    for _ in range(25):
        texts = random_mini_corpus(rng, max_docs=30)
        index = build_bm25_index(corpus_of(texts))
        query = " ".join(rng.choices([f"w{i}" for i in range(30)], k=rng.randint(1, 6)))
        for doc_id in rng.sample(sorted(texts), min(5, len(texts))):
            assert bm25_score(index, query, doc_id) == pytest.approx(
                naive_bm25(texts, query, doc_id), abs=1e-9
            )
            assert bm25_softmax_score(index, query, doc_id) == pytest.approx(
                naive_softmax_target(texts, query, doc_id), abs=1e-9
            )


def test_topk_is_full_sort_prefix():
    rng = random.Random(99)
    for _ in range(10):
        texts = random_mini_corpus(rng, max_docs=40)
        index = build_bm25_index(corpus_of(texts))
        query = " ".join(rng.choices([f"w{i}" for i in range(30)], k=3))
        full = bm25_retrieve_topk(index, query, len(texts))
        for k in (1, 3, 10, len(texts)):
            got = bm25_retrieve_topk(index, query, k)
            # prefix of the full sort under the same tie rule
            assert got == full[:k]
            # and equal to the independent oracle (scores at 1e-9)
            want = naive_topk(texts, query, k)
            assert [d for d, _ in got] == [d for d, _ in want]
            for (_, s_got), (_, s_want) in zip(got, want):
                assert s_got == pytest.approx(s_want, abs=1e-9)


def test_topk_no_match_empty(mini_index):
    assert bm25_retrieve_topk(mini_index, "zzz", 10) == []


def test_topk_larger_than_matches():
    index = build_bm25_index(corpus_of({"d1": "apple", "d2": "banana", "d3": "apple pie"}))
    hits = bm25_retrieve_topk(index, "apple", 100)
    assert {d for d, _ in hits} == {"d1", "d3"}


def test_topk_total_order_consistent_with_pairwise(mini_index):
    query = "coral reef bleaching ocean"
    hits = bm25_retrieve_topk(mini_index, query, mini_index.doc_count)
    for (d1, s1), (d2, s2) in zip(hits, hits[1:]):
        assert s1 > s2 or (s1 == s2 and d1 < d2)
        assert bm25_score(mini_index, query, d1) == pytest.approx(s1, abs=1e-9)


def test_scifact_corpus_count_when_available():
    import os
    from pathlib import Path

    beir = os.environ.get("QGEN_BEIR_DIR")
    path = Path(beir) / "scifact" / "corpus.jsonl" if beir else None
    if not path or not path.exists():
        pytest.skip("BEIR scifact corpus not available (set QGEN_BEIR_DIR)")
    corpus = load_corpus(path)
    assert len(corpus) == 5183
    assert build_bm25_index(corpus).doc_count == 5183


def test_softmax_temperature_flattens():
    corpus = corpus_of({"d1": "apple apple banana", "d2": "cherry plum", "d3": "fig date"})
    index = build_bm25_index(corpus)
    sharp = bm25_softmax_score(index, "apple", "d1", temperature=0.5)
    default = bm25_softmax_score(index, "apple", "d1")
    flat = bm25_softmax_score(index, "apple", "d1", temperature=10.0)
    assert sharp > default > flat > 1 / 3
    with pytest.raises(ValueError):
        bm25_softmax_score(index, "apple", "d1", temperature=0.0)
