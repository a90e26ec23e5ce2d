"""Minimal text normalization shared by the index, embedder, and mock backend.

Tokenization is deliberately simple (lowercase, split on non-alphanumeric) and
is the single definition used everywhere scores are computed, so index and
oracle implementations cannot drift apart.
"""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# 30 common function words. Used only by the mock backend's content-word rule;
# BM25 tokenization does no stop-word removal.
STOPWORDS_30 = frozenset(
    """
    am an and are as at be been but by for from had has have in is it its of
    on or that this to was were which will with
    """.split()
)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric characters, dropping empties."""
    return _TOKEN_RE.findall(text.lower())


def content_words(text: str, limit: int | None = None, skip: int = 0) -> list[str]:
    """Whitespace words of `text`, lowercased, edge punctuation stripped,
    stop words removed. Inner punctuation (hyphens etc.) is preserved, so
    "age-dependent" stays one word.
    """
    words = []
    for raw in text.split():
        word = _strip_edges(raw.lower())
        if not word or word in STOPWORDS_30:
            continue
        words.append(word)
    if skip:
        words = words[skip:]
    if limit is not None:
        words = words[:limit]
    return words


def _strip_edges(word: str) -> str:
    start, end = 0, len(word)
    while start < end and not word[start].isalnum():
        start += 1
    while end > start and not word[end - 1].isalnum():
        end -= 1
    return word[start:end]
