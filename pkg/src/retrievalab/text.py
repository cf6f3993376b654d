"""Deterministic tokenization and the answer-containment predicate.

Both mining and recall scoring depend on this module agreeing with itself:
a passage "contains" an answer iff the answer's token sequence appears as a
contiguous run of the passage's tokens, so "cat" never matches inside
"category".
"""
from __future__ import annotations


def tokenize(text: str) -> list[str]:
    """Case-fold and split on any run of non-alphanumeric characters.

    Punctuation and whitespace are discarded, digits kept.  Empty input
    yields [].
    """
    tokens: list[str] = []
    current: list[str] = []
    for ch in text.casefold():
        if ch.isalnum():
            current.append(ch)
        elif current:
            tokens.append("".join(current))
            current = []
    if current:
        tokens.append("".join(current))
    return tokens


def _is_subsequence(needle: list[str], haystack: list[str]) -> bool:
    """Contiguous subsequence test on token lists."""
    n, m = len(needle), len(haystack)
    if n == 0 or n > m:
        return False
    first = needle[0]
    for start in range(m - n + 1):
        if haystack[start] == first and haystack[start : start + n] == needle:
            return True
    return False


def contains_answer(passage_text: str, answers: list[str]) -> bool:
    """True iff any answer's token sequence occurs contiguously in the passage."""
    passage_tokens = tokenize(passage_text)
    for answer in answers:
        if _is_subsequence(tokenize(answer), passage_tokens):
            return True
    return False
