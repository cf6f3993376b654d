"""Shared test helpers."""

from retrievalab.corpus import Passage


def make_passages(texts, titles=None):
    """Passages with contiguous ids 0..n-1 from plain text strings."""
    titles = titles or [""] * len(texts)
    return [
        Passage(
            passage_id=i,
            source_doc=f"doc{i}",
            title=titles[i],
            text=text,
            token_count=len(text.split()),
        )
        for i, text in enumerate(texts)
    ]
