"""Desk-scale dense passage retrieval workbench.

Trains a separate question/passage encoder pair per domain with a
contrastive objective, retrieves by exact dot-product top-k, and evaluates
every cross-domain pairing of question and passage encoders against a BM25
baseline.
"""

__version__ = "0.1.0"
