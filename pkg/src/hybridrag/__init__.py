"""Retrieval-augmented QA over earnings call transcripts with vector, graph and hybrid context."""

from __future__ import annotations

__version__ = "0.1.0"
