"""Ensemble in-context inference for split-antecedent anaphora in procedural text."""
from __future__ import annotations

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    CorpusError,
    Dataset,
    Example,
    KShotSample,
    Span,
    load_corpus,
    sample_kshot,
    save_corpus,
)
