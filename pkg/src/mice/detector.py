"""Rule-based detection of container anaphors in procedural text.

Anaphors like "the mixture" or "the resulting solution" are found with a
small set of regular-expression rules. Longer matches win over shorter
overlapping ones; overlap is otherwise resolved by rule order, then by
position.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .corpus import Dataset, Example, Span


@dataclass(frozen=True)
class RuleSet:
    """Compiled detection rules. Patterns are matched on word boundaries."""

    patterns: tuple[str, ...]
    case_sensitive: bool = False
    _compiled: tuple[re.Pattern, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.patterns:
            raise ValueError("rule set must contain at least one pattern")
        flags = 0 if self.case_sensitive else re.IGNORECASE
        compiled = tuple(re.compile(rf"\b(?:{p})\b", flags) for p in self.patterns)
        object.__setattr__(self, "_compiled", compiled)

    def finditer(self, text: str) -> Iterable[tuple[int, int, int]]:
        """Yield (start, end, rule_index) for every raw rule match."""
        for idx, pattern in enumerate(self._compiled):
            for m in pattern.finditer(text):
                yield (m.start(), m.end(), idx)


def detect_anaphors(text: str, rules: RuleSet) -> list[Span]:
    """Find non-overlapping anaphor mentions, longest match first.

    All raw matches are ranked by descending length, then rule order, then
    position; matches overlapping an already-accepted span are discarded.
    The result is sorted by start offset.
    """
    matches = sorted(
        rules.finditer(text), key=lambda m: (-(m[1] - m[0]), m[2], m[0])
    )
    accepted: list[tuple[int, int]] = []
    for start, end, _ in matches:
        if any(start < b and a < end for a, b in accepted):
            continue
        accepted.append((start, end))
    accepted.sort()
    return [Span.from_offsets(text, a, b) for a, b in accepted]


@dataclass(frozen=True)
class DetectionReport:
    """Exact span-match scores for a detection run."""

    precision: float
    recall: float
    f1: float
    true_positives: int
    false_positives: int
    false_negatives: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "DetectionReport":
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        f1 = (
            2 * precision * recall / (precision + recall)
            if (precision + recall)
            else 0.0
        )
        return cls(precision, recall, f1, tp, fp, fn)


def evaluate_detection(
    predicted: Sequence[Span], gold: Sequence[Span]
) -> DetectionReport:
    """Score one document's detections by exact span match.

    Duplicate offsets on either side count once. Swapping the arguments
    exchanges precision and recall.
    """
    predicted_set = {s.offsets() for s in predicted}
    gold_set = {s.offsets() for s in gold}
    return DetectionReport.from_counts(
        tp=len(predicted_set & gold_set),
        fp=len(predicted_set - gold_set),
        fn=len(gold_set - predicted_set),
    )


def evaluate_rules(dataset: Dataset, rules: RuleSet) -> DetectionReport:
    """Pool exact-match detection counts over every document in a dataset.

    Each example contributes its gold anaphor; a document with several
    annotated anaphors is detected once and matched against all of them.
    """
    gold_by_doc: dict[str, set[tuple[int, int]]] = {}
    text_by_doc: dict[str, str] = {}
    for ex in dataset:
        gold_by_doc.setdefault(ex.doc_id, set()).add(ex.anaphor.offsets())
        text_by_doc[ex.doc_id] = ex.text
    tp = fp = fn = 0
    for doc_id, text in text_by_doc.items():
        predicted = {s.offsets() for s in detect_anaphors(text, rules)}
        gold = gold_by_doc[doc_id]
        tp += len(predicted & gold)
        fp += len(predicted - gold)
        fn += len(gold - predicted)
    return DetectionReport.from_counts(tp, fp, fn)


def detect_examples(
    doc_id: str, text: str, rules: RuleSet, limit: Optional[int] = None
) -> list[Example]:
    """Wrap detected anaphors as unlabeled examples, in document order."""
    spans = detect_anaphors(text, rules)
    if limit is not None:
        spans = spans[:limit]
    return [Example(doc_id=doc_id, text=text, anaphor=s) for s in spans]


def load_rules(path: str | Path, case_sensitive: bool = False) -> RuleSet:
    """Read one pattern per line; blank lines and `#` comments are skipped."""
    patterns = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            patterns.append(line)
    return RuleSet(patterns=tuple(patterns), case_sensitive=case_sensitive)


def default_rules() -> RuleSet:
    """The built-in rule set shipped with the package."""
    text = resources.files("mice").joinpath("data/default_rules.txt").read_text("utf-8")
    patterns = tuple(
        line.strip()
        for line in text.splitlines()
        if line.strip() and not line.lstrip().startswith("#")
    )
    return RuleSet(patterns=patterns)
