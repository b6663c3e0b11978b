"""Pseudo-label export: teacher predictions as BIO-tagged token sequences.

For each detected anaphor in an unlabeled document, the teacher pipeline
predicts antecedent surfaces; those surfaces are aligned back to token
runs in the document (the occurrence nearest to and preceding the
anaphor), tagged B/I against an O background, and the anaphor itself is
bracketed with two marker tokens. Records export to JSONL (with per-run
confidences) or CONLL (token TAB tag).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

from .corpus import CorpusError, Example, Span
from .detector import RuleSet, detect_examples
from .gateway import Tokenizer, WordTokenizer

logger = logging.getLogger(__name__)

MARKER_START = "[Ana-start]"
MARKER_END = "[Ana-end]"

TAG_BEGIN = "B"
TAG_INSIDE = "I"
TAG_OUTSIDE = "O"


class Teacher(Protocol):
    def predict(self, example: Example) -> list[tuple[str, float]]: ...


@dataclass(frozen=True)
class PseudoLabeledRecord:
    """One anaphor's tagged token sequence.

    ``tokens`` includes the two marker tokens bracketing exactly the
    anaphor's tokens; markers and anaphor tokens carry tag O. Every B
    opens one aligned predicted-antecedent run; ``confidences`` lists the
    combined probability of each B-run in token order.
    """

    doc_id: str
    anaphor: Span
    tokens: tuple[str, ...]
    tags: tuple[str, ...]
    confidences: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.tags):
            raise ValueError(
                f"{len(self.tags)} tags for {len(self.tokens)} tokens in {self.doc_id}"
            )
        if self.tokens.count(MARKER_START) != 1 or self.tokens.count(MARKER_END) != 1:
            raise ValueError(f"markers must appear exactly once each in {self.doc_id}")
        start = self.tokens.index(MARKER_START)
        end = self.tokens.index(MARKER_END)
        if start >= end:
            raise ValueError(f"marker order violated in {self.doc_id}")
        if self.tags[start] != TAG_OUTSIDE or self.tags[end] != TAG_OUTSIDE:
            raise ValueError(f"marker tokens must carry tag O in {self.doc_id}")
        previous = TAG_OUTSIDE
        for tag in self.tags:
            if tag not in (TAG_BEGIN, TAG_INSIDE, TAG_OUTSIDE):
                raise ValueError(f"unknown tag {tag!r} in {self.doc_id}")
            if tag == TAG_INSIDE and previous == TAG_OUTSIDE:
                raise ValueError(f"I without preceding B in {self.doc_id}")
            previous = tag
        if len(self.confidences) != self.tags.count(TAG_BEGIN):
            raise ValueError(
                f"{len(self.confidences)} confidences for "
                f"{self.tags.count(TAG_BEGIN)} runs in {self.doc_id}"
            )


@dataclass
class DropLog:
    """Why predicted surfaces were left out of the tags."""

    entries: list[dict] = field(default_factory=list)

    def record(self, doc_id: str, anaphor_key: str, surface: str, reason: str) -> None:
        logger.info("dropping %r for %s: %s", surface, anaphor_key, reason)
        self.entries.append(
            {
                "doc_id": doc_id,
                "anaphor": anaphor_key,
                "surface": surface,
                "reason": reason,
            }
        )


def find_alignment(
    doc_tokens: Sequence[str],
    token_spans: Sequence[tuple[int, int]],
    surface_tokens: Sequence[str],
    anaphor_start: int,
    claimed: Sequence[bool],
) -> Optional[tuple[int, int]]:
    """Locate the nearest preceding unclaimed occurrence of a token run.

    Scans candidate start positions from the anaphor backwards; a match
    must end (in characters) at or before the anaphor start and must not
    overlap token indices already claimed by another prediction.
    """
    m = len(surface_tokens)
    if m == 0:
        return None
    for start in range(len(doc_tokens) - m, -1, -1):
        end = start + m
        if token_spans[end - 1][1] > anaphor_start:
            continue
        if list(doc_tokens[start:end]) != list(surface_tokens):
            continue
        if any(claimed[start:end]):
            continue
        return (start, end)
    return None


def build_record(
    example: Example,
    predictions: Sequence[tuple[str, float]],
    tokenizer: Tokenizer,
    drop_log: Optional[DropLog] = None,
) -> PseudoLabeledRecord:
    """Align one anaphor's predicted surfaces and assemble the tagged record.

    Predictions are aligned in decreasing-confidence order (ties by
    surface) so stronger predictions claim tokens first; surfaces with no
    available occurrence before the anaphor are dropped and logged.
    """
    text = example.text
    token_spans = tokenizer.span_tokenize(text)
    doc_tokens = [text[a:b] for a, b in token_spans]
    claimed = [False] * len(doc_tokens)
    tags = [TAG_OUTSIDE] * len(doc_tokens)
    runs: list[tuple[int, float]] = []

    for surface, confidence in sorted(predictions, key=lambda p: (-p[1], p[0])):
        surface_tokens = tokenizer.tokenize(surface)
        found = find_alignment(
            doc_tokens, token_spans, surface_tokens, example.anaphor.start, claimed
        )
        if found is None:
            if drop_log is not None:
                drop_log.record(
                    example.doc_id, example.key, surface,
                    "no unclaimed occurrence before the anaphor",
                )
            continue
        start, end = found
        for i in range(start, end):
            claimed[i] = True
        tags[start] = TAG_BEGIN
        for i in range(start + 1, end):
            tags[i] = TAG_INSIDE
        runs.append((start, confidence))

    ana_range = [
        i
        for i, (a, b) in enumerate(token_spans)
        if a < example.anaphor.end and example.anaphor.start < b
    ]
    if not ana_range:
        raise CorpusError(f"anaphor in {example.key} covers no tokens")
    lo, hi = ana_range[0], ana_range[-1] + 1

    out_tokens = (
        list(doc_tokens[:lo])
        + [MARKER_START]
        + list(doc_tokens[lo:hi])
        + [MARKER_END]
        + list(doc_tokens[hi:])
    )
    out_tags = (
        tags[:lo] + [TAG_OUTSIDE] + [TAG_OUTSIDE] * (hi - lo) + [TAG_OUTSIDE] + tags[hi:]
    )
    confidences = tuple(conf for _, conf in sorted(runs))
    return PseudoLabeledRecord(
        doc_id=example.doc_id,
        anaphor=example.anaphor,
        tokens=tuple(out_tokens),
        tags=tuple(out_tags),
        confidences=confidences,
    )


def load_unlabeled_docs(path: str | Path) -> list[tuple[str, str]]:
    """Read unlabeled documents: JSONL of {"doc_id": ..., "text": ...}."""
    docs: list[tuple[str, str]] = []
    with Path(path).open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                docs.append((record["doc_id"], record["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"bad unlabeled doc at line {line_no}: {exc}") from exc
    return docs


def generate_pseudo_labels(
    docs: Sequence[tuple[str, str]],
    teacher: Teacher,
    m: int,
    rules: RuleSet,
    tokenizer: Optional[Tokenizer] = None,
    drop_log: Optional[DropLog] = None,
    checkpoint_path: Optional[str | Path] = None,
) -> list[PseudoLabeledRecord]:
    """Detect anaphors, resolve each through the teacher, align, and tag.

    Anaphors are taken in document order across ``docs``; the first ``m``
    become records. A backend failure mid-run re-raises after writing the
    completed records to ``checkpoint_path`` (if given).
    """
    tokenizer = tokenizer or WordTokenizer()
    pending: list[Example] = []
    for doc_id, text in docs:
        pending.extend(detect_examples(doc_id, text, rules))
    if m > len(pending):
        raise ValueError(f"requested {m} records but only {len(pending)} anaphors detected")
    records: list[PseudoLabeledRecord] = []
    try:
        for example in pending[:m]:
            predictions = teacher.predict(example)
            records.append(build_record(example, predictions, tokenizer, drop_log))
    except Exception:
        if checkpoint_path is not None and records:
            export_records(records, checkpoint_path, "jsonl")
            logger.warning(
                "checkpointed %d records to %s before failure", len(records), checkpoint_path
            )
        raise
    return records


def record_to_dict(record: PseudoLabeledRecord) -> dict:
    return {
        "doc_id": record.doc_id,
        "anaphor": {
            "start": record.anaphor.start,
            "end": record.anaphor.end,
            "surface": record.anaphor.surface,
        },
        "tokens": list(record.tokens),
        "tags": list(record.tags),
        "confidences": list(record.confidences),
    }


def record_from_dict(payload: dict) -> PseudoLabeledRecord:
    ana = payload["anaphor"]
    return PseudoLabeledRecord(
        doc_id=payload["doc_id"],
        anaphor=Span(start=ana["start"], end=ana["end"], surface=ana["surface"]),
        tokens=tuple(payload["tokens"]),
        tags=tuple(payload["tags"]),
        confidences=tuple(payload["confidences"]),
    )


def export_records(
    records: Sequence[PseudoLabeledRecord], path: str | Path, fmt: str
) -> None:
    """Write records deterministically; JSONL keeps confidences, CONLL tags only."""
    path = Path(path)
    if fmt == "jsonl":
        body = "".join(
            json.dumps(record_to_dict(r), sort_keys=True, ensure_ascii=False) + "\n"
            for r in records
        )
    elif fmt == "conll":
        blocks = [
            "\n".join(f"{tok}\t{tag}" for tok, tag in zip(r.tokens, r.tags))
            for r in records
        ]
        body = "\n\n".join(blocks) + "\n" if blocks else ""
    else:
        raise ValueError(f"unknown export format: {fmt!r}")
    path.write_text(body, encoding="utf-8")


def load_records(path: str | Path) -> list[PseudoLabeledRecord]:
    """Reload a JSONL export; inverse of export_records(..., "jsonl")."""
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(record_from_dict(json.loads(line)))
    return records
