"""Data model and ingestion for anaphora-annotated protocol corpora.

A corpus is a JSONL file with one object per anaphor example:

    {"doc_id": "...", "text": "...",
     "anaphor": {"start": int, "end": int},
     "antecedents": [{"start": int, "end": int}, ...]}

Offsets are 0-based character offsets counting Unicode scalar values,
``start`` inclusive and ``end`` exclusive. ``antecedents`` may be absent
for unlabeled data.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np


class CorpusError(ValueError):
    """A corpus file or record violates the data contract."""


@dataclass(frozen=True)
class Span:
    """A character span with its cached surface string."""

    start: int
    end: int
    surface: str

    @classmethod
    def from_offsets(cls, text: str, start: int, end: int) -> "Span":
        if not (0 <= start < end <= len(text)):
            raise CorpusError(f"invalid span [{start}, {end}) for text of length {len(text)}")
        return cls(start=start, end=end, surface=text[start:end])

    def offsets(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class Example:
    """One document with a query anaphor and, if labeled, its gold antecedents."""

    doc_id: str
    text: str
    anaphor: Span
    gold_antecedents: Optional[tuple[Span, ...]] = None

    @property
    def key(self) -> str:
        """Unique identifier within a dataset: doc id plus anaphor offsets."""
        return f"{self.doc_id}:{self.anaphor.start}:{self.anaphor.end}"

    @property
    def is_labeled(self) -> bool:
        return self.gold_antecedents is not None

    def gold_surfaces(self) -> list[str]:
        """Antecedent surfaces in document order."""
        if self.gold_antecedents is None:
            raise CorpusError(f"example {self.key} is unlabeled")
        return [s.surface for s in sorted(self.gold_antecedents, key=lambda s: s.start)]

    def validate(self, where: str = "") -> None:
        loc = f" at {where}" if where else ""
        n = len(self.text)
        for name, span in [("anaphor", self.anaphor)] + [
            ("antecedent", a) for a in (self.gold_antecedents or ())
        ]:
            if not (0 <= span.start < span.end <= n):
                raise CorpusError(f"invalid span{loc}: {name} [{span.start}, {span.end})")
            if span.surface != self.text[span.start : span.end]:
                raise CorpusError(f"surface mismatch{loc}: {name} [{span.start}, {span.end})")
        if self.gold_antecedents is not None:
            seen: set[tuple[int, int]] = set()
            for a in self.gold_antecedents:
                if a.end > self.anaphor.start:
                    raise CorpusError(f"antecedent follows anaphor{loc}")
                if a.offsets() in seen:
                    raise CorpusError(f"duplicate antecedent{loc}: [{a.start}, {a.end})")
                seen.add(a.offsets())


@dataclass(frozen=True)
class Dataset:
    """An ordered, immutable collection of examples from one split."""

    examples: tuple[Example, ...]
    split_name: str = ""

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for ex in self.examples:
            if ex.key in seen:
                raise CorpusError(f"duplicate anaphor key {ex.key}")
            seen.add(ex.key)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __getitem__(self, i: int) -> Example:
        return self.examples[i]


@dataclass(frozen=True)
class KShotSample:
    """A seeded draw of k training examples, without replacement."""

    k: int
    seed: int
    examples: tuple[Example, ...]

    def __post_init__(self) -> None:
        if len(self.examples) != self.k:
            raise CorpusError(f"k-shot sample of size {len(self.examples)} does not match k={self.k}")

    def __len__(self) -> int:
        return self.k

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)


def _example_from_record(record: dict, line_no: int) -> Example:
    try:
        doc_id = record["doc_id"]
        text = record["text"]
        ana = record["anaphor"]
        anaphor = Span.from_offsets(text, int(ana["start"]), int(ana["end"]))
        antecedents: Optional[tuple[Span, ...]] = None
        if "antecedents" in record and record["antecedents"] is not None:
            antecedents = tuple(
                Span.from_offsets(text, int(a["start"]), int(a["end"]))
                for a in record["antecedents"]
            )
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"missing or malformed field at line {line_no}: {exc}") from exc
    except CorpusError as exc:
        raise CorpusError(f"{exc} at line {line_no}") from exc
    example = Example(doc_id=doc_id, text=text, anaphor=anaphor, gold_antecedents=antecedents)
    example.validate(where=f"line {line_no}")
    return example


def load_corpus(path: str | Path, split_name: Optional[str] = None) -> Dataset:
    """Load and validate a corpus JSONL file, preserving line order."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")
    examples: list[Example] = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"malformed JSON at line {line_no}: {exc.msg}") from exc
            examples.append(_example_from_record(record, line_no))
    return Dataset(examples=tuple(examples), split_name=split_name or path.stem)


def example_to_record(example: Example) -> dict:
    record: dict = {
        "doc_id": example.doc_id,
        "text": example.text,
        "anaphor": {"start": example.anaphor.start, "end": example.anaphor.end},
    }
    if example.gold_antecedents is not None:
        record["antecedents"] = [
            {"start": a.start, "end": a.end} for a in example.gold_antecedents
        ]
    return record


def save_corpus(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset back to JSONL; load_corpus(save_corpus(d)) round-trips."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ex in dataset:
            fh.write(json.dumps(example_to_record(ex), ensure_ascii=False) + "\n")


def sample_kshot(dataset: Dataset, k: int, seed: int) -> KShotSample:
    """Draw k examples uniformly without replacement, reproducibly.

    The draw is a partial Fisher-Yates shuffle driven by numpy's PCG64
    generator seeded with ``seed``: for i in 0..k-1 swap position i with
    position ``PCG64(seed).integers(i, n)``, then take the first k slots.
    The algorithm is documented so other implementations can match it.
    """
    n = len(dataset)
    if k > n:
        raise ValueError(f"k={k} exceeds dataset size {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    indices = list(range(n))
    for i in range(k):
        j = int(rng.integers(i, n))
        indices[i], indices[j] = indices[j], indices[i]
    chosen = tuple(dataset.examples[i] for i in indices[:k])
    return KShotSample(k=k, seed=seed, examples=chosen)
