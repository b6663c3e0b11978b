"""Prompt construction: templates, demonstration tuples, ordering, budgets.

Each prompt stacks a handful of worked demonstrations above the test
passage in a question-answering layout:

    <demo text>
    Question: What does <anaphor> contain?
    Answer: <antecedent> | <antecedent> | ...

    <test text>
    Question: What does <anaphor> contain?
    Answer:

A prompt set enumerates demonstration tuples from a k-shot sample (ordered,
with replacement), selects up to a cap of them, orders the demonstrations
inside each prompt, and trims prompts that exceed the model's context
budget.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .corpus import Example, KShotSample
from .gateway import Tokenizer

# Full universes are materialized up to this size; beyond it only seeded
# random selection is available.
_ENUMERATION_CAP = 1_000_000


class PromptBudgetError(ValueError):
    """A test passage cannot fit the context window even with no demonstrations."""


class Ordering(str, Enum):
    """How demonstrations are arranged inside one prompt."""

    ASCEND = "ascend"    # least similar first, most similar adjacent to the test input
    DESCEND = "descend"  # most similar first
    MIXED = "mixed"      # per-prompt seeded shuffle


class Selection(str, Enum):
    """How the prompt subset is chosen from the demonstration universe."""

    TOP_GATED = "top-gated"        # highest summed similarity first
    SEEDED_RANDOM = "seeded-random"  # uniform without replacement


@dataclass(frozen=True)
class Template:
    """The question-answering surface form shared by demonstrations and queries."""

    question_pattern: str = "Question: What does {anaphor} contain?"
    answer_prefix: str = "Answer:"
    separator: str = "|"
    demonstration_joiner: str = "\n\n"

    def question(self, example: Example) -> str:
        return self.question_pattern.format(anaphor=example.anaphor.surface)

    def linearize(self, surfaces: Sequence[str]) -> str:
        """Join antecedent surfaces into one answer line."""
        return f" {self.separator} ".join(surfaces)

    def render_example(self, example: Example, include_answer: bool) -> str:
        body = f"{example.text}\n{self.question(example)}\n{self.answer_prefix}"
        if include_answer:
            body += " " + self.linearize(example.gold_surfaces())
        return body

    def render_prompt(self, demonstrations: Sequence[Example], test: Example) -> str:
        parts = [self.render_example(d, include_answer=True) for d in demonstrations]
        parts.append(self.render_example(test, include_answer=False))
        return self.demonstration_joiner.join(parts)

    def parse_antecedents(self, generated: str) -> list[str]:
        """Split a generated answer line into distinct antecedent strings.

        Only the first line counts; segments are stripped, empties dropped,
        and repeats keep their first occurrence.
        """
        line = generated.split("\n", 1)[0]
        seen: set[str] = set()
        out: list[str] = []
        for segment in line.split(self.separator):
            surface = segment.strip()
            if surface and surface not in seen:
                seen.add(surface)
                out.append(surface)
        return out

    def validate_against(self, sample: KShotSample) -> None:
        """Reject samples whose gold surfaces would collide with the separator."""
        for ex in sample:
            for surface in ex.gold_surfaces():
                if self.separator in surface:
                    raise ValueError(
                        f"antecedent {surface!r} in {ex.key} contains the "
                        f"separator {self.separator!r}"
                    )


@dataclass(frozen=True)
class PromptSetConfig:
    """Knobs for building one prompt set."""

    demos_per_prompt: int = 2
    max_prompts: int = 256
    ordering: Ordering = Ordering.ASCEND
    selection: Selection = Selection.TOP_GATED
    seed: int = 0
    max_sequence_length: int = 2048
    generation_reserve: int = 256

    def __post_init__(self) -> None:
        if self.demos_per_prompt < 1:
            raise ValueError("demos_per_prompt must be positive")
        if self.max_prompts < 1:
            raise ValueError("max_prompts must be positive")
        if self.generation_reserve < 0:
            raise ValueError("generation_reserve must be non-negative")
        if self.max_sequence_length <= self.generation_reserve:
            raise ValueError("max_sequence_length must exceed generation_reserve")

    @property
    def input_budget(self) -> int:
        """Tokens available for the prompt after reserving generation room."""
        return self.max_sequence_length - self.generation_reserve


@dataclass(frozen=True)
class Prompt:
    """One rendered prompt: which demos it uses, in order, and its text."""

    prompt_id: int
    universe_index: int
    demo_indices: tuple[int, ...]
    text: str
    token_count: int
    dropped_demo_indices: tuple[int, ...] = ()


def universe_size(k: int, d: int) -> int:
    """Size of the demonstration-tuple universe.

    One or two demos per prompt use ordered tuples with replacement (k and
    k*k), matching the quadratic 256-cap arithmetic; three or more use
    ordered tuples of distinct demos (falling factorial).
    """
    if d <= 2:
        return k**d
    size = 1
    for i in range(d):
        size *= k - i
    return size


def tuple_from_universe_index(u: int, k: int, d: int) -> tuple[int, ...]:
    """Decode a universe index into its demo-index tuple (lexicographic)."""
    if d <= 2:
        digits = []
        for _ in range(d):
            digits.append(u % k)
            u //= k
        return tuple(reversed(digits))
    available = list(range(k))
    out: list[int] = []
    block = universe_size(k, d)
    for pos in range(d):
        block //= k - pos
        idx, u = divmod(u, block)
        out.append(available.pop(idx))
    return tuple(out)


def universe_index_from_tuple(demo_indices: Sequence[int], k: int) -> int:
    """Inverse of tuple_from_universe_index."""
    d = len(demo_indices)
    if d <= 2:
        u = 0
        for i in demo_indices:
            u = u * k + i
        return u
    available = list(range(k))
    u = 0
    for pos, value in enumerate(demo_indices):
        idx = available.index(value)
        u = u * (k - pos) + idx
        available.pop(idx)
    return u


def order_demonstrations(
    demo_indices: Sequence[int],
    similarities: Sequence[float],
    ordering: Ordering,
    seed: int,
    universe_index: int,
) -> tuple[int, ...]:
    """Arrange one prompt's demos; the mixed order is seeded per prompt."""
    positions = list(range(len(demo_indices)))
    if ordering is Ordering.ASCEND:
        positions.sort(key=lambda p: (similarities[demo_indices[p]], p))
    elif ordering is Ordering.DESCEND:
        positions.sort(key=lambda p: (-similarities[demo_indices[p]], p))
    else:
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([seed, universe_index]))
        )
        for i in range(len(positions) - 1):
            j = int(rng.integers(i, len(positions)))
            positions[i], positions[j] = positions[j], positions[i]
    return tuple(demo_indices[p] for p in positions)


def _select_universe_indices(
    k: int, config: PromptSetConfig, similarities: Sequence[float]
) -> list[int]:
    """Pick which demo tuples become prompts, returned sorted ascending."""
    d = config.demos_per_prompt
    total = universe_size(k, d)
    n = min(config.max_prompts, total)
    if total <= _ENUMERATION_CAP:
        if n == total:
            return list(range(total))
        if config.selection is Selection.TOP_GATED:
            scores = [
                (-sum(similarities[i] for i in tuple_from_universe_index(u, k, d)), u)
                for u in range(total)
            ]
            scores.sort()
            return sorted(u for _, u in scores[:n])
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed])))
        indices = list(range(total))
        for i in range(n):
            j = int(rng.integers(i, total))
            indices[i], indices[j] = indices[j], indices[i]
        return sorted(indices[:n])
    if config.selection is Selection.TOP_GATED:
        raise ValueError(
            f"universe of {total} tuples is too large to rank; "
            "use seeded-random selection"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed])))
    chosen: set[int] = set()
    while len(chosen) < n:
        chosen.add(int(rng.integers(0, total)))
    return sorted(chosen)


def _trim_to_budget(
    ordered: tuple[int, ...],
    sample: KShotSample,
    test: Example,
    config: PromptSetConfig,
    similarities: Sequence[float],
    template: Template,
    tokenizer: Tokenizer,
) -> tuple[tuple[int, ...], str, int, tuple[int, ...]]:
    """Drop least-similar demos until the rendered prompt fits the budget."""
    current = list(ordered)
    dropped: list[int] = []
    while True:
        text = template.render_prompt([sample.examples[i] for i in current], test)
        count = tokenizer.count(text)
        if count <= config.input_budget:
            return tuple(current), text, count, tuple(dropped)
        if not current:
            raise PromptBudgetError(
                f"test input for {test.key} needs {count} tokens; "
                f"budget is {config.input_budget}"
            )
        victim_pos = min(
            range(len(current)), key=lambda p: (similarities[current[p]], p)
        )
        dropped.append(current.pop(victim_pos))


def enumerate_prompts(
    sample: KShotSample,
    test: Example,
    config: PromptSetConfig,
    similarities: Sequence[float],
    template: Template,
    tokenizer: Tokenizer,
) -> list[Prompt]:
    """Build the prompt set for one test example.

    Returns prompts with dense ids 0..n-1 assigned in universe order, so
    the same sample, config, and similarities always produce the same set.
    """
    k = sample.k
    if len(similarities) != k:
        raise ValueError(f"{len(similarities)} similarities for k={k}")
    selected = _select_universe_indices(k, config, similarities)
    prompts: list[Prompt] = []
    for prompt_id, u in enumerate(selected):
        demo_tuple = tuple_from_universe_index(u, k, config.demos_per_prompt)
        ordered = order_demonstrations(
            demo_tuple, similarities, config.ordering, config.seed, u
        )
        kept, text, count, dropped = _trim_to_budget(
            ordered, sample, test, config, similarities, template, tokenizer
        )
        prompts.append(
            Prompt(
                prompt_id=prompt_id,
                universe_index=u,
                demo_indices=kept,
                text=text,
                token_count=count,
                dropped_demo_indices=dropped,
            )
        )
    return prompts


def select_kate_prompt(
    sample: KShotSample,
    test: Example,
    config: PromptSetConfig,
    similarities: Sequence[float],
    template: Template,
    tokenizer: Tokenizer,
) -> Prompt:
    """Build the single nearest-neighbors prompt: the top demos by similarity.

    The ``demos_per_prompt`` most similar demonstrations (ties broken by
    sample position) form one prompt, ordered and budget-trimmed the same
    way as enumerated prompts.
    """
    k = sample.k
    if len(similarities) != k:
        raise ValueError(f"{len(similarities)} similarities for k={k}")
    ranked = sorted(range(k), key=lambda i: (-similarities[i], i))
    demo_tuple = tuple(sorted(ranked[: config.demos_per_prompt]))
    u = universe_index_from_tuple(demo_tuple, k)
    ordered = order_demonstrations(
        demo_tuple, similarities, config.ordering, config.seed, u
    )
    kept, text, count, dropped = _trim_to_budget(
        ordered, sample, test, config, similarities, template, tokenizer
    )
    return Prompt(
        prompt_id=0,
        universe_index=u,
        demo_indices=kept,
        text=text,
        token_count=count,
        dropped_demo_indices=dropped,
    )
