"""Turning generations into candidate antecedents and mixing them.

Each prompt's generation is parsed into a per-prompt prediction; the
combiners then weigh candidate surfaces across prompts:

  * mixture:       sum over prompts of first-token probability x gate weight
  * mixture-sample: same, with a 0/1 "did this prompt emit it" indicator
  * product:       product over prompts of floored first-token probability

First-token probability of a candidate under one prompt is the highest
probability that candidate's first token received at any answer slot of
that prompt's generation.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .gateway import Backend, DecodeMode, DecodeParams, Generation, Tokenizer
from .gating import GatingDistribution
from .prompts import Prompt, Template

_WS_RE = re.compile(r"\s+")


def canonicalize(surface: str) -> str:
    """Collapse whitespace runs and strip; case is preserved."""
    return _WS_RE.sub(" ", surface).strip()


@dataclass(frozen=True)
class PromptPrediction:
    """One prompt's parsed answer.

    ``generated_antecedents`` holds distinct canonical surfaces in first
    appearance order. ``slot_distributions`` holds one top-probability map
    per raw answer segment, pre-deduplication, so a repeated surface keeps
    the distributions from every slot it occupied. ``degraded`` marks
    predictions whose slots could not be aligned to the generation's
    token-level probabilities.
    """

    prompt_id: int
    generated_antecedents: tuple[str, ...] = ()
    slot_distributions: tuple[Mapping[str, float], ...] = ()
    degraded: bool = False


def _raw_segments(first_line: str, separator: str) -> list[str]:
    return [s for s in (seg.strip() for seg in first_line.split(separator)) if s]


def extract_prediction(
    generation: Generation,
    template: Template,
    tokenizer: Tokenizer,
    prompt_id: int = 0,
) -> PromptPrediction:
    """Parse one generation into surfaces plus per-slot distributions.

    Slots are aligned by walking the generation's tokens: the first token
    after the start or after a separator opens a slot and contributes its
    top-probability map. A walk that does not yield one map per raw answer
    segment marks the prediction degraded and pads with empty maps.
    """
    first_line = generation.text.split("\n", 1)[0]
    raw = _raw_segments(first_line, template.separator)
    canonical = [canonicalize(s) for s in raw]
    seen: set[str] = set()
    distinct = tuple(s for s in canonical if not (s in seen or seen.add(s)))

    slots: list[Mapping[str, float]] = []
    expecting = True
    for i, token in enumerate(generation.tokens):
        if "\n" in token:
            break
        if token.strip() == template.separator:
            expecting = True
            continue
        if expecting:
            dist = generation.top_probs[i] if i < len(generation.top_probs) else {}
            slots.append(dict(dist))
            expecting = False

    degraded = len(slots) != len(raw)
    if len(slots) < len(raw):
        slots.extend({} for _ in range(len(raw) - len(slots)))
    elif len(slots) > len(raw):
        slots = slots[: len(raw)]
    return PromptPrediction(
        prompt_id=prompt_id,
        generated_antecedents=distinct,
        slot_distributions=tuple(slots),
        degraded=degraded,
    )


def first_token_prob(first_token: str, prediction: PromptPrediction) -> float:
    """Highest probability the token received at any answer slot."""
    best = 0.0
    for dist in prediction.slot_distributions:
        p = dist.get(first_token, 0.0)
        if p > best:
            best = p
    return best


@dataclass(frozen=True)
class CandidateAntecedent:
    """A candidate surface with its per-prompt and combined scores."""

    surface: str
    first_token: str
    combined_prob: float
    per_prompt_prob: Mapping[int, float] = field(default_factory=dict)

    def max_per_prompt(self) -> float:
        return max(self.per_prompt_prob.values(), default=0.0)


def _candidate_universe(predictions: Sequence[PromptPrediction]) -> list[str]:
    """Distinct candidate surfaces in first appearance order across prompts."""
    seen: set[str] = set()
    out: list[str] = []
    for pred in predictions:
        for surface in pred.generated_antecedents:
            if surface not in seen:
                seen.add(surface)
                out.append(surface)
    return out


def _rank(candidates: list[CandidateAntecedent]) -> list[CandidateAntecedent]:
    return sorted(candidates, key=lambda c: (-c.combined_prob, c.surface))


def combine_mice(
    predictions: Sequence[PromptPrediction],
    gating: GatingDistribution,
    tokenizer: Tokenizer,
) -> list[CandidateAntecedent]:
    """Probability-weighted mixture over prompts.

    Each candidate's combined probability is the gate-weighted sum of its
    first-token probability under every prompt. Candidates no prompt
    assigns any mass are dropped; the rest are ranked by combined
    probability, ties by surface.
    """
    if not predictions:
        raise ValueError("cannot combine an empty prediction list")
    candidates: list[CandidateAntecedent] = []
    for surface in _candidate_universe(predictions):
        token = tokenizer.tokenize(surface)[0]
        per_prompt = {
            pred.prompt_id: first_token_prob(token, pred) for pred in predictions
        }
        combined = sum(
            gating[pid] * p for pid, p in per_prompt.items()
        )
        if combined > 0.0:
            candidates.append(
                CandidateAntecedent(
                    surface=surface,
                    first_token=token,
                    combined_prob=combined,
                    per_prompt_prob=per_prompt,
                )
            )
    return _rank(candidates)


def combine_mice_sample(
    predictions: Sequence[PromptPrediction],
    gating: GatingDistribution,
    tokenizer: Tokenizer,
) -> list[CandidateAntecedent]:
    """Sampling form of the mixture: membership indicators replace probabilities.

    A prompt contributes its full gate weight to every surface it emitted
    and nothing to the rest, so no token-level probabilities are needed.
    """
    if not predictions:
        raise ValueError("cannot combine an empty prediction list")
    candidates: list[CandidateAntecedent] = []
    for surface in _candidate_universe(predictions):
        token = tokenizer.tokenize(surface)[0]
        per_prompt = {
            pred.prompt_id: (1.0 if surface in pred.generated_antecedents else 0.0)
            for pred in predictions
        }
        combined = sum(gating[pid] * ind for pid, ind in per_prompt.items())
        if combined > 0.0:
            candidates.append(
                CandidateAntecedent(
                    surface=surface,
                    first_token=token,
                    combined_prob=combined,
                    per_prompt_prob=per_prompt,
                )
            )
    return _rank(candidates)


def combine_product(
    predictions: Sequence[PromptPrediction],
    tokenizer: Tokenizer,
    epsilon: float = 1e-4,
) -> list[CandidateAntecedent]:
    """Unweighted product of per-prompt first-token probabilities.

    Probabilities are floored at ``epsilon`` so one prompt that never saw
    a candidate dampens it instead of zeroing it outright. Stored
    per-prompt values are the raw, unfloored probabilities.
    """
    if epsilon <= 0.0:
        raise ValueError("epsilon must be positive")
    if not predictions:
        raise ValueError("cannot combine an empty prediction list")
    candidates: list[CandidateAntecedent] = []
    for surface in _candidate_universe(predictions):
        token = tokenizer.tokenize(surface)[0]
        per_prompt = {
            pred.prompt_id: first_token_prob(token, pred) for pred in predictions
        }
        combined = 1.0
        for p in per_prompt.values():
            combined *= max(p, epsilon)
        candidates.append(
            CandidateAntecedent(
                surface=surface,
                first_token=token,
                combined_prob=combined,
                per_prompt_prob=per_prompt,
            )
        )
    return _rank(candidates)


def combine_single(
    prediction: PromptPrediction, tokenizer: Tokenizer
) -> list[CandidateAntecedent]:
    """Wrap one prompt's answer as candidates with full confidence."""
    return combine_mice_sample(
        [prediction], GatingDistribution.single(prediction.prompt_id), tokenizer
    )


def combine_kate_plus(
    kate_prompt: Prompt,
    backend: Backend,
    decode: DecodeParams,
    n_samples: int,
    template: Template,
    tokenizer: Tokenizer,
    parallelism: int = 8,
) -> tuple[list[CandidateAntecedent], list[Generation]]:
    """Sample the nearest-neighbors prompt repeatedly and pool the answers.

    Each draw uses a distinct derived seed; surfaces are combined with the
    membership indicator under uniform weights, so a candidate's combined
    probability is the fraction of samples that produced it.
    """
    if decode.mode is not DecodeMode.NUCLEUS:
        raise ValueError("repeated sampling requires nucleus decoding")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    base_seed = decode.seed or 0
    param_list = [decode.with_seed(base_seed + i) for i in range(n_samples)]
    generations: list[Generation] = []
    if parallelism <= 1:
        generations = [backend.complete(kate_prompt.text, p) for p in param_list]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=min(parallelism, n_samples)) as pool:
            futures = [
                pool.submit(backend.complete, kate_prompt.text, p) for p in param_list
            ]
            generations = [f.result() for f in futures]
    predictions = [
        extract_prediction(gen, template, tokenizer, prompt_id=i)
        for i, gen in enumerate(generations)
    ]
    gating = GatingDistribution.uniform(list(range(n_samples)))
    return combine_mice_sample(predictions, gating, tokenizer), generations
