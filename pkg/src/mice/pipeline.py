"""End-to-end resolution: embed, build prompts, query, combine, filter, score.

The pipeline owns run manifests: JSONL files carrying the configuration,
every prompt id, gating weight, generation, candidate, and final set, so
any run can be replayed and re-scored without touching a backend.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .combine import (
    CandidateAntecedent,
    PromptPrediction,
    combine_kate_plus,
    combine_mice,
    combine_mice_sample,
    combine_product,
    combine_single,
    extract_prediction,
)
from .corpus import Dataset, Example, KShotSample
from .gateway import (
    Backend,
    BackendError,
    DecodeMode,
    DecodeParams,
    Generation,
    Tokenizer,
    WordTokenizer,
    complete_many,
)
from .gating import Embedder, GatingDistribution, HashingEmbedder, gate, similarities
from .metrics import ScoreReport, micro_f1
from .postfilter import FilterConfig, filter_and_merge
from .prompts import (
    Ordering,
    Prompt,
    PromptBudgetError,
    PromptSetConfig,
    Selection,
    Template,
    enumerate_prompts,
    select_kate_prompt,
)

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "mice-manifest/1"


class Combiner(str, Enum):
    MICE = "mice"
    MICE_S = "mice-s"
    KATE = "kate"
    KATE_PLUS = "kate-plus"
    PRODUCT = "product"


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run besides the data and the backend."""

    combiner: Combiner = Combiner.MICE_S
    prompt: PromptSetConfig = PromptSetConfig()
    decode: DecodeParams = DecodeParams.greedy()
    filters: FilterConfig = FilterConfig()
    gate_combine: str = "sum"
    parallelism: int = 8
    kate_plus_samples: int = 256
    embed_dim: int = 1024

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.parallelism < 1:
            raise ValueError("parallelism must be positive")
        if self.kate_plus_samples < 1:
            raise ValueError("kate_plus_samples must be positive")
        if self.gate_combine not in ("sum", "product"):
            raise ValueError(f"unknown gate_combine: {self.gate_combine!r}")
        if self.combiner is Combiner.KATE_PLUS and self.decode.mode is not DecodeMode.NUCLEUS:
            raise ValueError("kate-plus requires nucleus decoding")

    def to_dict(self) -> dict:
        return {
            "combiner": self.combiner.value,
            "gate_combine": self.gate_combine,
            "parallelism": self.parallelism,
            "kate_plus_samples": self.kate_plus_samples,
            "embed_dim": self.embed_dim,
            "prompt": {
                "demos_per_prompt": self.prompt.demos_per_prompt,
                "max_prompts": self.prompt.max_prompts,
                "ordering": self.prompt.ordering.value,
                "selection": self.prompt.selection.value,
                "seed": self.prompt.seed,
                "max_sequence_length": self.prompt.max_sequence_length,
                "generation_reserve": self.prompt.generation_reserve,
            },
            "decode": {
                "mode": self.decode.mode.value,
                "max_tokens": self.decode.max_tokens,
                "top_k": self.decode.top_k,
                "top_p": self.decode.top_p,
                "temperature": self.decode.temperature,
                "stop_sequences": list(self.decode.stop_sequences),
                "logprob_depth": self.decode.logprob_depth,
                "seed": self.decode.seed,
            },
            "filters": {
                "max_antecedent_tokens": self.filters.max_antecedent_tokens,
                "per_prompt_threshold": self.filters.per_prompt_threshold,
                "combined_threshold": self.filters.combined_threshold,
                "merge_substrings": self.filters.merge_substrings,
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RunConfig":
        p = payload["prompt"]
        d = payload["decode"]
        f = payload["filters"]
        return cls(
            combiner=Combiner(payload["combiner"]),
            gate_combine=payload["gate_combine"],
            parallelism=payload["parallelism"],
            kate_plus_samples=payload["kate_plus_samples"],
            embed_dim=payload["embed_dim"],
            prompt=PromptSetConfig(
                demos_per_prompt=p["demos_per_prompt"],
                max_prompts=p["max_prompts"],
                ordering=Ordering(p["ordering"]),
                selection=Selection(p["selection"]),
                seed=p["seed"],
                max_sequence_length=p["max_sequence_length"],
                generation_reserve=p["generation_reserve"],
            ),
            decode=DecodeParams(
                mode=DecodeMode(d["mode"]),
                max_tokens=d["max_tokens"],
                top_k=d["top_k"],
                top_p=d["top_p"],
                temperature=d["temperature"],
                stop_sequences=tuple(d["stop_sequences"]),
                logprob_depth=d["logprob_depth"],
                seed=d["seed"],
            ),
            filters=FilterConfig(
                max_antecedent_tokens=f["max_antecedent_tokens"],
                per_prompt_threshold=f["per_prompt_threshold"],
                combined_threshold=f["combined_threshold"],
                merge_substrings=f["merge_substrings"],
            ),
        )


@dataclass(frozen=True)
class ResolutionResult:
    """One test input's full trace through the pipeline."""

    key: str
    gold: Optional[tuple[str, ...]]
    prompt_ids: tuple[int, ...]
    gating: Optional[GatingDistribution]
    generations: tuple[Generation, ...]
    candidates: tuple[CandidateAntecedent, ...]
    final: tuple[CandidateAntecedent, ...]
    request_count: int
    error: Optional[str] = None

    @property
    def predicted_surfaces(self) -> list[str]:
        return [c.surface for c in self.final]


@dataclass(frozen=True)
class SplitResult:
    """Outcome of resolving one split: traces, predictions, optional scores."""

    results: tuple[ResolutionResult, ...]
    report: Optional[ScoreReport]
    request_count: int

    @property
    def predictions(self) -> dict[str, list[str]]:
        return {r.key: r.predicted_surfaces for r in self.results}


class Resolver:
    """Binds a k-shot sample, a backend, and a configuration.

    Demonstration embeddings are computed once at construction; each test
    input then costs one embedding call plus the prompt completions.
    """

    def __init__(
        self,
        config: RunConfig,
        sample: KShotSample,
        backend: Backend,
        embedder: Optional[Embedder] = None,
        template: Optional[Template] = None,
        tokenizer: Optional[Tokenizer] = None,
    ):
        config.validate()
        self.config = config
        self.sample = sample
        self.backend = backend
        self.template = template or Template()
        self.tokenizer = tokenizer or WordTokenizer()
        self.embedder = embedder or HashingEmbedder(config.embed_dim)
        self.template.validate_against(sample)
        # Demos embed in their rendered answer-free form so they look like
        # the test input they are compared against.
        self._demo_vectors = self.embedder.embed(
            [self.template.render_example(ex, include_answer=False) for ex in sample]
        )

    def _similarities(self, test: Example) -> list[float]:
        test_vector = self.embedder.embed(
            [self.template.render_example(test, include_answer=False)]
        )[0]
        return [float(s) for s in similarities(test_vector, self._demo_vectors)]

    def _effective_prompt_config(self) -> PromptSetConfig:
        if self.config.combiner is Combiner.PRODUCT:
            # The product rule multiplies one-demonstration experts, one
            # per sampled demo.
            return replace(
                self.config.prompt, demos_per_prompt=1, max_prompts=self.sample.k
            )
        return self.config.prompt

    def resolve_one(self, test: Example) -> ResolutionResult:
        """Run the configured combiner on one test input."""
        combiner = self.config.combiner
        sims = self._similarities(test)
        if combiner in (Combiner.KATE, Combiner.KATE_PLUS):
            return self._resolve_kate(test, sims)
        prompts = enumerate_prompts(
            self.sample, test, self._effective_prompt_config(), sims,
            self.template, self.tokenizer,
        )
        generations = complete_many(
            self.backend,
            [p.text for p in prompts],
            self.config.decode,
            self.config.parallelism,
        )
        predictions = [
            extract_prediction(gen, self.template, self.tokenizer, prompt_id=p.prompt_id)
            for p, gen in zip(prompts, generations)
        ]
        gating: Optional[GatingDistribution] = None
        if combiner is Combiner.MICE:
            gating = gate(prompts, sims, self.config.gate_combine)
            candidates = combine_mice(predictions, gating, self.tokenizer)
        elif combiner is Combiner.MICE_S:
            gating = gate(prompts, sims, self.config.gate_combine)
            candidates = combine_mice_sample(predictions, gating, self.tokenizer)
        else:
            candidates = combine_product(predictions, self.tokenizer)
        final = filter_and_merge(candidates, self.config.filters, self.tokenizer)
        return ResolutionResult(
            key=test.key,
            gold=tuple(test.gold_surfaces()) if test.is_labeled else None,
            prompt_ids=tuple(p.prompt_id for p in prompts),
            gating=gating,
            generations=tuple(generations),
            candidates=tuple(candidates),
            final=tuple(final),
            request_count=len(generations),
        )

    def _resolve_kate(self, test: Example, sims: list[float]) -> ResolutionResult:
        prompt = select_kate_prompt(
            self.sample, test, self.config.prompt, sims, self.template, self.tokenizer
        )
        if self.config.combiner is Combiner.KATE:
            generation = self.backend.complete(prompt.text, self.config.decode)
            prediction = extract_prediction(
                generation, self.template, self.tokenizer, prompt_id=prompt.prompt_id
            )
            gating = GatingDistribution.single(prompt.prompt_id)
            candidates = combine_single(prediction, self.tokenizer)
            generations: tuple[Generation, ...] = (generation,)
            prompt_ids: tuple[int, ...] = (prompt.prompt_id,)
        else:
            n = self.config.kate_plus_samples
            candidates_list, gen_list = combine_kate_plus(
                prompt,
                self.backend,
                self.config.decode,
                n,
                self.template,
                self.tokenizer,
                self.config.parallelism,
            )
            candidates = candidates_list
            gating = GatingDistribution.uniform(list(range(n)))
            generations = tuple(gen_list)
            prompt_ids = tuple(range(n))
        final = filter_and_merge(candidates, self.config.filters, self.tokenizer)
        return ResolutionResult(
            key=test.key,
            gold=tuple(test.gold_surfaces()) if test.is_labeled else None,
            prompt_ids=prompt_ids,
            gating=gating,
            generations=generations,
            candidates=tuple(candidates),
            final=tuple(final),
            request_count=len(generations),
        )

    def resolve_split(self, split: Dataset) -> SplitResult:
        """Resolve every example; failures degrade to empty predictions."""
        results: list[ResolutionResult] = []
        for example in split:
            try:
                results.append(self.resolve_one(example))
            except (PromptBudgetError, BackendError) as exc:
                logger.warning("resolution failed for %s: %s", example.key, exc)
                results.append(
                    ResolutionResult(
                        key=example.key,
                        gold=tuple(example.gold_surfaces()) if example.is_labeled else None,
                        prompt_ids=(),
                        gating=None,
                        generations=(),
                        candidates=(),
                        final=(),
                        request_count=0,
                        error=str(exc),
                    )
                )
        return _assemble_split_result(results)

    def predict(self, example: Example) -> list[tuple[str, float]]:
        """Teacher interface for distillation: surfaces with confidences."""
        result = self.resolve_one(example)
        return [(c.surface, c.combined_prob) for c in result.final]


def _assemble_split_result(results: Sequence[ResolutionResult]) -> SplitResult:
    report: Optional[ScoreReport] = None
    if results and all(r.gold is not None for r in results):
        report = micro_f1(
            {r.key: r.predicted_surfaces for r in results},
            {r.key: list(r.gold or ()) for r in results},
        )
    return SplitResult(
        results=tuple(results),
        report=report,
        request_count=sum(r.request_count for r in results),
    )


def _dumps(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _generation_to_dict(gen: Generation) -> dict:
    return {
        "text": gen.text,
        "tokens": list(gen.tokens),
        "top_probs": [dict(d) for d in gen.top_probs],
    }


def _generation_from_dict(payload: dict) -> Generation:
    return Generation(
        text=payload["text"],
        tokens=tuple(payload["tokens"]),
        top_probs=tuple(payload["top_probs"]),
    )


def _candidate_to_dict(c: CandidateAntecedent) -> dict:
    return {
        "surface": c.surface,
        "first_token": c.first_token,
        "combined_prob": c.combined_prob,
        "per_prompt_prob": {str(pid): p for pid, p in sorted(c.per_prompt_prob.items())},
    }


def write_manifest(
    split_result: SplitResult,
    config: RunConfig,
    sample: KShotSample,
    path: str | Path,
    split_name: str = "",
) -> None:
    """Serialize a run to JSONL: header, one entry per test input, summary.

    Output bytes depend only on the inputs, so identical runs produce
    identical files; timing is deliberately not serialized.
    """
    lines = [
        _dumps(
            {
                "record": "header",
                "schema": MANIFEST_SCHEMA,
                "split": split_name,
                "k": sample.k,
                "sample_seed": sample.seed,
                "config": config.to_dict(),
            }
        )
    ]
    for r in split_result.results:
        lines.append(
            _dumps(
                {
                    "record": "entry",
                    "key": r.key,
                    "gold": list(r.gold) if r.gold is not None else None,
                    "prompt_ids": list(r.prompt_ids),
                    "gating": (
                        {str(pid): w for pid, w in sorted(r.gating.weights.items())}
                        if r.gating is not None
                        else None
                    ),
                    "generations": [_generation_to_dict(g) for g in r.generations],
                    "candidates": [_candidate_to_dict(c) for c in r.candidates],
                    "final": [_candidate_to_dict(c) for c in r.final],
                    "request_count": r.request_count,
                    "error": r.error,
                }
            )
        )
    summary: dict = {
        "record": "summary",
        "request_count": split_result.request_count,
    }
    if split_result.report is not None:
        summary["report"] = {
            "precision": split_result.report.precision,
            "recall": split_result.report.recall,
            "f1": split_result.report.f1,
            "true_positives": split_result.report.true_positives,
            "false_positives": split_result.report.false_positives,
            "false_negatives": split_result.report.false_negatives,
        }
    lines.append(_dumps(summary))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def replay_manifest(path: str | Path) -> tuple[SplitResult, RunConfig]:
    """Recompute every final prediction from a manifest, no backend calls.

    Generations, gating weights, and the configuration are read back;
    extraction, combination, and filtering run again from those stored
    values. The returned result carries freshly computed candidates and
    finals plus a recomputed score report.
    """
    header: Optional[dict] = None
    entries: list[dict] = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            payload = json.loads(line)
            kind = payload.get("record")
            if kind == "header":
                header = payload
            elif kind == "entry":
                entries.append(payload)
    if header is None:
        raise ValueError(f"manifest {path} has no header")
    if header.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"unsupported manifest schema: {header.get('schema')!r}")
    config = RunConfig.from_dict(header["config"])
    template = Template()
    tokenizer = WordTokenizer()
    results: list[ResolutionResult] = []
    for entry in entries:
        results.append(_replay_entry(entry, config, template, tokenizer))
    return _assemble_split_result(results), config


def _replay_entry(
    entry: dict, config: RunConfig, template: Template, tokenizer: Tokenizer
) -> ResolutionResult:
    gold = tuple(entry["gold"]) if entry.get("gold") is not None else None
    prompt_ids = tuple(entry.get("prompt_ids", ()))
    generations = tuple(_generation_from_dict(g) for g in entry.get("generations", ()))
    gating_raw = entry.get("gating")
    gating = (
        GatingDistribution(weights={int(pid): w for pid, w in gating_raw.items()})
        if gating_raw
        else None
    )
    if entry.get("error") or not generations:
        return ResolutionResult(
            key=entry["key"],
            gold=gold,
            prompt_ids=prompt_ids,
            gating=gating,
            generations=generations,
            candidates=(),
            final=(),
            request_count=entry.get("request_count", 0),
            error=entry.get("error"),
        )
    predictions = [
        extract_prediction(gen, template, tokenizer, prompt_id=pid)
        for pid, gen in zip(prompt_ids, generations)
    ]
    combiner = config.combiner
    if combiner is Combiner.MICE:
        candidates = combine_mice(predictions, gating, tokenizer)
    elif combiner in (Combiner.MICE_S, Combiner.KATE_PLUS):
        candidates = combine_mice_sample(predictions, gating, tokenizer)
    elif combiner is Combiner.KATE:
        candidates = combine_single(predictions[0], tokenizer)
    else:
        candidates = combine_product(predictions, tokenizer)
    final = filter_and_merge(candidates, config.filters, tokenizer)
    return ResolutionResult(
        key=entry["key"],
        gold=gold,
        prompt_ids=prompt_ids,
        gating=gating,
        generations=generations,
        candidates=tuple(candidates),
        final=tuple(final),
        request_count=entry.get("request_count", len(generations)),
        error=None,
    )
