"""Language-model access: tokenization, decoding controls, and backends.

Two backends share one interface: a scripted in-process mock for tests and
offline runs, and an HTTP client speaking a completion wire protocol. Both
return ``Generation`` objects carrying the generated text, its tokens, and
per-token top-probability maps so downstream combiners never need to call
the model again.
"""
from __future__ import annotations

import json
import logging
import math
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Words are runs of ASCII alphanumerics/underscore; anything else that is
# not whitespace is a single-character token. Whitespace never tokenizes.
_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+|[^\sA-Za-z0-9_]")


class Tokenizer(Protocol):
    def tokenize(self, text: str) -> list[str]: ...

    def span_tokenize(self, text: str) -> list[tuple[int, int]]: ...

    def count(self, text: str) -> int: ...


class WordTokenizer:
    """Regex tokenizer: words are `[A-Za-z0-9_]+`, other non-space chars split one by one.

    Deterministic and dependency-free; used for every budget and length
    decision in the package so counts are self-consistent.
    """

    def tokenize(self, text: str) -> list[str]:
        return _TOKEN_RE.findall(text)

    def span_tokenize(self, text: str) -> list[tuple[int, int]]:
        return [m.span() for m in _TOKEN_RE.finditer(text)]

    def count(self, text: str) -> int:
        return sum(1 for _ in _TOKEN_RE.finditer(text))


class VocabTokenizer:
    """Greedy longest-match tokenizer over a fixed vocabulary.

    Falls back to the word tokenizer's rule for out-of-vocabulary stretches.
    Provided for callers whose serving stack counts subwords; everything in
    this package works with any object satisfying the Tokenizer protocol.
    """

    def __init__(self, vocabulary: Sequence[str]):
        if not vocabulary:
            raise ValueError("vocabulary must be non-empty")
        self._vocab = sorted(set(vocabulary), key=len, reverse=True)

    def span_tokenize(self, text: str) -> list[tuple[int, int]]:
        spans: list[tuple[int, int]] = []
        i = 0
        n = len(text)
        while i < n:
            if text[i].isspace():
                i += 1
                continue
            matched = False
            for piece in self._vocab:
                if text.startswith(piece, i):
                    spans.append((i, i + len(piece)))
                    i += len(piece)
                    matched = True
                    break
            if not matched:
                m = _TOKEN_RE.match(text, i)
                if m is None:
                    i += 1
                    continue
                spans.append(m.span())
                i = m.end()
        return spans

    def tokenize(self, text: str) -> list[str]:
        return [text[a:b] for a, b in self.span_tokenize(text)]

    def count(self, text: str) -> int:
        return len(self.span_tokenize(text))


def count_tokens(text: str, tokenizer: Optional[Tokenizer] = None) -> int:
    """Token count under the given (default: word) tokenizer; empty text is 0."""
    return (tokenizer or WordTokenizer()).count(text)


class DecodeMode(str, Enum):
    GREEDY = "greedy"
    NUCLEUS = "nucleus"


@dataclass(frozen=True)
class DecodeParams:
    """Decoding controls passed to a backend for one request."""

    mode: DecodeMode = DecodeMode.GREEDY
    max_tokens: int = 256
    top_k: int = 50
    top_p: float = 0.95
    temperature: float = 0.0
    stop_sequences: tuple[str, ...] = ("\n",)
    logprob_depth: int = 20
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be positive")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError("top_p must be in (0, 1]")
        if self.temperature < 0.0:
            raise ValueError("temperature must be non-negative")
        if self.logprob_depth < 0:
            raise ValueError("logprob_depth must be non-negative")
        if self.mode is DecodeMode.NUCLEUS and self.temperature == 0.0:
            object.__setattr__(self, "temperature", 1.0)

    @classmethod
    def greedy(cls, **overrides) -> "DecodeParams":
        return cls(mode=DecodeMode.GREEDY, temperature=0.0, **overrides)

    @classmethod
    def nucleus(cls, seed: Optional[int] = None, **overrides) -> "DecodeParams":
        return cls(mode=DecodeMode.NUCLEUS, temperature=1.0, seed=seed, **overrides)

    def with_seed(self, seed: int) -> "DecodeParams":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class Generation:
    """One completion: text, its tokens, and per-token top-probability maps.

    ``top_probs[i]`` is the model's probability distribution tail (up to
    logprob_depth entries) over what token i could have been. A generation
    with logprobs disabled carries empty maps.
    """

    text: str
    tokens: tuple[str, ...] = ()
    top_probs: tuple[Mapping[str, float], ...] = ()

    def __post_init__(self) -> None:
        if self.top_probs and len(self.top_probs) != len(self.tokens):
            raise ValueError(
                f"{len(self.top_probs)} probability maps for {len(self.tokens)} tokens"
            )
        for dist in self.top_probs:
            for tok, p in dist.items():
                if not (0.0 <= p <= 1.0 + 1e-9):
                    raise ValueError(f"probability of {tok!r} out of range: {p}")


class Backend(Protocol):
    def complete(self, prompt: str, params: DecodeParams) -> Generation: ...


class BackendError(RuntimeError):
    """A backend failed to produce a completion."""

    def __init__(self, message: str, *, attempts: int = 1, status: Optional[int] = None):
        super().__init__(message)
        self.attempts = attempts
        self.status = status


def nucleus_filter(
    distribution: Mapping[str, float], top_k: int, top_p: float
) -> dict[str, float]:
    """Truncate a distribution to its nucleus and renormalize.

    Tokens are ranked by descending probability (ties broken by token text
    for determinism), capped at top_k, then cut at the smallest prefix whose
    cumulative mass reaches top_p. The survivors are renormalized to sum 1.
    """
    if not distribution:
        raise ValueError("cannot filter an empty distribution")
    ranked = sorted(distribution.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    kept: list[tuple[str, float]] = []
    cum = 0.0
    for tok, p in ranked:
        kept.append((tok, p))
        cum += p
        if cum >= top_p:
            break
    total = sum(p for _, p in kept)
    if total <= 0.0:
        raise ValueError("nucleus has zero mass")
    return {tok: p / total for tok, p in kept}


def nucleus_sample(
    distribution: Mapping[str, float],
    top_k: int,
    top_p: float,
    rng: np.random.Generator,
) -> str:
    """Draw one token from the nucleus-filtered distribution."""
    filtered = nucleus_filter(distribution, top_k, top_p)
    tokens = sorted(filtered)
    probs = np.array([filtered[t] for t in tokens], dtype=float)
    probs /= probs.sum()
    idx = int(rng.choice(len(tokens), p=probs))
    return tokens[idx]


def _truncate_generation(
    text: str, params: DecodeParams, tokenizer: Tokenizer
) -> str:
    """Apply stop sequences then the max-token cap, preserving raw text."""
    cut = len(text)
    for stop in params.stop_sequences:
        pos = text.find(stop)
        if pos != -1:
            cut = min(cut, pos)
    text = text[:cut]
    spans = tokenizer.span_tokenize(text)
    if len(spans) > params.max_tokens:
        text = text[: spans[params.max_tokens - 1][1]]
    return text


@dataclass(frozen=True)
class ScriptedEntry:
    """One mock rule: which prompts it matches and what they yield.

    ``slot_distributions`` gives the top-probability map for each answer
    slot in order; ``slot_completions`` optionally maps a sampled first
    token to the full surface emitted for that slot (defaults to the token
    itself).
    """

    answer: str
    suffix: Optional[str] = None
    contains: tuple[str, ...] = ()
    slot_distributions: tuple[Mapping[str, float], ...] = ()
    slot_completions: Mapping[str, str] = field(default_factory=dict)

    def matches(self, prompt: str) -> bool:
        if self.suffix is not None and not prompt.endswith(self.suffix):
            return False
        return all(needle in prompt for needle in self.contains)


class MockBackend:
    """Deterministic in-process backend driven by scripted rules.

    Rules are tried in order; the first match wins. In greedy mode the
    scripted answer is returned verbatim. In nucleus mode the first token
    of each answer slot is re-sampled from that slot's scripted
    distribution (seeded by the request), and the slot's surface is looked
    up from ``slot_completions``.
    """

    def __init__(
        self,
        entries: Sequence[ScriptedEntry],
        tokenizer: Optional[Tokenizer] = None,
        separator: str = "|",
        default_answer: str = "",
    ):
        self._entries = list(entries)
        self._tokenizer = tokenizer or WordTokenizer()
        self._separator = separator
        self._default = default_answer
        self._lock = threading.Lock()
        self.request_count = 0

    @property
    def tokenizer(self) -> Tokenizer:
        return self._tokenizer

    def _find(self, prompt: str) -> Optional[ScriptedEntry]:
        for entry in self._entries:
            if entry.matches(prompt):
                return entry
        return None

    def _build_generation(
        self, answer: str, entry: Optional[ScriptedEntry], params: DecodeParams
    ) -> Generation:
        text = _truncate_generation(answer, params, self._tokenizer)
        spans = self._tokenizer.span_tokenize(text)
        tokens = tuple(text[a:b] for a, b in spans)
        # Each answer slot starts right after the prompt or a separator
        # token; those positions carry the scripted distribution, all other
        # positions are certain.
        dists: list[Mapping[str, float]] = []
        slot_index = 0
        expecting_slot = True
        scripted = entry.slot_distributions if entry is not None else ()
        depth = params.logprob_depth
        for tok in tokens:
            if tok == self._separator:
                expecting_slot = True
                dists.append({tok: 1.0})
                continue
            if expecting_slot and slot_index < len(scripted):
                full = scripted[slot_index]
                ranked = sorted(full.items(), key=lambda kv: (-kv[1], kv[0]))
                dists.append(dict(ranked[:depth] if depth else []))
                slot_index += 1
            else:
                dists.append({tok: 1.0})
            expecting_slot = False
        return Generation(text=text, tokens=tokens, top_probs=tuple(dists))

    def _sampled_answer(
        self, entry: ScriptedEntry, params: DecodeParams
    ) -> str:
        rng = np.random.Generator(np.random.PCG64(params.seed or 0))
        greedy_slots = [s.strip() for s in entry.answer.split(self._separator)]
        pieces: list[str] = []
        for i, slot_text in enumerate(greedy_slots):
            if i < len(entry.slot_distributions):
                tok = nucleus_sample(
                    entry.slot_distributions[i], params.top_k, params.top_p, rng
                )
                pieces.append(entry.slot_completions.get(tok, tok))
            else:
                pieces.append(slot_text)
        return f" {self._separator} ".join(pieces)

    def complete(self, prompt: str, params: DecodeParams) -> Generation:
        with self._lock:
            self.request_count += 1
        entry = self._find(prompt)
        if entry is None:
            return self._build_generation(self._default, None, params)
        if params.mode is DecodeMode.NUCLEUS and entry.slot_distributions:
            answer = self._sampled_answer(entry, params)
        else:
            answer = entry.answer
        return self._build_generation(answer, entry, params)

    @classmethod
    def from_fixture(cls, path: str | Path, **kwargs) -> "MockBackend":
        """Build a mock from a JSON fixture.

        Scripted form:
            {"mode": "scripted",
             "entries": [{"suffix": ..., "contains": [...], "answer": ...,
                          "slot_distributions": [{tok: p, ...}, ...],
                          "slot_completions": {tok: surface, ...}}, ...],
             "default_answer": ...}

        Oracle-echo form:
            {"mode": "oracle-echo", "answer_key": "relative/path.jsonl"}
        answers every prompt built from the keyed corpus with the gold
        antecedents, for loopback tests.
        """
        path = Path(path)
        payload = json.loads(path.read_text(encoding="utf-8"))
        mode = payload.get("mode", "scripted")
        if mode == "oracle-echo":
            from .corpus import load_corpus
            from .prompts import Template

            dataset = load_corpus(path.parent / payload["answer_key"])
            template = Template()
            return cls.oracle_echo(dataset, template, **kwargs)
        if mode != "scripted":
            raise ValueError(f"unknown mock fixture mode: {mode}")
        entries = [
            ScriptedEntry(
                answer=e["answer"],
                suffix=e.get("suffix"),
                contains=tuple(e.get("contains", ())),
                slot_distributions=tuple(e.get("slot_distributions", ())),
                slot_completions=e.get("slot_completions", {}),
            )
            for e in payload.get("entries", ())
        ]
        return cls(entries, default_answer=payload.get("default_answer", ""), **kwargs)

    @classmethod
    def oracle_echo(
        cls, dataset, template, tokenizer: Optional[Tokenizer] = None, **kwargs
    ) -> "MockBackend":
        """A mock that answers each known example's prompt with its gold antecedents."""
        tok = tokenizer or WordTokenizer()
        entries = []
        for ex in dataset:
            if not ex.is_labeled:
                continue
            suffix = template.render_example(ex, include_answer=False)
            answer = template.linearize(ex.gold_surfaces())
            first_tokens = [tok.tokenize(s)[0] for s in ex.gold_surfaces()]
            entries.append(
                ScriptedEntry(
                    answer=answer,
                    suffix=suffix,
                    slot_distributions=tuple({t: 1.0} for t in first_tokens),
                )
            )
        return cls(entries, tokenizer=tok, separator=template.separator, **kwargs)


def build_request(prompt: str, params: DecodeParams) -> dict:
    """Serialize one completion request to the wire schema."""
    return {
        "prompt": prompt,
        "max_tokens": params.max_tokens,
        "temperature": 0.0 if params.mode is DecodeMode.GREEDY else params.temperature,
        "top_p": 1.0 if params.mode is DecodeMode.GREEDY else params.top_p,
        "top_k": 0 if params.mode is DecodeMode.GREEDY else params.top_k,
        "stop": list(params.stop_sequences),
        "logprobs": params.logprob_depth,
        "seed": params.seed,
    }


def parse_response(payload: dict) -> Generation:
    """Decode one completion response from the wire schema."""
    try:
        choice = payload["choices"][0]
        text = choice["text"]
    except (KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"malformed completion response: {exc}") from exc
    tokens: tuple[str, ...] = ()
    top_probs: tuple[Mapping[str, float], ...] = ()
    lp = choice.get("logprobs")
    if lp:
        tokens = tuple(lp.get("tokens", ()))
        raw = lp.get("top_logprobs") or [{} for _ in tokens]
        top_probs = tuple(
            {tok: math.exp(v) for tok, v in (entry or {}).items()} for entry in raw
        )
    return Generation(text=text, tokens=tokens, top_probs=top_probs)


class HTTPBackend:
    """Completion client for an HTTP endpoint speaking the wire schema.

    Retries transport errors and 5xx responses up to three attempts with
    exponential backoff; 4xx responses fail immediately. A bounded
    semaphore caps in-flight requests.
    """

    def __init__(
        self,
        endpoint: str,
        token: Optional[str] = None,
        max_in_flight: int = 8,
        timeout: float = 60.0,
        max_attempts: int = 3,
        backoff: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        import requests

        self._endpoint = endpoint.rstrip("/")
        self._token = token
        self._timeout = timeout
        self._max_attempts = max_attempts
        self._backoff = backoff
        self._sleep = sleep
        self._semaphore = threading.BoundedSemaphore(max_in_flight)
        self._session = requests.Session()

    def complete(self, prompt: str, params: DecodeParams) -> Generation:
        import requests

        body = build_request(prompt, params)
        headers = {"Content-Type": "application/json"}
        if self._token:
            headers["Authorization"] = f"Bearer {self._token}"
        last_error: Optional[str] = None
        last_status: Optional[int] = None
        for attempt in range(1, self._max_attempts + 1):
            try:
                with self._semaphore:
                    resp = self._session.post(
                        self._endpoint, json=body, headers=headers, timeout=self._timeout
                    )
            except requests.RequestException as exc:
                last_error = str(exc)
                logger.warning("completion attempt %d failed: %s", attempt, exc)
            else:
                last_status = resp.status_code
                if resp.status_code == 200:
                    return parse_response(resp.json())
                last_error = f"HTTP {resp.status_code}"
                if 400 <= resp.status_code < 500:
                    raise BackendError(
                        f"completion rejected: {last_error}",
                        attempts=attempt,
                        status=resp.status_code,
                    )
                logger.warning("completion attempt %d got %s", attempt, last_error)
            if attempt < self._max_attempts:
                self._sleep(self._backoff * (2 ** (attempt - 1)))
        raise BackendError(
            f"completion failed after {self._max_attempts} attempts: {last_error}",
            attempts=self._max_attempts,
            status=last_status,
        )


def complete_many(
    backend: Backend,
    prompts: Sequence[str],
    params: DecodeParams,
    parallelism: int = 8,
) -> list[Generation]:
    """Fan a batch of prompts out to the backend, preserving order.

    Results come back indexed by position regardless of completion order,
    so downstream aggregation never depends on thread scheduling.
    """
    if not prompts:
        return []
    if parallelism <= 1 or len(prompts) == 1:
        return [backend.complete(p, params) for p in prompts]
    with ThreadPoolExecutor(max_workers=min(parallelism, len(prompts))) as pool:
        futures = [pool.submit(backend.complete, p, params) for p in prompts]
        return [f.result() for f in futures]
