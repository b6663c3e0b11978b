#!/usr/bin/env python3
"""Generate the committed test fixtures.

Outputs (under tests/fixtures/):
  synthetic_train.jsonl / synthetic_test.jsonl  labeled corpora
  synthetic_decoys.json                          per-example decoy pools
  expectations.json                              per-seed F1 values computed
                                                 by the brute-force oracle below
  detector_eval.jsonl                            hand-labeled detection corpus
  oracle_echo.json / oracle_corpus.jsonl         loopback mock fixture
  scripted_mock.json                             slot-distribution mock fixture
  unlabeled_docs.jsonl                           distillation inputs
  golden_prompt.txt                              rendered two-demo prompt
  golden_request.json / golden_response.json     wire-protocol goldens
  golden_records.jsonl / golden_records.conll    distillation export goldens
  cli_test.jsonl                                 three-example test slice

The expectation oracle reimplements sampling, prompt enumeration, gating,
indicator combination, filtering, and micro-F1 with plain loops so the
pipeline can be checked against an independent derivation. Rendering and
the hashing embedder are shared substrate (asserted identical here).
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "tests"))

from mice.corpus import Dataset, Example, Span, load_corpus, save_corpus  # noqa: E402
from mice.detector import default_rules, evaluate_rules  # noqa: E402
from mice.distill import build_record, export_records  # noqa: E402
from mice.gateway import DecodeParams, WordTokenizer, build_request  # noqa: E402
from mice.prompts import Template  # noqa: E402
from support import (  # noqa: E402
    NOISE_SEED,
    correctness_probability,
    hash_uniform,
)

FIXTURES = ROOT / "tests" / "fixtures"
TEMPLATE = Template()
TOKENIZER = WordTokenizer()

FAMILIES = {
    "aqueous": {
        "antecedents": ["water", "brine", "sodium chloride", "potassium nitrate", "the aqueous layer"],
        "verbs": "quenched washed separated extracted",
        "setting": "in the aqueous workup bay",
        "opener": "Protocol",
    },
    "organic": {
        "antecedents": ["DCM", "diethyl ether", "ethyl acetate", "hexane", "toluene"],
        "verbs": "dissolved diluted concentrated evaporated",
        "setting": "in the dry solvent hood",
        "opener": "Protocol",
    },
    "acids": {
        "antecedents": ["HCl", "acetic acid", "sulfuric acid", "citric acid", "formic acid"],
        "verbs": "acidified titrated neutralized adjusted",
        "setting": "at the acid dosing station",
        "opener": "Protocol",
    },
    "amines": {
        "antecedents": ["triethylamine", "pyridine", "aniline", "ammonia", "morpholine"],
        "verbs": "basified treated complexed condensed",
        "setting": "on the scrubbed amine line",
        "opener": "Protocol",
    },
}
FAMILY_NAMES = list(FAMILIES)

# Decoy surfaces are noun + fixed-width number, so no surface can contain
# another and pools never collide with gold vocabulary.
DECOY_NOUNS = ["fraction", "aliquot", "portion", "batch", "cut", "draw", "bleed", "purge"]
DECOY_PAIRS_PER_EXAMPLE = 50


def build_synthetic_example(doc_id: str, family: str, index: int, rng) -> Example:
    profile = FAMILIES[family]
    pool = profile["antecedents"]
    a_idx = int(rng.integers(0, len(pool)))
    b_idx = int(rng.integers(0, len(pool) - 1))
    if b_idx >= a_idx:
        b_idx += 1
    a, b = pool[a_idx], pool[b_idx]
    verbs = profile["verbs"].split()
    verb = verbs[int(rng.integers(0, len(verbs)))]
    text = (
        f"{profile['opener']} {doc_id}: charge the jacketed vessel {index} with {a} "
        f"and {b} {profile['setting']}, then {verb} briefly under steady agitation. "
        f"Afterwards the mixture was stirred well, sampled for the record, "
        f"and held at room temperature."
    )
    spans = []
    cursor = 0
    for surface in (a, b):
        start = text.index(surface, cursor)
        spans.append(Span(start, start + len(surface), surface))
        cursor = start + len(surface)
    ana = "the mixture"
    ana_start = text.index(ana, cursor)
    return Example(
        doc_id=doc_id,
        text=text,
        anaphor=Span(ana_start, ana_start + len(ana), ana),
        gold_antecedents=tuple(spans),
    )


def make_corpora() -> tuple[Dataset, Dataset]:
    rng = np.random.Generator(np.random.PCG64(7))
    train = []
    for fam_i, family in enumerate(FAMILY_NAMES):
        for j in range(16):
            train.append(
                build_synthetic_example(
                    f"train-{family}-{j:02d}", family, fam_i * 16 + j, rng
                )
            )
    test = []
    for i in range(64):
        family = FAMILY_NAMES[i % 4]
        test.append(build_synthetic_example(f"test-{family}-{i:02d}", family, 200 + i, rng))
    return (
        Dataset(tuple(train), "synthetic_train"),
        Dataset(tuple(test), "synthetic_test"),
    )


def make_decoys(test: Dataset) -> dict[str, list[list[str]]]:
    """Per-example pools of decoy surface pairs, all surfaces distinct.

    Unique surfaces per pool entry keep corruption mass from accumulating
    on any one surface, and the fixed-width numbering rules out substring
    relations with each other and with the gold vocabulary.
    """
    rng = np.random.Generator(np.random.PCG64(11))
    combos = [f"{noun} {n:02d}" for noun in DECOY_NOUNS for n in range(100)]
    need = 2 * DECOY_PAIRS_PER_EXAMPLE
    decoys: dict[str, list[list[str]]] = {}
    for ex in test:
        gold = set(ex.gold_surfaces())
        idx = list(range(len(combos)))
        for i in range(need):
            j = int(rng.integers(i, len(idx)))
            idx[i], idx[j] = idx[j], idx[i]
        chosen = [combos[i] for i in idx[:need]]
        for s in chosen:
            assert not any(s in g or g in s for g in gold)
        decoys[ex.key] = [
            [chosen[2 * i], chosen[2 * i + 1]] for i in range(DECOY_PAIRS_PER_EXAMPLE)
        ]
    return decoys


# ---------------------------------------------------------------------------
# Independent brute-force oracle: plain-loop reimplementation of the
# ensemble math, used to freeze expected F1 values.
# ---------------------------------------------------------------------------

_WORD = re.compile(r"[a-z0-9]+")


def oracle_embed(texts: list[str], dim: int = 1024) -> np.ndarray:
    out = np.zeros((len(texts), dim), dtype=np.float64)
    for row, text in enumerate(texts):
        tokens = _WORD.findall(text.lower())
        if not tokens:
            out[row, 0] = 1.0
            continue
        for tok in tokens:
            digest = hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest()
            out[row, 1 + int.from_bytes(digest, "big") % (dim - 1)] += 1.0
        out[row] /= np.linalg.norm(out[row])
    return out


def oracle_cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def oracle_render(ex: Example, with_answer: bool) -> str:
    q = f"Question: What does {ex.anaphor.surface} contain?"
    base = f"{ex.text}\n{q}\nAnswer:"
    if with_answer:
        base += " " + " | ".join(ex.gold_surfaces())
    return base


def oracle_sample_indices(n: int, k: int, seed: int) -> list[int]:
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = list(range(n))
    for i in range(k):
        j = int(rng.integers(i, n))
        idx[i], idx[j] = idx[j], idx[i]
    return idx[:k]


def oracle_resolve(
    train: Dataset,
    test: Dataset,
    decoys: dict,
    k: int,
    seed: int,
    variant: str,
) -> float:
    """Brute-force KATE or indicator-mixture resolution; returns micro-F1.

    KATE builds one two-demonstration nearest-neighbor prompt. The mixture
    variant builds k single-demonstration prompts (one expert per sampled
    demo), gates them by softmax over similarity, sums indicator weights
    per surface, and keeps surfaces at or above the 0.1 threshold.
    """
    sample = [train.examples[i] for i in oracle_sample_indices(len(train), k, seed)]
    demo_vecs = oracle_embed([oracle_render(d, False) for d in sample])
    tp = fp = fn = 0
    for ex in test:
        test_vec = oracle_embed([oracle_render(ex, False)])[0]
        sims = [oracle_cosine(test_vec, demo_vecs[i]) for i in range(k)]

        def render_prompt(indices: tuple[int, ...]) -> str:
            ordered = sorted(range(len(indices)), key=lambda p: (sims[indices[p]], p))
            parts = [oracle_render(sample[indices[p]], True) for p in ordered]
            parts.append(oracle_render(ex, False))
            return "\n\n".join(parts)

        def answer(prompt: str, demo_indices: tuple[int, ...]) -> list[str]:
            mean_sim = sum(sims[i] for i in demo_indices) / len(demo_indices)
            p = correctness_probability(mean_sim)
            if hash_uniform(NOISE_SEED, prompt) <= p:
                return ex.gold_surfaces()
            pool = decoys[ex.key]
            return list(pool[int(hash_uniform(NOISE_SEED + 1, prompt) * len(pool))])

        if variant == "kate":
            ranked = sorted(range(k), key=lambda i: (-sims[i], i))
            pair = tuple(sorted(ranked[:2]))
            predicted = set(answer(render_prompt(pair), pair))
        else:
            singles = [(i,) for i in range(k)]
            prompts = [render_prompt(s) for s in singles]
            scores = np.array([sims[i] for i in range(k)], dtype=np.float64)
            shifted = scores - scores.max()
            weights = np.exp(shifted)
            weights /= weights.sum()
            emissions = [answer(prompts[z], singles[z]) for z in range(k)]
            universe: list[str] = []
            for surfaces in emissions:
                for s in surfaces:
                    if s not in universe:
                        universe.append(s)
            predicted = set()
            for surface in universe:
                combined = 0.0
                for z in range(k):
                    combined += float(weights[z]) * (
                        1.0 if surface in emissions[z] else 0.0
                    )
                if combined > 0.0 and combined >= 0.1:
                    predicted.add(surface)
        gold = set(ex.gold_surfaces())
        tp += len(predicted & gold)
        fp += len(predicted - gold)
        fn += len(gold - predicted)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def make_expectations(train: Dataset, test: Dataset, decoys: dict) -> dict:
    seeds = [1, 2, 3, 4, 5]
    table: dict[str, dict[str, float]] = {"kate": {}, "mice-s": {}}
    for seed in seeds:
        table["kate"][str(seed)] = oracle_resolve(train, test, decoys, 64, seed, "kate")
    for experts in ("4", "16", "64"):
        table.setdefault("mice-s-experts", {})
        per_seed = {
            str(seed): oracle_resolve(train, test, decoys, int(experts), seed, "mice-s")
            for seed in seeds
        }
        table["mice-s-experts"][experts] = per_seed
    table["mice-s"] = table["mice-s-experts"]["64"]
    kate_mean = float(np.mean([table["kate"][str(s)] for s in seeds]))
    mice_mean = float(np.mean([table["mice-s"][str(s)] for s in seeds]))
    table["summary"] = {
        "kate_mean": kate_mean,
        "mice_s_64_mean": mice_mean,
        "gap_f1_points": (mice_mean - kate_mean) * 100.0,
    }
    return table


# ---------------------------------------------------------------------------
# Detection fixture
# ---------------------------------------------------------------------------


def make_detector_corpus() -> Dataset:
    """50 snippets; most gold anaphors match the rules, a few do not."""
    bases = [
        ("the mixture", "Add {a} and {b} to the flask. Then {g} was stirred."),
        ("the resulting solution", "Dissolve {a} in {b}. {G} was cooled to 0 C."),
        ("the residue", "Evaporate {a} and {b}. {G} was dried overnight."),
        ("the suspension", "Combine {a} with {b} quickly. {G} was filtered."),
        ("the filtrate", "Filter off {a} from {b}. {G} was concentrated."),
        ("the precipitate", "Treat {a} with {b} dropwise. {G} was collected."),
        ("the organic layer", "Partition {a} against {b}. {G} was washed."),
        ("the slurry", "Grind {a} into {b} slowly. {G} was heated."),
        ("the reaction mixture", "Heat {a} with {b} at reflux. {G} was quenched."),
        ("the crude product", "Work up {a} and {b} as usual. {G} was purified."),
    ]
    fillers = [
        ("methanol", "acetone"), ("benzene", "xylene"), ("ethanol", "propanol"),
        ("chloroform", "pentane"), ("glycerol", "butanone"),
    ]
    examples = []
    for i in range(47):
        anaphor, pattern = bases[i % len(bases)]
        a, b = fillers[i % len(fillers)]
        g_mid = anaphor
        g_cap = anaphor[0].upper() + anaphor[1:]
        text = pattern.format(a=a, b=b, g=g_mid, G=g_cap)
        surface = g_cap if "{G}" in pattern else g_mid
        start = text.index(surface)
        examples.append(
            Example(
                doc_id=f"det{i:02d}",
                text=text,
                anaphor=Span(start, start + len(surface), surface),
            )
        )
    # Two misses: gold phrasings the shipped rules do not cover.
    for j, (surface, text) in enumerate(
        [
            ("the obtained solid", "Dry methanol and acetone. Later the obtained solid was weighed."),
            ("the pooled washings", "Rinse benzene then xylene. Next the pooled washings were kept."),
        ]
    ):
        start = text.index(surface)
        examples.append(
            Example(
                doc_id=f"detmiss{j}",
                text=text,
                anaphor=Span(start, start + len(surface), surface),
            )
        )
    # One false alarm: a rule-matching phrase present but not annotated,
    # in a doc whose annotated anaphor is elsewhere.
    text = (
        "Blend ethanol and propanol. Then the mixture was stirred, "
        "and later the contents were discarded without analysis."
    )
    surface = "the mixture"
    start = text.index(surface)
    examples.append(
        Example(
            doc_id="dettrap0",
            text=text,
            anaphor=Span(start, start + len(surface), surface),
        )
    )
    assert len(examples) == 50
    return Dataset(tuple(examples), "detector_eval")


# ---------------------------------------------------------------------------
# Distillation and wire goldens
# ---------------------------------------------------------------------------


def make_distill_fixtures() -> None:
    docs = [
        {
            "doc_id": "prot-001",
            "text": (
                "Charge the reactor with bromoacetyl bromide and compound 54. "
                "Add water slowly at 0 C. Then the mixture was stirred for an hour."
            ),
        },
        {
            "doc_id": "prot-002",
            "text": (
                "Dissolve citric acid in water, then add water again. "
                "The resulting solution was warmed gently."
            ),
        },
        {
            "doc_id": "prot-003",
            "text": (
                "Mix toluene with hexane in the dark. "
                "Afterwards the suspension was filtered and the filtrate was kept."
            ),
        },
    ]
    (FIXTURES / "unlabeled_docs.jsonl").write_text(
        "".join(json.dumps(d, sort_keys=True) + "\n" for d in docs), encoding="utf-8"
    )

    def example_for(doc: dict, anaphor_surface: str) -> Example:
        start = doc["text"].index(anaphor_surface)
        return Example(
            doc_id=doc["doc_id"],
            text=doc["text"],
            anaphor=Span(start, start + len(anaphor_surface), anaphor_surface),
        )

    records = [
        build_record(
            example_for(docs[0], "the mixture"),
            [("bromoacetyl bromide", 0.9), ("compound 54", 0.8), ("water", 0.7)],
            TOKENIZER,
        ),
        build_record(
            example_for(docs[1], "The resulting solution"),
            [("citric acid", 0.95), ("water", 0.6)],
            TOKENIZER,
        ),
        build_record(
            example_for(docs[2], "the suspension"),
            [("toluene", 0.85), ("hexane", 0.75)],
            TOKENIZER,
        ),
    ]
    export_records(records, FIXTURES / "golden_records.jsonl", "jsonl")
    export_records(records, FIXTURES / "golden_records.conll", "conll")


def make_wire_goldens(train: Dataset) -> None:
    demos = [train.examples[0], train.examples[1]]
    test = train.examples[2]
    prompt = TEMPLATE.render_prompt(demos, test)
    (FIXTURES / "golden_prompt.txt").write_text(prompt, encoding="utf-8")

    request = build_request(
        "Question: What does the mixture contain?\nAnswer:",
        DecodeParams.greedy(max_tokens=64, logprob_depth=5),
    )
    (FIXTURES / "golden_request.json").write_text(
        json.dumps(request, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    response = {
        "choices": [
            {
                "text": "water | DCM",
                "logprobs": {
                    "tokens": ["water", "|", "DCM"],
                    "top_logprobs": [
                        {"water": math.log(0.9), "brine": math.log(0.05)},
                        {"|": math.log(0.97)},
                        {"DCM": math.log(0.6), "ether": math.log(0.3)},
                    ],
                },
            }
        ]
    }
    (FIXTURES / "golden_response.json").write_text(
        json.dumps(response, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def make_scripted_mock() -> None:
    fixture = {
        "mode": "scripted",
        "entries": [
            {
                "suffix": "What does the mixture contain?\nAnswer:",
                "contains": ["vessel 900"],
                "answer": "water | DCM",
                "slot_distributions": [
                    {"water": 0.8, "brine": 0.15, "ice": 0.05},
                    {"DCM": 0.7, "ether": 0.2, "hexane": 0.1},
                ],
                "slot_completions": {
                    "water": "water", "brine": "brine", "ice": "ice water",
                    "DCM": "DCM", "ether": "diethyl ether", "hexane": "hexane",
                },
            }
        ],
        "default_answer": "water",
    }
    (FIXTURES / "scripted_mock.json").write_text(
        json.dumps(fixture, indent=2) + "\n", encoding="utf-8"
    )


def assert_containment_free() -> None:
    """No surface may contain another; keeps the merge stage a no-op here."""
    for profile in FAMILIES.values():
        pool = profile["antecedents"]
        for a in pool:
            for b in pool:
                if a != b and a in b:
                    raise AssertionError(f"{a!r} is contained in {b!r}")


def main() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    assert_containment_free()
    train, test = make_corpora()
    save_corpus(train, FIXTURES / "synthetic_train.jsonl")
    save_corpus(test, FIXTURES / "synthetic_test.jsonl")
    save_corpus(
        Dataset(tuple(test.examples[:3]), "cli_test"), FIXTURES / "cli_test.jsonl"
    )

    decoys = make_decoys(test)
    (FIXTURES / "synthetic_decoys.json").write_text(
        json.dumps(decoys, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    # Loopback fixture: answers any known example's prompt with its gold set.
    merged = Dataset(train.examples + test.examples, "oracle")
    save_corpus(merged, FIXTURES / "oracle_corpus.jsonl")
    (FIXTURES / "oracle_echo.json").write_text(
        json.dumps({"mode": "oracle-echo", "answer_key": "oracle_corpus.jsonl"}, indent=2)
        + "\n",
        encoding="utf-8",
    )

    # Consistency guards: shared substrate must agree with the oracle's
    # inline reimplementations before expectations are frozen.
    sample_ex = train.examples[0]
    assert oracle_render(sample_ex, True) == TEMPLATE.render_example(sample_ex, True)
    assert oracle_render(sample_ex, False) == TEMPLATE.render_example(sample_ex, False)
    from mice.gating import HashingEmbedder

    ref = HashingEmbedder(1024).embed([sample_ex.text])
    alt = oracle_embed([sample_ex.text])
    assert np.array_equal(ref, alt)

    # Diagnostic: similarity spread for one sample, to sanity-check the
    # correctness-probability range before freezing expectations.
    diag_sample = [
        train.examples[i] for i in oracle_sample_indices(len(train), 64, 1)
    ]
    diag_vecs = oracle_embed([oracle_render(d, False) for d in diag_sample])
    all_sims = []
    for ex in list(test)[:16]:
        tv = oracle_embed([oracle_render(ex, False)])[0]
        all_sims.extend(oracle_cosine(tv, diag_vecs[i]) for i in range(64))
    arr = np.array(all_sims)
    print(
        f"sim spread (seed 1, k=64): min={arr.min():.3f} mean={arr.mean():.3f} "
        f"max={arr.max():.3f}  p range [{correctness_probability(arr.min()):.3f}, "
        f"{correctness_probability(arr.max()):.3f}]"
    )

    expectations = make_expectations(train, test, decoys)
    (FIXTURES / "expectations.json").write_text(
        json.dumps(expectations, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print("expectations:", json.dumps(expectations["summary"], indent=2))

    detector_corpus = make_detector_corpus()
    save_corpus(detector_corpus, FIXTURES / "detector_eval.jsonl")
    report = evaluate_rules(detector_corpus, default_rules())
    print(
        f"detector fixture: P={report.precision:.4f} R={report.recall:.4f} "
        f"F1={report.f1:.4f} (tp={report.true_positives} fp={report.false_positives} "
        f"fn={report.false_negatives})"
    )

    make_distill_fixtures()
    make_wire_goldens(train)
    make_scripted_mock()
    print("fixtures written to", FIXTURES)


if __name__ == "__main__":
    main()
