"""Acceptance suite: twelve behavioral guarantees, one test each.

Every test drives the public API and checks it against an independent
reference computation or a frozen fixture. Randomized checks use fixed
seeds so a failure reproduces exactly; timed checks bound wall-clock
cost on the bundled data.
"""
import json
import time

import numpy as np
import pytest
from conftest import FIXTURES
from support import NoisyOracleBackend

from mice.combine import (
    CandidateAntecedent,
    PromptPrediction,
    combine_kate_plus,
    combine_mice,
    combine_mice_sample,
    extract_prediction,
    first_token_prob,
)
from mice.corpus import Dataset, Example, Span, load_corpus, sample_kshot
from mice.detector import default_rules, evaluate_rules
from mice.distill import (
    MARKER_END,
    MARKER_START,
    build_record,
    export_records,
    load_records,
    load_unlabeled_docs,
)
from mice.gateway import DecodeParams, MockBackend, ScriptedEntry, WordTokenizer
from mice.gating import GatingDistribution, gate
from mice.metrics import micro_f1
from mice.pipeline import (
    Combiner,
    Resolver,
    RunConfig,
    replay_manifest,
    write_manifest,
)
from mice.postfilter import FilterConfig, filter_and_merge
from mice.prompts import (
    Ordering,
    Prompt,
    PromptSetConfig,
    Selection,
    Template,
    enumerate_prompts,
    select_kate_prompt,
)

TOKENIZER = WordTokenizer()
TEMPLATE = Template()


def _prompt(pid: int, demos, text: str = "p", count: int = 1) -> Prompt:
    return Prompt(
        prompt_id=pid,
        universe_index=pid,
        demo_indices=tuple(demos),
        text=text,
        token_count=count,
    )


# 1 ------------------------------------------------------------------------


def test_mixture_rules_match_a_brute_force_reference():
    """Both mixture combiners agree with an independent double-loop
    reference on 200 randomized instances, to 1e-12, in under 5 seconds."""
    rng = np.random.default_rng(20260818)
    word_pool = ["ice water", "ice", "melt water", "cand3", "dry ice", "slush"]
    instances = []
    for case in range(200):
        n_prompts = int(rng.integers(1, 6))
        n_cands = int(rng.integers(1, 7))
        if case % 4 == 0:
            surfaces = word_pool[:n_cands]
        else:
            surfaces = [f"cand{i}" for i in range(n_cands)]
        tokens = sorted({s.split()[0] for s in surfaces})
        predictions = []
        for pid in range(n_prompts):
            emitted = tuple(s for s in surfaces if rng.random() < 0.6)
            slots = []
            for _ in range(int(rng.integers(0, 4))):
                subset = [t for t in tokens if rng.random() < 0.7]
                slots.append({t: float(rng.random()) for t in subset})
            predictions.append(
                PromptPrediction(
                    prompt_id=pid,
                    generated_antecedents=emitted,
                    slot_distributions=tuple(slots),
                )
            )
        raw = rng.random(n_prompts) + 1e-3
        weights = raw / raw.sum()
        gating = GatingDistribution(
            weights={pid: float(weights[pid]) for pid in range(n_prompts)}
        )
        instances.append((predictions, gating, weights))

    def reference(predictions, weights, indicator):
        seen, universe = set(), []
        for pred in predictions:
            for s in pred.generated_antecedents:
                if s not in seen:
                    seen.add(s)
                    universe.append(s)
        out = []
        for surface in universe:
            token = surface.split()[0]
            combined = 0.0
            per = {}
            for pred in predictions:
                if indicator:
                    p = 1.0 if surface in pred.generated_antecedents else 0.0
                else:
                    p = 0.0
                    for dist in pred.slot_distributions:
                        if dist.get(token, 0.0) > p:
                            p = dist[token]
                per[pred.prompt_id] = p
                combined += float(weights[pred.prompt_id]) * p
            if combined > 0.0:
                out.append((surface, combined, per))
        out.sort(key=lambda item: (-item[1], item[0]))
        return out

    start = time.perf_counter()
    for predictions, gating, weights in instances:
        for combiner, indicator in ((combine_mice, False), (combine_mice_sample, True)):
            actual = combiner(predictions, gating, TOKENIZER)
            expected = reference(predictions, weights, indicator)
            assert [c.surface for c in actual] == [s for s, _, _ in expected]
            for cand, (_, combined, per) in zip(actual, expected):
                assert abs(cand.combined_prob - combined) <= 1e-12
                assert set(cand.per_prompt_prob) == set(per)
                for pid, p in per.items():
                    assert abs(cand.per_prompt_prob[pid] - p) <= 1e-12
    assert time.perf_counter() - start < 5.0


# 2 ------------------------------------------------------------------------


def test_gate_weights_normalize_shift_invariantly_and_degenerate_to_one():
    """Across 1000 random cases, in under a second: weights sum to 1
    within 1e-9, adding a constant to every score leaves weights unchanged
    within 1e-9, and a lone prompt receives weight exactly 1.0."""
    rng = np.random.default_rng(7)
    cases = []
    for case in range(1000):
        k = int(rng.integers(1, 9))
        sims = [float(s) for s in rng.uniform(-1.0, 1.0, size=k)]
        n = int(rng.integers(1, 7))
        prompts = [
            _prompt(pid, [int(d) for d in rng.integers(0, k, size=int(rng.integers(1, 4)))])
            for pid in range(n)
        ]
        combine = "sum" if case % 2 == 0 else "product"
        shift = float(rng.uniform(-5.0, 5.0))
        cases.append((k, sims, prompts, combine, shift))

    start = time.perf_counter()
    for k, sims, prompts, combine, shift in cases:
        gating = gate(prompts, sims, combine=combine)
        assert abs(sum(gating.weights.values()) - 1.0) <= 1e-9

        singles = [_prompt(i, (i,)) for i in range(k)]
        base = gate(singles, sims)
        shifted = gate(singles, [s + shift for s in sims])
        for pid in range(k):
            assert abs(base[pid] - shifted[pid]) <= 1e-9

        lone = gate([prompts[0]], sims)
        assert lone[prompts[0].prompt_id] == 1.0
    assert time.perf_counter() - start < 1.0


# 3 ------------------------------------------------------------------------


def test_first_token_probability_takes_slot_maximum_and_defaults_to_zero():
    """Hand-built slot-distribution fixtures reproduce the first-token
    probability exactly: the maximum over answer slots when the token is
    present, 0.0 when it is absent or there are no slots."""
    pred = PromptPrediction(
        prompt_id=0,
        generated_antecedents=("a", "b"),
        slot_distributions=({"a": 0.2, "b": 0.1}, {"a": 0.9}),
    )
    assert first_token_prob("a", pred) == 0.9
    assert first_token_prob("b", pred) == 0.1
    assert first_token_prob("c", pred) == 0.0
    assert first_token_prob("a", PromptPrediction(prompt_id=1)) == 0.0
    hollow = PromptPrediction(prompt_id=2, slot_distributions=({}, {}))
    assert first_token_prob("a", hollow) == 0.0
    single = PromptPrediction(prompt_id=3, slot_distributions=({"x": 0.4},))
    assert first_token_prob("x", single) == 0.4

    # The same rule holds on probabilities that ride through a scripted
    # backend and the answer parser unchanged.
    backend = MockBackend.from_fixture(FIXTURES / "scripted_mock.json")
    prompt = (
        "Mix water and DCM in vessel 900.\n\n"
        "What does the mixture contain?\nAnswer:"
    )
    generation = backend.complete(prompt, DecodeParams.greedy())
    parsed = extract_prediction(generation, TEMPLATE, TOKENIZER)
    assert parsed.generated_antecedents == ("water", "DCM")
    assert not parsed.degraded
    expected = {
        "water": 0.8,
        "brine": 0.15,
        "ice": 0.05,
        "DCM": 0.7,
        "ether": 0.2,
        "hexane": 0.1,
    }
    for token, prob in expected.items():
        assert first_token_prob(token, parsed) == prob
    assert first_token_prob("methanol", parsed) == 0.0


# 4 ------------------------------------------------------------------------


def test_postfilter_merges_contained_surfaces_and_keeps_boundary_scores():
    """The worked merge example folds into the longer surface, both
    probability floors are inclusive, and filtering is idempotent on 500
    randomized candidate lists."""
    candidates = [
        CandidateAntecedent("CH2CL2", "CH2CL2", 0.4, {0: 0.4}),
        CandidateAntecedent("CH2CL2 (40 mL)", "CH2CL2", 0.3, {1: 0.3}),
        CandidateAntecedent("water", "water", 0.2, {0: 0.2, 1: 0.2}),
    ]
    out = filter_and_merge(candidates, FilterConfig(), TOKENIZER)
    assert "CH2CL2" not in [c.surface for c in out]
    merged = next(c for c in out if c.surface == "CH2CL2 (40 mL)")
    assert merged.combined_prob == 0.4
    assert merged.per_prompt_prob == {0: 0.4, 1: 0.3}

    cfg = FilterConfig()
    assert cfg.per_prompt_threshold == 0.02
    assert cfg.combined_threshold == 0.1
    at_floor = CandidateAntecedent("a", "a", 0.5, {0: 0.02})
    below_floor = CandidateAntecedent("b", "b", 0.5, {0: 0.019})
    kept = filter_and_merge([at_floor, below_floor], cfg, TOKENIZER)
    assert [c.surface for c in kept] == ["a"]
    at_combined = CandidateAntecedent("c", "c", 0.1, {0: 1.0})
    below_combined = CandidateAntecedent("d", "d", 0.09, {0: 1.0})
    kept = filter_and_merge([at_combined, below_combined], cfg, TOKENIZER)
    assert [c.surface for c in kept] == ["c"]

    pool = [
        "water",
        "water bath",
        "ice water bath",
        "sodium",
        "sodium chloride",
        "CH2CL2",
        "CH2CL2 (40 mL)",
        "acid",
        "formic acid",
        "the formic acid layer",
        "DCM",
        "brine",
    ]
    configs = [
        FilterConfig(),
        FilterConfig.permissive(),
        FilterConfig(merge_substrings=False),
    ]
    rng = np.random.default_rng(41)
    for i in range(500):
        chosen = rng.choice(len(pool), size=int(rng.integers(1, 9)), replace=False)
        batch = []
        for j in chosen:
            surface = pool[int(j)]
            pids = rng.choice(8, size=int(rng.integers(1, 4)), replace=False)
            per = {int(p): float(rng.random()) for p in pids}
            batch.append(
                CandidateAntecedent(
                    surface, surface.split()[0], float(rng.random()), per
                )
            )
        config = configs[i % len(configs)]
        once = filter_and_merge(batch, config, TOKENIZER)
        assert filter_and_merge(once, config, TOKENIZER) == once


# 5 and 6 share one set of runs --------------------------------------------

_BEHAVIORAL: dict = {}


def _behavioral_results() -> dict:
    """Resolve the bundled synthetic split for every seed and expert count."""
    if _BEHAVIORAL:
        return _BEHAVIORAL
    train = load_corpus(FIXTURES / "synthetic_train.jsonl")
    test = load_corpus(FIXTURES / "synthetic_test.jsonl")
    decoys = json.loads((FIXTURES / "synthetic_decoys.json").read_text())
    backend = NoisyOracleBackend(train, test, decoys)
    seeds = (1, 2, 3, 4, 5)
    kate: dict[int, float] = {}
    mixture: dict[int, dict[int, float]] = {4: {}, 16: {}, 64: {}}
    start = time.perf_counter()
    for seed in seeds:
        samples = {n: sample_kshot(train, n, seed=seed) for n in (4, 16, 64)}
        result = Resolver(
            RunConfig(combiner=Combiner.KATE), samples[64], backend
        ).resolve_split(test)
        kate[seed] = result.report.f1
        for n, sample in samples.items():
            config = RunConfig(
                combiner=Combiner.MICE_S,
                prompt=PromptSetConfig(demos_per_prompt=1, max_prompts=n),
            )
            result = Resolver(config, sample, backend).resolve_split(test)
            mixture[n][seed] = result.report.f1
    _BEHAVIORAL.update(
        seeds=seeds,
        kate=kate,
        mixture=mixture,
        elapsed=time.perf_counter() - start,
    )
    return _BEHAVIORAL


def test_expert_mixture_beats_the_single_nearest_neighbor_prompt():
    """With the similarity-correlated scripted backend, the 64-expert
    sampled mixture beats the one-prompt nearest-neighbor baseline by at
    least 10 micro-F1 points averaged over seeds 1-5, inside two minutes,
    and every per-seed score matches the frozen reference run."""
    data = _behavioral_results()
    expected = json.loads((FIXTURES / "expectations.json").read_text())
    for seed in data["seeds"]:
        assert data["kate"][seed] == pytest.approx(
            expected["kate"][str(seed)], abs=1e-9
        )
        assert data["mixture"][64][seed] == pytest.approx(
            expected["mice-s"][str(seed)], abs=1e-9
        )
    kate_mean = float(np.mean(list(data["kate"].values())))
    mixture_mean = float(np.mean(list(data["mixture"][64].values())))
    assert (mixture_mean - kate_mean) * 100.0 >= 10.0
    assert data["elapsed"] < 120.0


def test_accuracy_does_not_drop_as_the_expert_pool_grows():
    """Mean micro-F1 at 64 experts is at least the mean at 4, and the
    trend across 4, 16, and 64 experts never dips by more than one
    standard deviation; per-seed scores match the frozen reference run."""
    data = _behavioral_results()
    expected = json.loads((FIXTURES / "expectations.json").read_text())
    for n in (4, 16, 64):
        for seed in data["seeds"]:
            assert data["mixture"][n][seed] == pytest.approx(
                expected["mice-s-experts"][str(n)][str(seed)], abs=1e-9
            )
    means = {n: float(np.mean(list(data["mixture"][n].values()))) for n in (4, 16, 64)}
    stds = {n: float(np.std(list(data["mixture"][n].values()))) for n in (4, 16, 64)}
    assert means[64] >= means[4]
    assert means[16] >= means[4] - stds[4]
    assert means[64] >= means[16] - stds[16]


# 7 ------------------------------------------------------------------------


def test_prompt_construction_never_exceeds_the_input_token_budget():
    """10,000 randomized prompt constructions across shapes, orderings,
    selections, and sequence limits produce zero prompts whose recounted
    length exceeds max_sequence_length minus generation_reserve."""
    train = load_corpus(FIXTURES / "synthetic_train.jsonl")
    test_docs = load_corpus(FIXTURES / "synthetic_test.jsonl")
    rng = np.random.default_rng(11)
    depth_limit = {4: 3, 8: 4, 16: 4, 32: 3, 64: 2}
    orderings = list(Ordering)
    built = 0
    violations = 0
    while built < 10_000:
        k = int(rng.choice([4, 8, 8, 16, 16, 32, 64]))
        sample = sample_kshot(train, k, seed=int(rng.integers(0, 1000)))
        test = test_docs.examples[int(rng.integers(0, len(test_docs.examples)))]
        sims = [float(s) for s in rng.uniform(0.0, 1.0, size=k)]
        if rng.random() < 0.5:
            max_len = 2048
        else:
            max_len = int(rng.integers(400, 701))
        config = PromptSetConfig(
            demos_per_prompt=int(rng.integers(1, depth_limit[k] + 1)),
            max_prompts=int(rng.integers(8, 33)),
            ordering=orderings[int(rng.integers(0, len(orderings)))],
            selection=(
                Selection.TOP_GATED if rng.random() < 0.5 else Selection.SEEDED_RANDOM
            ),
            seed=int(rng.integers(0, 10_000)),
            max_sequence_length=max_len,
            generation_reserve=256,
        )
        prompts = enumerate_prompts(sample, test, config, sims, TEMPLATE, TOKENIZER)
        prompts.append(
            select_kate_prompt(sample, test, config, sims, TEMPLATE, TOKENIZER)
        )
        for prompt in prompts:
            recount = TOKENIZER.count(prompt.text)
            assert prompt.token_count == recount
            if recount > config.input_budget:
                violations += 1
        built += len(prompts)
    assert violations == 0


# 8 ------------------------------------------------------------------------


def test_micro_f1_matches_independent_recomputation():
    """Pooled precision/recall/F1 equal a from-scratch recomputation on
    1,000 random prediction/gold corpora, including the zero-division
    conventions (empty denominators score 0.0, not NaN)."""
    vocabulary = ["water", "brine", "dcm", "ice", "salt", "acid"]
    rng = np.random.default_rng(13)
    for _ in range(1000):
        predictions: dict[str, list[str]] = {}
        gold: dict[str, list[str]] = {}
        for i in range(int(rng.integers(0, 9))):
            key = f"e{i}"
            predictions[key] = [
                vocabulary[int(j)]
                for j in rng.choice(6, size=int(rng.integers(0, 4)), replace=False)
            ]
            gold[key] = [
                vocabulary[int(j)]
                for j in rng.choice(6, size=int(rng.integers(0, 4)), replace=False)
            ]
        report = micro_f1(predictions, gold)

        tp = fp = fn = 0
        for key in predictions:
            predicted = set(predictions[key])
            wanted = set(gold[key])
            tp += len(predicted & wanted)
            fp += len(predicted - wanted)
            fn += len(wanted - predicted)
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        f1 = (
            2 * precision * recall / (precision + recall)
            if (precision + recall)
            else 0.0
        )
        assert (
            report.true_positives,
            report.false_positives,
            report.false_negatives,
        ) == (tp, fp, fn)
        assert report.precision == precision
        assert report.recall == recall
        assert report.f1 == f1

    empty = micro_f1({}, {})
    assert (empty.precision, empty.recall, empty.f1) == (0.0, 0.0, 0.0)
    no_hits = micro_f1({"k": []}, {"k": ["water"]})
    assert (no_hits.precision, no_hits.recall, no_hits.f1) == (0.0, 0.0, 0.0)
    no_gold = micro_f1({"k": ["water"]}, {"k": []})
    assert (no_gold.precision, no_gold.recall, no_gold.f1) == (0.0, 0.0, 0.0)
    blank = micro_f1({"k": []}, {"k": []})
    assert (blank.true_positives, blank.false_positives, blank.false_negatives) == (
        0,
        0,
        0,
    )


# 9 ------------------------------------------------------------------------


def test_equal_seeds_yield_identical_manifests_and_replay_stays_offline(
    tmp_path, monkeypatch
):
    """Two runs with the same seed write byte-identical manifests, and
    replaying a manifest reproduces the scores without a single backend
    call."""
    train = load_corpus(FIXTURES / "synthetic_train.jsonl")
    test = load_corpus(FIXTURES / "synthetic_test.jsonl")
    subset = Dataset(test.examples[:16], "slice")
    decoys = json.loads((FIXTURES / "synthetic_decoys.json").read_text())
    config = RunConfig(
        combiner=Combiner.MICE_S,
        prompt=PromptSetConfig(demos_per_prompt=1, max_prompts=16),
    )
    paths = []
    originals = []
    for tag in ("a", "b"):
        backend = NoisyOracleBackend(train, test, decoys)
        sample = sample_kshot(train, 16, seed=9)
        result = Resolver(config, sample, backend).resolve_split(subset)
        path = tmp_path / f"run_{tag}.jsonl"
        write_manifest(result, config, sample, path, split_name="slice")
        paths.append(path)
        originals.append(result)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert originals[0].report.f1 == originals[1].report.f1

    def explode(*args, **kwargs):
        raise AssertionError("a backend was invoked during replay")

    monkeypatch.setattr(NoisyOracleBackend, "complete", explode)
    monkeypatch.setattr(MockBackend, "complete", explode)
    monkeypatch.setattr("mice.gateway.HTTPBackend.complete", explode)
    monkeypatch.setattr("mice.gateway.complete_many", explode)
    monkeypatch.setattr("mice.pipeline.complete_many", explode)
    replayed, replayed_config = replay_manifest(paths[0])
    assert replayed_config == config
    assert replayed.report == originals[0].report
    assert replayed.predictions == originals[0].predictions


# 10 -----------------------------------------------------------------------


def test_sampled_answer_frequencies_match_the_truncated_distribution():
    """10,000 seeded draws from a scripted three-token distribution land
    within total-variation distance 0.02 of the top-p/top-k truncated and
    renormalized distribution they are supposed to follow."""
    distribution = {"water": 0.70, "brine": 0.26, "ice": 0.04}
    backend = MockBackend(
        [ScriptedEntry(answer="water", slot_distributions=(distribution,))]
    )
    prompt = _prompt(0, (0,), text="What does the mixture contain?\nAnswer:", count=7)
    params = DecodeParams.nucleus(seed=0)
    assert (params.top_p, params.top_k) == (0.95, 50)
    candidates, generations = combine_kate_plus(
        prompt, backend, params, 10_000, TEMPLATE, TOKENIZER, parallelism=1
    )
    assert len(generations) == 10_000

    # Independent truncation: probabilities sorted descending, cut at the
    # smallest prefix reaching 0.95 (well under the 50-token cap), then
    # renormalized. "ice" falls outside the kept prefix.
    kept_mass = distribution["water"] + distribution["brine"]
    expected = {
        "water": distribution["water"] / kept_mass,
        "brine": distribution["brine"] / kept_mass,
    }
    frequencies = {c.surface: c.combined_prob for c in candidates}
    assert set(frequencies) <= set(expected)
    assert sum(frequencies.values()) == pytest.approx(1.0, abs=1e-9)
    total_variation = 0.5 * sum(
        abs(frequencies.get(token, 0.0) - expected[token]) for token in expected
    )
    assert total_variation <= 0.02


# 11 -----------------------------------------------------------------------


def test_pseudo_label_exports_are_tag_valid_and_byte_stable(tmp_path):
    """Bundled pseudo-label records carry valid B/I/O runs and correctly
    placed markers, rebuild exactly from the raw documents plus the frozen
    teacher outputs, and round-trip byte-identically through both export
    formats."""
    golden_jsonl = FIXTURES / "golden_records.jsonl"
    golden_conll = FIXTURES / "golden_records.conll"
    records = load_records(golden_jsonl)
    assert len(records) == 3
    for record in records:
        previous = "O"
        for tag in record.tags:
            assert tag in ("O", "B", "I")
            if tag == "I":
                assert previous in ("B", "I")
            previous = tag
        assert record.tokens.count(MARKER_START) == 1
        assert record.tokens.count(MARKER_END) == 1
        start = record.tokens.index(MARKER_START)
        end = record.tokens.index(MARKER_END)
        assert start < end
        assert end - start > 1  # the markers enclose the anaphor's tokens
        enclosed = record.tokens[start + 1 : end]
        assert list(enclosed) == TOKENIZER.tokenize(record.anaphor.surface)
        assert all(tag == "O" for tag in record.tags[start : end + 1])
        assert len(record.confidences) == sum(1 for t in record.tags if t == "B")

    documents = dict(load_unlabeled_docs(FIXTURES / "unlabeled_docs.jsonl"))
    teacher_outputs = [
        (
            "prot-001",
            "the mixture",
            [("bromoacetyl bromide", 0.9), ("compound 54", 0.8), ("water", 0.7)],
        ),
        ("prot-002", "The resulting solution", [("citric acid", 0.95), ("water", 0.6)]),
        ("prot-003", "the suspension", [("toluene", 0.85), ("hexane", 0.75)]),
    ]
    rebuilt = []
    for doc_id, anaphor_surface, outputs in teacher_outputs:
        text = documents[doc_id]
        offset = text.index(anaphor_surface)
        example = Example(
            doc_id=doc_id,
            text=text,
            anaphor=Span(offset, offset + len(anaphor_surface), anaphor_surface),
        )
        rebuilt.append(build_record(example, outputs, TOKENIZER))
    assert rebuilt == records

    out_jsonl = tmp_path / "records.jsonl"
    export_records(records, out_jsonl, "jsonl")
    assert out_jsonl.read_bytes() == golden_jsonl.read_bytes()
    assert load_records(out_jsonl) == records
    out_conll = tmp_path / "records.conll"
    export_records(records, out_conll, "conll")
    assert out_conll.read_bytes() == golden_conll.read_bytes()


# 12 -----------------------------------------------------------------------


def test_rule_detector_clears_the_f1_bar_on_the_labeled_snippets():
    """The shipped detection rules score at least 0.95 micro-F1 on the
    bundled 50-snippet labeled corpus."""
    dataset = load_corpus(FIXTURES / "detector_eval.jsonl")
    assert len(dataset.examples) == 50
    report = evaluate_rules(dataset, default_rules())
    assert (
        report.true_positives,
        report.false_positives,
        report.false_negatives,
    ) == (48, 1, 2)
    assert report.f1 >= 0.95
