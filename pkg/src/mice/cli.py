"""Command-line interface binding the modules into user workflows.

Exit codes: 0 success, 1 validation/usage error, 2 backend failure.
Diagnostics go to standard error; machine-readable output goes to standard
output or to files named by flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .combine import canonicalize
from .corpus import CorpusError, load_corpus, sample_kshot, save_corpus
from .detector import default_rules, detect_anaphors, evaluate_rules, load_rules
from .distill import DropLog, export_records, generate_pseudo_labels, load_unlabeled_docs
from .gateway import (
    Backend,
    BackendError,
    DecodeMode,
    DecodeParams,
    HTTPBackend,
    MockBackend,
    WordTokenizer,
)
from .gating import Embedder, HashingEmbedder, RemoteEmbedder
from .metrics import micro_f1
from .pipeline import (
    Combiner,
    Resolver,
    RunConfig,
    replay_manifest,
    write_manifest,
)
from .postfilter import FilterConfig
from .prompts import Ordering, PromptBudgetError, PromptSetConfig, Selection, Template

logger = logging.getLogger(__name__)

ENV_LM_ENDPOINT = "MICE_LM_ENDPOINT"
ENV_LM_TOKEN = "MICE_LM_TOKEN"
ENV_EMBED_ENDPOINT = "MICE_EMBED_ENDPOINT"


class UsageError(ValueError):
    """Bad flags or inconsistent options; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; the contract reserves 2
    # for backend failures, so raise instead and let main() map it to 1.
    def error(self, message: str):  # noqa: A003 - argparse API
        raise UsageError(message)


def _add_prompt_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("prompt construction")
    group.add_argument("--demos-per-prompt", type=int, default=2,
                       help="demonstrations per prompt (default 2)")
    group.add_argument("--max-prompts", type=int, default=256,
                       help="cap on prompts per test input (default 256)")
    group.add_argument("--ordering", choices=[o.value for o in Ordering],
                       default=Ordering.ASCEND.value,
                       help="demonstration order inside a prompt (default ascend)")
    group.add_argument("--selection", choices=[s.value for s in Selection],
                       default=Selection.TOP_GATED.value,
                       help="how prompts are chosen from the tuple universe")
    group.add_argument("--max-seq-len", type=int, default=2048,
                       help="model context length in tokens (default 2048)")
    group.add_argument("--gen-reserve", type=int, default=256,
                       help="tokens reserved for generation (default 256)")
    group.add_argument("--template", metavar="JSON",
                       help="JSON file overriding template fields")


def _add_filter_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("postfilter")
    group.add_argument("--max-ante-tokens", type=int, default=250,
                       help="max antecedent length in tokens (default 250)")
    group.add_argument("--per-prompt-min", type=float, default=0.02,
                       help="min per-prompt probability (default 0.02)")
    group.add_argument("--combined-min", type=float, default=0.1,
                       help="min combined probability (default 0.1)")
    group.add_argument("--no-merge", action="store_true",
                       help="disable substring merging")


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("backend")
    group.add_argument("--lm-mock", metavar="FIXTURE",
                       help="scripted mock backend fixture (JSON)")
    group.add_argument("--lm-endpoint",
                       help=f"completion endpoint (or ${ENV_LM_ENDPOINT})")
    group.add_argument("--embed-endpoint",
                       help=f"embedding endpoint (or ${ENV_EMBED_ENDPOINT})")
    group.add_argument("--embed-dim", type=int, default=1024,
                       help="hashing embedder dimension (default 1024)")
    group.add_argument("--parallelism", type=int, default=8,
                       help="max in-flight completions (default 8)")


def _add_decode_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("decoding")
    group.add_argument("--decode", choices=["greedy", "nucleus"], default="greedy",
                       help="decoding mode (default greedy)")
    group.add_argument("--top-k", type=int, default=50,
                       help="nucleus top-k (default 50)")
    group.add_argument("--top-p", type=float, default=0.95,
                       help="nucleus top-p (default 0.95)")
    group.add_argument("--max-gen-tokens", type=int, default=256,
                       help="max generated tokens (default 256)")
    group.add_argument("--kp-samples", type=int, default=256,
                       help="samples drawn by kate-plus (default 256)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mice",
                     description="Ensemble in-context resolution of "
                                 "split-antecedent anaphora.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_detect = sub.add_parser("detect", help="find anaphors with the rule set")
    p_detect.add_argument("--docs", help="unlabeled docs JSONL to annotate")
    p_detect.add_argument("--corpus", help="labeled corpus JSONL to score against")
    p_detect.add_argument("--rules", help="rule file (default: built-in rules)")
    p_detect.add_argument("--out", help="write detections JSONL here (with --docs)")

    p_sample = sub.add_parser("sample", help="draw a seeded k-shot sample")
    p_sample.add_argument("--train", required=True, help="training corpus JSONL")
    p_sample.add_argument("--k", type=int, required=True)
    p_sample.add_argument("--seed", type=int, required=True)
    p_sample.add_argument("--out", help="write the sample as JSONL")

    p_resolve = sub.add_parser("resolve", help="resolve a test split")
    p_resolve.add_argument("--corpus", required=True, help="test corpus JSONL")
    p_resolve.add_argument("--train", required=True, help="training corpus JSONL")
    p_resolve.add_argument("--k", type=int, required=True, help="k-shot sample size")
    p_resolve.add_argument("--seed", type=int, help="single run seed")
    p_resolve.add_argument("--seeds", help="comma-separated seeds; reports mean/std")
    p_resolve.add_argument("--combiner", choices=[c.value for c in Combiner],
                           default=Combiner.MICE_S.value)
    p_resolve.add_argument("--gate-combine", choices=["sum", "product"], default="sum",
                           help="similarity aggregation inside the gate")
    p_resolve.add_argument("--report", help="write the score report JSON here")
    p_resolve.add_argument("--predictions", help="write predictions JSON here")
    p_resolve.add_argument("--manifest", help="write the run manifest here")
    _add_prompt_flags(p_resolve)
    _add_filter_flags(p_resolve)
    _add_decode_flags(p_resolve)
    _add_backend_flags(p_resolve)

    p_eval = sub.add_parser("eval", help="score stored predictions")
    p_eval.add_argument("--predictions", required=True,
                        help="JSON map of example key to surfaces")
    p_eval.add_argument("--corpus", required=True, help="gold corpus JSONL")
    p_eval.add_argument("--report", help="write the score report JSON here")

    p_distill = sub.add_parser("distill", help="export teacher pseudo-labels")
    p_distill.add_argument("--unlabeled", required=True, help="unlabeled docs JSONL")
    p_distill.add_argument("--count", type=int, required=True,
                           help="number of anaphors to pseudo-label")
    p_distill.add_argument("--out", required=True, help="output path")
    p_distill.add_argument("--format", choices=["jsonl", "conll"], default="jsonl")
    p_distill.add_argument("--rules", help="detection rule file")
    p_distill.add_argument("--drops", help="write drop log JSON here")
    p_distill.add_argument("--checkpoint",
                           help="write completed records here on backend failure")
    p_distill.add_argument("--train", required=True, help="training corpus JSONL")
    p_distill.add_argument("--k", type=int, required=True)
    p_distill.add_argument("--seed", type=int, default=0)
    p_distill.add_argument("--combiner", choices=[c.value for c in Combiner],
                           default=Combiner.MICE_S.value)
    p_distill.add_argument("--gate-combine", choices=["sum", "product"], default="sum")
    _add_prompt_flags(p_distill)
    _add_filter_flags(p_distill)
    _add_decode_flags(p_distill)
    _add_backend_flags(p_distill)

    p_replay = sub.add_parser("replay", help="recompute a run from its manifest")
    p_replay.add_argument("--manifest", required=True)
    p_replay.add_argument("--report", help="write the recomputed report JSON here")
    return parser


def _load_template(path: Optional[str]) -> Template:
    if not path:
        return Template()
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    allowed = {"question_pattern", "answer_prefix", "separator", "demonstration_joiner"}
    unknown = set(payload) - allowed
    if unknown:
        raise UsageError(f"unknown template fields: {sorted(unknown)}")
    return Template(**payload)


def _build_backend(args: argparse.Namespace) -> Backend:
    if args.lm_mock:
        return MockBackend.from_fixture(args.lm_mock)
    endpoint = args.lm_endpoint or os.environ.get(ENV_LM_ENDPOINT)
    if not endpoint:
        raise UsageError(
            f"no backend: pass --lm-mock or --lm-endpoint (or set ${ENV_LM_ENDPOINT})"
        )
    return HTTPBackend(
        endpoint,
        token=os.environ.get(ENV_LM_TOKEN),
        max_in_flight=args.parallelism,
    )


def _build_embedder(args: argparse.Namespace) -> Embedder:
    endpoint = args.embed_endpoint or os.environ.get(ENV_EMBED_ENDPOINT)
    if endpoint:
        return RemoteEmbedder(endpoint)
    return HashingEmbedder(args.embed_dim)


def _run_config(args: argparse.Namespace, seed: int) -> RunConfig:
    decode_mode = DecodeMode(args.decode)
    decode = DecodeParams(
        mode=decode_mode,
        max_tokens=args.max_gen_tokens,
        top_k=args.top_k,
        top_p=args.top_p,
        temperature=0.0 if decode_mode is DecodeMode.GREEDY else 1.0,
        seed=seed if decode_mode is DecodeMode.NUCLEUS else None,
    )
    return RunConfig(
        combiner=Combiner(args.combiner),
        prompt=PromptSetConfig(
            demos_per_prompt=args.demos_per_prompt,
            max_prompts=args.max_prompts,
            ordering=Ordering(args.ordering),
            selection=Selection(args.selection),
            seed=seed,
            max_sequence_length=args.max_seq_len,
            generation_reserve=args.gen_reserve,
        ),
        decode=decode,
        filters=FilterConfig(
            max_antecedent_tokens=args.max_ante_tokens,
            per_prompt_threshold=args.per_prompt_min,
            combined_threshold=args.combined_min,
            merge_substrings=not args.no_merge,
        ),
        gate_combine=args.gate_combine,
        parallelism=args.parallelism,
        kate_plus_samples=args.kp_samples,
        embed_dim=args.embed_dim,
    )


def _seed_list(args: argparse.Namespace) -> list[int]:
    if args.seeds and args.seed is not None:
        raise UsageError("--seed and --seeds are mutually exclusive")
    if args.seeds:
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise UsageError(f"bad --seeds value: {args.seeds!r}") from exc
    if args.seed is not None:
        return [args.seed]
    raise UsageError("pass --seed or --seeds")


def _seeded_path(path: str, seed: int, multi: bool) -> Path:
    p = Path(path)
    if not multi:
        return p
    return p.with_name(f"{p.stem}.seed{seed}{p.suffix}")


def _cmd_detect(args: argparse.Namespace) -> int:
    rules = load_rules(args.rules) if args.rules else default_rules()
    if bool(args.docs) == bool(args.corpus):
        raise UsageError("pass exactly one of --docs or --corpus")
    if args.corpus:
        report = evaluate_rules(load_corpus(args.corpus), rules)
        payload = {
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
            "true_positives": report.true_positives,
            "false_positives": report.false_positives,
            "false_negatives": report.false_negatives,
        }
        print(json.dumps(payload, sort_keys=True, indent=2))
        return 0
    docs = load_unlabeled_docs(args.docs)
    lines = []
    for doc_id, text in docs:
        for span in detect_anaphors(text, rules):
            lines.append(
                json.dumps(
                    {
                        "doc_id": doc_id,
                        "anaphor": {"start": span.start, "end": span.end},
                        "surface": span.surface,
                    },
                    sort_keys=True,
                    ensure_ascii=False,
                )
            )
    body = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(body, encoding="utf-8")
    else:
        sys.stdout.write(body)
    return 0


def _cmd_sample(args: argparse.Namespace) -> int:
    train = load_corpus(args.train)
    sample = sample_kshot(train, args.k, args.seed)
    if args.out:
        from .corpus import Dataset

        save_corpus(Dataset(examples=sample.examples, split_name="sample"), args.out)
    else:
        for ex in sample:
            print(ex.key)
    return 0


def _cmd_resolve(args: argparse.Namespace) -> int:
    seeds = _seed_list(args)
    multi = len(seeds) > 1
    train = load_corpus(args.train)
    test = load_corpus(args.corpus)
    template = _load_template(args.template)
    backend = _build_backend(args)
    embedder = _build_embedder(args)
    runs = []
    for seed in seeds:
        config = _run_config(args, seed)
        sample = sample_kshot(train, args.k, seed)
        resolver = Resolver(
            config, sample, backend, embedder=embedder, template=template
        )
        result = resolver.resolve_split(test)
        logger.info("seed %d: %d requests", seed, result.request_count)
        if args.manifest:
            write_manifest(
                result, config, sample,
                _seeded_path(args.manifest, seed, multi),
                split_name=test.split_name,
            )
        if args.predictions:
            _seeded_path(args.predictions, seed, multi).write_text(
                json.dumps(result.predictions, sort_keys=True, indent=2,
                           ensure_ascii=False) + "\n",
                encoding="utf-8",
            )
        runs.append((seed, result))
    scored = [(seed, r.report) for seed, r in runs if r.report is not None]
    if multi:
        payload: dict = {
            "seeds": seeds,
            "runs": [
                {
                    "seed": seed,
                    "f1": rep.f1,
                    "precision": rep.precision,
                    "recall": rep.recall,
                }
                for seed, rep in scored
            ],
        }
        if scored:
            f1s = np.array([rep.f1 for _, rep in scored])
            payload["mean_f1"] = float(f1s.mean())
            payload["std_f1"] = float(f1s.std())
        out = json.dumps(payload, sort_keys=True, indent=2)
    elif scored:
        out = scored[0][1].to_json()
    else:
        out = json.dumps({"note": "unlabeled split; no scores",
                          "predictions": runs[0][1].predictions},
                         sort_keys=True, indent=2, ensure_ascii=False)
    print(out)
    if args.report:
        Path(args.report).write_text(out + "\n", encoding="utf-8")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    predictions = json.loads(Path(args.predictions).read_text(encoding="utf-8"))
    gold_dataset = load_corpus(args.corpus)
    gold = {ex.key: ex.gold_surfaces() for ex in gold_dataset}
    report = micro_f1(
        {key: [canonicalize(s) for s in surfaces]
         for key, surfaces in predictions.items()},
        gold,
    )
    print(report.to_table())
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


def _cmd_distill(args: argparse.Namespace) -> int:
    rules = load_rules(args.rules) if args.rules else default_rules()
    docs = load_unlabeled_docs(args.unlabeled)
    train = load_corpus(args.train)
    template = _load_template(args.template)
    backend = _build_backend(args)
    embedder = _build_embedder(args)
    config = _run_config(args, args.seed)
    sample = sample_kshot(train, args.k, args.seed)
    resolver = Resolver(config, sample, backend, embedder=embedder, template=template)
    drop_log = DropLog()
    records = generate_pseudo_labels(
        docs, resolver, args.count, rules,
        tokenizer=WordTokenizer(),
        drop_log=drop_log,
        checkpoint_path=args.checkpoint,
    )
    export_records(records, args.out, args.format)
    if args.drops:
        Path(args.drops).write_text(
            json.dumps(drop_log.entries, sort_keys=True, indent=2,
                       ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
    print(json.dumps({"records": len(records), "dropped_surfaces": len(drop_log.entries),
                      "out": args.out}, sort_keys=True))
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    result, _config = replay_manifest(args.manifest)
    if result.report is not None:
        out = result.report.to_json()
    else:
        out = json.dumps({"note": "unlabeled split; no scores",
                          "predictions": result.predictions},
                         sort_keys=True, indent=2, ensure_ascii=False)
    print(out)
    if args.report:
        Path(args.report).write_text(out + "\n", encoding="utf-8")
    return 0


_COMMANDS = {
    "detect": _cmd_detect,
    "sample": _cmd_sample,
    "resolve": _cmd_resolve,
    "eval": _cmd_eval,
    "distill": _cmd_distill,
    "replay": _cmd_replay,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, CorpusError, PromptBudgetError, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> int:
    return run()


if __name__ == "__main__":
    sys.exit(main())
