"""Command-line entry point: generate, train, link, eval, bench.

Configuration precedence is CLI flag > config file > built-in default.
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, apply_updates, load_run_config
from .corpus import (
    CorpusError,
    load_corpus,
    load_kb,
    load_vocab,
    save_corpus,
    save_kb,
    save_vocab,
    segment_corpus,
)
from .encoder import encoder_forward, mark_tokens
from .eval_bench import (
    EvalReport,
    RankedPrediction,
    bench_throughput,
    micro_prf,
    normalized_filter,
    ranking_metrics,
)
from .index_infer import build_index, decode_end_to_end, decode_end_to_end_bio, rank_rows
from .synth import generate_synthetic_corpus, split_documents
from .training import DivergenceError, context_window, train


def _opt(parser: argparse.ArgumentParser, flag: str, dest: str, **kw) -> None:
    """Add an override flag; dest encodes 'section__field' for later merging."""
    parser.add_argument(flag, dest=dest, default=None, **kw)


def _add_global_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="versioned JSON config file")
    _opt(parser, "--seed", "run__seed", type=int)
    _opt(parser, "--threads", "run__threads", type=int)
    parser.add_argument(
        "--deterministic",
        dest="run__deterministic",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="force single-threaded, reproducible execution",
    )


def _add_segment_flags(parser: argparse.ArgumentParser) -> None:
    _opt(parser, "--max-mentions", "segment__max_mentions", type=int)
    _opt(parser, "--max-tokens", "segment__max_tokens", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="collective-el",
        description="Collective entity linking over a cached entity index.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus, KB, and vocabulary")
    _add_global_flags(p)
    for flag, field_name, typ in (
        ("--entities", "entities", int),
        ("--docs", "docs", int),
        ("--mentions-per-doc", "mentions_per_doc", int),
        ("--vocab-size", "vocab_size", int),
        ("--ambiguity", "ambiguity", int),
        ("--surface-pool", "surface_pool", int),
        ("--surface-len-max", "surface_len_max", int),
        ("--gap-min", "gap_min", int),
        ("--gap-max", "gap_max", int),
        ("--distractor-rate", "distractor_rate", float),
        ("--name-prefix-len", "name_prefix_len", int),
        ("--chain-len", "chain_len", int),
        ("--continuation-rate", "continuation_rate", float),
        ("--continuation-len", "continuation_len", int),
        ("--star-size", "star_size", int),
        ("--train-frac", "train_frac", float),
        ("--dev-frac", "dev_frac", float),
    ):
        _opt(p, flag, f"generate__{field_name}", type=typ)
    _opt(p, "--out", "paths__out_dir")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a linker and write checkpoint + log")
    _add_global_flags(p)
    _opt(p, "--mode", "run__mode")
    for flag, field_name, typ in (
        ("--hidden-dim", "hidden_dim", int),
        ("--num-layers", "num_layers", int),
        ("--num-heads", "num_heads", int),
        ("--ffn-dim", "ffn_dim", int),
        ("--max-seq-len", "max_seq_len", int),
    ):
        _opt(p, flag, f"encoder__{field_name}", type=typ)
    p.add_argument(
        "--tie-encoders",
        dest="encoder__tie_encoders",
        action=argparse.BooleanOptionalAction,
        default=None,
    )
    for flag, field_name, typ in (
        ("--epochs", "epochs", int),
        ("--learning-rate", "learning_rate", float),
        ("--lr-schedule", "lr_schedule", str),
        ("--batch-size", "batch_size", int),
        ("--n-random", "n_random", int),
        ("--n-hard", "n_hard", int),
        ("--hard-refresh-every", "hard_refresh_every", int),
        ("--weight-decay", "weight_decay", float),
        ("--joint-weight", "joint_weight", float),
        ("--context-window", "context_window", int),
    ):
        _opt(p, flag, f"train__{field_name}", type=typ)
    _opt(p, "--max-span-len", "decode__max_span_len", type=int)
    _add_segment_flags(p)
    for flag, key in (
        ("--kb", "kb"),
        ("--vocab", "vocab"),
        ("--train-corpus", "train_corpus"),
        ("--dev-corpus", "dev_corpus"),
        ("--checkpoint", "checkpoint"),
        ("--log", "log"),
    ):
        _opt(p, flag, f"paths__{key}")
    p.add_argument("--resume", action="store_true", help="resume from the checkpoint if present")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("link", help="predict entities for a corpus and write JSONL")
    _add_global_flags(p)
    _opt(p, "--mode", "run__mode")
    _opt(p, "--gamma", "decode__gamma", type=float)
    _opt(p, "--max-span-len", "decode__max_span_len", type=int)
    p.add_argument(
        "--allow-overlaps",
        dest="decode__allow_overlaps",
        action=argparse.BooleanOptionalAction,
        default=None,
    )
    _add_segment_flags(p)
    for flag, key in (
        ("--checkpoint", "checkpoint"),
        ("--corpus", "corpus"),
        ("--kb", "kb"),
        ("--vocab", "vocab"),
        ("--out", "predictions"),
    ):
        _opt(p, flag, f"paths__{key}")
    p.add_argument("--topk", type=int, default=10, help="ranked entities per known span")
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("eval", help="score a prediction file against gold mentions")
    _add_global_flags(p)
    for flag, key in (
        ("--predictions", "predictions"),
        ("--corpus", "corpus"),
        ("--kb", "kb"),
        ("--vocab", "vocab"),
        ("--report", "report"),
    ):
        _opt(p, flag, f"paths__{key}")
    p.add_argument("--normalized", action="store_true", help="score only mentions whose gold is in the candidate set")
    p.add_argument("--candidates", default=None, help="JSONL candidate sets, required with --normalized")
    p.add_argument("--ks", default="10", help="comma-separated recall@k cutoffs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="compare collective vs per-mention throughput")
    _add_global_flags(p)
    _add_segment_flags(p)
    for flag, key in (
        ("--checkpoint", "checkpoint"),
        ("--corpus", "corpus"),
        ("--kb", "kb"),
        ("--vocab", "vocab"),
        ("--report", "report"),
    ):
        _opt(p, flag, f"paths__{key}")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--window", type=int, default=None, help="per-mention context size")
    p.set_defaults(func=cmd_bench)

    return parser


def _collect_overrides(args: argparse.Namespace) -> dict:
    raw: dict = {}
    for dest, value in vars(args).items():
        if "__" not in dest or value is None:
            continue
        section, field_name = dest.split("__", 1)
        if section == "run":
            raw[field_name] = value
        else:
            raw.setdefault(section, {})[field_name] = value
    return raw


def resolve_config(args: argparse.Namespace) -> tuple[RunConfig, set[str]]:
    seen: set[str] = set()
    if args.config is not None:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        cfg = load_run_config(args.config, seen=seen)
    else:
        cfg = RunConfig()
    apply_updates(cfg, _collect_overrides(args), source="command line", seen=seen)
    if cfg.deterministic:
        cfg.threads = 1
    cfg.validate()
    return cfg, seen


def _need_path(cfg: RunConfig, key: str, flag: str) -> str:
    path = cfg.paths.get(key)
    if not path:
        raise ConfigError(f"missing required path: {flag} (config key paths.{key})")
    return path


def _need_input(cfg: RunConfig, key: str, flag: str) -> str:
    path = _need_path(cfg, key, flag)
    if not os.path.exists(path):
        raise ConfigError(f"paths.{key} does not exist: {path}")
    return path


def _effective_seeds(cfg: RunConfig, seen: set[str]):
    """Global seed fills component seeds unless a config layer set them."""
    enc = cfg.encoder
    if "encoder.seed" not in seen:
        enc = dataclasses.replace(enc, seed=cfg.seed)
    tc = cfg.train
    if "train.seed" not in seen:
        tc = dataclasses.replace(tc, seed=cfg.seed)
    return enc, tc


def cmd_generate(cfg: RunConfig, args: argparse.Namespace, seen: set[str]) -> int:
    out_dir = _need_path(cfg, "out_dir", "--out")
    kb, vocab, docs = generate_synthetic_corpus(cfg.generate, seed=cfg.seed)
    splits = split_documents(docs, cfg.generate)
    os.makedirs(out_dir, exist_ok=True)
    save_kb(kb, os.path.join(out_dir, "kb.tsv"))
    save_vocab(vocab, os.path.join(out_dir, "vocab.txt"))
    for name in ("train", "dev", "test"):
        save_corpus(splits[name], vocab, os.path.join(out_dir, f"{name}.jsonl"))
    meta = {
        "seed": cfg.seed,
        "generate": dataclasses.asdict(cfg.generate),
        "split_sizes": {k: len(v) for k, v in splits.items()},
        "entities": kb.size,
        "vocab_size": vocab.size,
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"wrote {kb.size} entities, {len(docs)} docs "
        f"({', '.join(f'{k}={len(v)}' for k, v in splits.items())}) to {out_dir}"
    )
    return 0


def cmd_train(cfg: RunConfig, args: argparse.Namespace, seen: set[str]) -> int:
    vocab = load_vocab(_need_input(cfg, "vocab", "--vocab"))
    kb = load_kb(_need_input(cfg, "kb", "--kb"))
    train_docs = load_corpus(_need_input(cfg, "train_corpus", "--train-corpus"), vocab, kb)
    dev_docs = []
    if cfg.paths.get("dev_corpus"):
        dev_docs = load_corpus(_need_input(cfg, "dev_corpus", "--dev-corpus"), vocab, kb)
    ckpt_path = _need_path(cfg, "checkpoint", "--checkpoint")

    enc, tc = _effective_seeds(cfg, seen)
    enc = dataclasses.replace(enc, vocab_size=vocab.size)
    resume_from = ckpt_path if args.resume and os.path.exists(ckpt_path) else None
    result = train(
        enc,
        tc,
        cfg.mode,
        train_docs,
        dev_docs,
        kb,
        vocab,
        max_mentions=cfg.segment.max_mentions,
        max_tokens=cfg.segment.max_tokens,
        max_span_len=cfg.decode.max_span_len,
        checkpoint_path=ckpt_path,
        log_path=cfg.paths.get("log"),
        resume_from=resume_from,
    )
    last = result.history[-1] if result.history else {}
    summary = f"trained {cfg.mode} for {len(result.history)} epochs"
    if last.get("p_at_1") is not None:
        summary += f"; dev P@1={last['p_at_1']:.4f} MAP={last['map']:.4f}"
    print(summary + f"; checkpoint: {ckpt_path}")
    return 0


def _known_span_record(doc_id, start, end, kb, rows, scores) -> dict:
    return {
        "doc_id": doc_id,
        "start": int(start),
        "end": int(end),
        "entity_id": kb.entity_id(int(rows[0])),
        "score": float(scores[0]),
        "topk": [[kb.entity_id(int(r)), float(s)] for r, s in zip(rows, scores)],
    }


def link_corpus(params, docs, kb, vocab, index, mode, *, segment, decode, window, topk, threads=1):
    """Predict entities for every document, in document-coordinate spans."""
    t = params.tensors
    cap = min(segment.max_tokens, params.config.max_seq_len - 2)
    if mode == "per_mention":
        width = min(window, params.config.max_seq_len - 2)
        records = []
        for doc in docs:
            for m in doc.mentions:
                win, span = context_window(doc.tokens, (m.start, m.end), width)
                h, _ = encoder_forward(params, params.mention_prefix, mark_tokens(win)[None, :])
                hs = h[0]
                cat = np.concatenate([hs[span[0] + 1], hs[span[1] + 1]])
                u = t["head.proj.w"] @ cat + t["head.proj.b"]
                rows, scores = rank_rows(u, index, topk)
                records.append(_known_span_record(doc.doc_id, m.start, m.end, kb, rows, scores))
        return records

    segs = segment_corpus(docs, segment.max_mentions, cap)

    def work(item):
        seg, base = item
        out = []
        if mode == "collective":
            if not seg.mentions:
                return out
            h, _ = encoder_forward(
                params, params.mention_prefix, mark_tokens(np.asarray(seg.tokens))[None, :]
            )
            hs = h[0]
            for m in seg.mentions:
                cat = np.concatenate([hs[m.start + 1], hs[m.end + 1]])
                u = t["head.proj.w"] @ cat + t["head.proj.b"]
                rows, scores = rank_rows(u, index, topk)
                out.append(
                    _known_span_record(seg.doc_id, base + m.start, base + m.end, kb, rows, scores)
                )
            return out
        h, _ = encoder_forward(
            params, params.mention_prefix, mark_tokens(np.asarray(seg.tokens))[None, :]
        )
        fn = decode_end_to_end_bio if mode == "end_to_end_bio" else decode_end_to_end
        for (i, j), eid, p in fn(h[0], params, index, decode, kb):
            out.append(
                {
                    "doc_id": seg.doc_id,
                    "start": int(base + i),
                    "end": int(base + j),
                    "entity_id": eid,
                    "score": float(p),
                }
            )
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(work, segs))
    else:
        chunks = [work(s) for s in segs]
    return [rec for chunk in chunks for rec in chunk]


def _load_checkpoint_checked(cfg: RunConfig, vocab) -> object:
    ckpt = load_checkpoint(_need_input(cfg, "checkpoint", "--checkpoint"))
    if ckpt.vocab_hash != vocab.content_hash():
        raise CorpusError(
            "checkpoint was trained on a different vocabulary "
            f"(hash {ckpt.vocab_hash[:12]} != {vocab.content_hash()[:12]})"
        )
    return ckpt


def cmd_link(cfg: RunConfig, args: argparse.Namespace, seen: set[str]) -> int:
    vocab = load_vocab(_need_input(cfg, "vocab", "--vocab"))
    kb = load_kb(_need_input(cfg, "kb", "--kb"))
    docs = load_corpus(_need_input(cfg, "corpus", "--corpus"), vocab, kb)
    out_path = _need_path(cfg, "predictions", "--out")
    ckpt = _load_checkpoint_checked(cfg, vocab)
    mode = cfg.mode if "mode" in seen else (ckpt.mode or cfg.mode)
    if args.topk < 1:
        raise ConfigError("--topk must be >= 1")

    index = build_index(kb, vocab, ckpt.params)
    records = link_corpus(
        ckpt.params,
        docs,
        kb,
        vocab,
        index,
        mode,
        segment=cfg.segment,
        decode=cfg.decode,
        window=cfg.train.context_window,
        topk=args.topk,
        threads=cfg.threads,
    )
    with open(out_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote {len(records)} predictions ({mode}) to {out_path}")
    return 0


def _load_predictions(path: str) -> list[dict]:
    required = {"doc_id", "start", "end", "entity_id", "score"}
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            missing = required - rec.keys()
            if missing:
                raise CorpusError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            records.append(rec)
    return records


def _load_candidate_sets(path: str) -> dict:
    sets = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            try:
                key = (rec["doc_id"], rec["start"], rec["end"])
                sets[key] = tuple(rec["candidates"])
            except KeyError as exc:
                raise CorpusError(f"{path}:{lineno}: missing field {exc}") from exc
    return sets


def cmd_eval(cfg: RunConfig, args: argparse.Namespace, seen: set[str]) -> int:
    if args.normalized and not args.candidates:
        raise ConfigError("--normalized requires --candidates")
    try:
        ks = tuple(int(k) for k in args.ks.split(",") if k.strip())
    except ValueError as exc:
        raise ConfigError(f"--ks must be comma-separated integers: {args.ks!r}") from exc
    if not ks or min(ks) < 1:
        raise ConfigError(f"--ks must contain positive integers: {args.ks!r}")

    vocab = load_vocab(_need_input(cfg, "vocab", "--vocab"))
    kb = load_kb(_need_input(cfg, "kb", "--kb"))
    docs = load_corpus(_need_input(cfg, "corpus", "--corpus"), vocab, kb)
    preds = _load_predictions(_need_input(cfg, "predictions", "--predictions"))
    report_path = cfg.paths.get("report")

    gold_doc_ids = {d.doc_id for d in docs}
    unknown = sorted({r["doc_id"] for r in preds} - gold_doc_ids)
    if unknown:
        raise CorpusError(f"prediction doc_ids missing from gold corpus: {unknown}")

    golds = [(d.doc_id, m.start, m.end, m.entity_id) for d in docs for m in d.mentions]
    spans = [(r["doc_id"], r["start"], r["end"], r["entity_id"]) for r in preds]

    gold_keys = sorted((g[0], g[1], g[2]) for g in golds)
    pred_keys = sorted(k[:3] for k in spans)
    ranking = bool(preds) and all("topk" in r for r in preds) and pred_keys == gold_keys

    kwargs: dict = {"n_mentions": len(golds)}
    if ranking:
        gold_by_key = {(g[0], g[1], g[2]): g[3] for g in golds}
        ranked_preds = [
            RankedPrediction(
                key=(r["doc_id"], r["start"], r["end"]),
                ranked=tuple(e for e, _ in r["topk"]),
                gold=gold_by_key[(r["doc_id"], r["start"], r["end"])],
            )
            for r in preds
        ]
        if args.normalized:
            ranked_preds = normalized_filter(ranked_preds, _load_candidate_sets(args.candidates))
            kwargs["normalized"] = True
            kwargs["n_mentions"] = len(ranked_preds)
        if ranked_preds:
            metrics = ranking_metrics(ranked_preds, ks=ks)
            kwargs.update(
                p_at_1=metrics["p_at_1"], map=metrics["map"], recall_at_k=metrics["recall_at_k"]
            )
    elif args.normalized:
        raise ConfigError("--normalized requires ranked (topk) predictions over gold spans")

    if not args.normalized:
        strict = micro_prf(spans, golds, "strict")
        partial = micro_prf(spans, golds, "partial")
        if strict[2] > partial[2] + 1e-9:
            raise RuntimeError("internal error: strict F1 exceeded partial F1")
        kwargs.update(strict=strict, partial=partial)

    report = EvalReport(**kwargs)
    text = report.to_json()
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_bench(cfg: RunConfig, args: argparse.Namespace, seen: set[str]) -> int:
    vocab = load_vocab(_need_input(cfg, "vocab", "--vocab"))
    kb = load_kb(_need_input(cfg, "kb", "--kb"))
    docs = load_corpus(_need_input(cfg, "corpus", "--corpus"), vocab, kb)
    ckpt = _load_checkpoint_checked(cfg, vocab)
    index = build_index(kb, vocab, ckpt.params)
    window = args.window if args.window is not None else cfg.train.context_window

    results = {}
    for mode in ("collective", "per_mention"):
        results[mode] = bench_throughput(
            ckpt.params,
            docs,
            kb,
            vocab,
            index,
            mode,
            runs=args.runs,
            max_mentions=cfg.segment.max_mentions,
            max_tokens=cfg.segment.max_tokens,
            window=window,
        )
    base = results["per_mention"].mentions_per_sec
    print(f"{'mode':<14}{'mentions/sec':>14}{'ratio':>10}")
    for mode in ("collective", "per_mention"):
        r = results[mode]
        print(f"{mode:<14}{r.mentions_per_sec:>14.1f}{r.mentions_per_sec / base:>9.2f}x")
    meta = results["collective"].metadata
    print(
        f"# {results['collective'].n_mentions} mentions, median of {args.runs} runs, "
        f"single_threaded={meta.get('single_threaded')}"
    )
    if cfg.paths.get("report"):
        payload = {
            mode: dataclasses.asdict(res) for mode, res in results.items()
        }
        payload["ratio"] = results["collective"].mentions_per_sec / base
        with open(cfg.paths["report"], "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, seen = resolve_config(args)
        return args.func(cfg, args, seen)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
