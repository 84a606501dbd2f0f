"""Collective vs per-mention linking throughput across mention densities.

Uses untrained parameters: the per-token cost is identical either way, so
the throughput ratio measures the architectural difference (one document
pass for all mentions vs one context window per mention), not model quality.
"""

from __future__ import annotations

import argparse

from collective_el.encoder import EncoderConfig, init_params
from collective_el.eval_bench import bench_throughput
from collective_el.index_infer import build_index
from collective_el.synth import GeneratorConfig, generate_synthetic_corpus


def parse_args() -> argparse.Namespace:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--densities", default="1,2,4,8",
                    help="comma-separated mentions per document")
    ap.add_argument("--docs", type=int, default=100)
    ap.add_argument("--entities", type=int, default=100)
    ap.add_argument("--hidden-dim", type=int, default=64)
    ap.add_argument("--num-layers", type=int, default=2)
    ap.add_argument("--window", type=int, default=128, help="per-mention context size")
    ap.add_argument("--runs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=7)
    return ap.parse_args()


def main() -> None:
    args = parse_args()
    print(f"{'mentions/doc':>12}{'collective':>14}{'per-mention':>14}{'ratio':>9}")
    for density in (int(d) for d in args.densities.split(",")):
        gcfg = GeneratorConfig(
            entities=args.entities, docs=args.docs, mentions_per_doc=density
        )
        kb, vocab, docs = generate_synthetic_corpus(gcfg, seed=args.seed)
        enc = EncoderConfig(
            hidden_dim=args.hidden_dim, num_layers=args.num_layers,
            num_heads=max(1, args.hidden_dim // 16), ffn_dim=2 * args.hidden_dim,
            max_seq_len=512, vocab_size=vocab.size, seed=args.seed,
        )
        params = init_params(enc)
        index = build_index(kb, vocab, params)
        results = {
            mode: bench_throughput(
                params, docs, kb, vocab, index, mode,
                runs=args.runs, window=args.window,
            )
            for mode in ("collective", "per_mention")
        }
        ratio = (
            results["collective"].mentions_per_sec
            / results["per_mention"].mentions_per_sec
        )
        print(
            f"{density:>12}"
            f"{results['collective'].mentions_per_sec:>12.1f}/s"
            f"{results['per_mention'].mentions_per_sec:>12.1f}/s"
            f"{ratio:>8.2f}x"
        )


if __name__ == "__main__":
    main()
