#!/usr/bin/env python3
"""Codebook-size sweep: held-out perplexity vs visual vocabulary size.

Trains one vanilla (immediate activation) unified model per codebook size
and seed, then charts seed-median joint perplexity against log2(K). The
expected shape is non-decreasing perplexity as K grows.
"""

from __future__ import annotations

import argparse
import json
import math
import statistics
from pathlib import Path

from uniar import evals
from uniar.chart import emit_chart
from uniar.train import RunConfig


def parse_args() -> argparse.Namespace:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--root", type=Path, default=Path("runs/sweep_vocab"))
    p.add_argument("--k", default="64,256,1024",
                   help="comma-separated codebook sizes")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--limit", type=int, default=50)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--threads", type=int, default=1)
    return p.parse_args()


def main() -> None:
    args = parse_args()
    k_list = [int(k) for k in args.k.split(",") if k.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]

    warmup = min(200, max(1, args.steps // 10))
    per_seed: dict[int, dict[int, float]] = {}
    for seed in seeds:
        cfg = RunConfig(
            stage="unified_pretrain", seed=seed, total_steps=args.steps,
            warmup_steps=warmup, log_every=args.log_every, threads=args.threads,
        )
        rows = evals.sweep_vocab(cfg, k_list, args.root / f"seed{seed}",
                                 limit=args.limit)
        per_seed[seed] = {row["codebook_size"]: row["joint_ppl"] for row in rows}
        print(f"seed {seed}: " + "  ".join(
            f"K={k} ppl={per_seed[seed][k]:.3f}" for k in k_list))

    medians = {k: statistics.median(per_seed[s][k] for s in seeds) for k in k_list}
    ordered = [medians[k] for k in k_list]
    shape = all(a <= b for a, b in zip(ordered, ordered[1:]))
    print("seed-median joint ppl: " + "  ".join(
        f"K={k} {medians[k]:.3f}" for k in k_list))
    print(f"non-decreasing in K: {'yes' if shape else 'NO'}")

    series = [(f"seed {s}", [(math.log2(k), per_seed[s][k]) for k in k_list])
              for s in seeds]
    series.append(("median", [(math.log2(k), medians[k]) for k in k_list]))
    emit_chart(series, args.root / "vocab_ppl.svg",
               title="held-out perplexity vs codebook size",
               x_label="log2(K)", y_label="joint ppl")
    with open(args.root / "vocab_summary.json", "w") as f:
        json.dump({"per_seed": {str(s): per_seed[s] for s in seeds},
                   "median": medians, "non_decreasing": shape},
                  f, indent=2, sort_keys=True)
    print(f"chart and summary under {args.root}")


if __name__ == "__main__":
    main()
