#!/usr/bin/env python3
"""Activation-speed sweep: mean task score vs schedule period k.

Trains one unified model per activation period (plus the immediate
baseline) and seed, scoring each run by the unweighted mean of min-max
normalized task metrics. The expected shape is an interior k beating both
the fastest schedule and the immediate baseline.
"""

from __future__ import annotations

import argparse
import json
import statistics
from pathlib import Path

from uniar import evals
from uniar.chart import emit_chart
from uniar.train import RunConfig


def parse_args() -> argparse.Namespace:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--root", type=Path, default=Path("runs/sweep_activation"))
    p.add_argument("--k", default="50,250,1250,immediate",
                   help='comma-separated periods, "immediate" allowed')
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--limit", type=int, default=50)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--threads", type=int, default=1)
    return p.parse_args()


def main() -> None:
    args = parse_args()
    k_list = [k if k == "immediate" else int(k)
              for k in (part.strip() for part in args.k.split(",")) if k]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]

    warmup = min(200, max(1, args.steps // 10))
    scores: dict[str, list[float]] = {str(k): [] for k in k_list}
    for seed in seeds:
        cfg = RunConfig(
            stage="unified_pretrain", seed=seed, total_steps=args.steps,
            warmup_steps=warmup, log_every=args.log_every, threads=args.threads,
        )
        rows = evals.sweep_activation(cfg, k_list, args.root / f"seed{seed}",
                                      limit=args.limit)
        for row in rows:
            scores[str(row["activation"])].append(row["score"])
            flag = " (incomplete activation)" if row["incomplete_activation"] else ""
            print(f"seed {seed} k={row['activation']!s:<10} "
                  f"score={row['score']:.4f}{flag}")

    means = {k: statistics.mean(v) for k, v in scores.items()}
    best = max(means, key=lambda k: means[k])
    interior = {str(k) for k in k_list[1:-1]}
    print("mean score: " + "  ".join(f"k={k} {v:.4f}" for k, v in means.items()))
    print(f"best k={best}, interior best: {'yes' if best in interior else 'NO'}")

    # x axis: position in the sweep order, since "immediate" has no numeric k
    series = [(f"seed {s}",
               [(float(i), scores[str(k)][si]) for i, k in enumerate(k_list)])
              for si, s in enumerate(seeds)]
    series.append(("mean", [(float(i), means[str(k)]) for i, k in enumerate(k_list)]))
    emit_chart(series, args.root / "activation_score.svg",
               title="task score vs activation speed",
               x_label="sweep position (" + ", ".join(str(k) for k in k_list) + ")",
               y_label="mean normalized score")
    with open(args.root / "activation_summary.json", "w") as f:
        json.dump({"scores": scores, "mean": means, "best": best,
                   "interior_best": best in interior},
                  f, indent=2, sort_keys=True)
    print(f"chart and summary under {args.root}")


if __name__ == "__main__":
    main()
