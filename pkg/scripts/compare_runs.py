#!/usr/bin/env python3
"""Five-way comparison: task-specific, vanilla unified, scheduled unified.

Runs the three task-specific baselines (text only, captioning only,
generation only), the vanilla unified mix, and the scheduled unified mix
with shared seed, steps, and backbone, then prints the metric table and the
relative declines of the two unified rows against the specialists.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from uniar import evals
from uniar.train import RunConfig


def parse_args() -> argparse.Namespace:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--root", type=Path, default=Path("runs/compare"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=250, help="schedule period")
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--limit", type=int, default=50)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--threads", type=int, default=1)
    return p.parse_args()


def main() -> None:
    args = parse_args()
    cfg = RunConfig(
        stage="unified_pretrain", seed=args.seed, total_steps=args.steps,
        warmup_steps=min(200, max(1, args.steps // 10)),
        log_every=args.log_every, threads=args.threads,
    )
    summary = evals.compare_three_way(cfg, args.k, args.root, limit=args.limit)

    def cell(value, spec):
        return format(value, spec) if value is not None else "-"

    print(f"{'run':<12} {'text_ppl':>10} {'und_acc':>8} {'gen_ok':>8}")
    for row in summary["rows"]:
        print(
            f"{row['name']:<12} {cell(row['text_ppl'], '10.4f')} "
            f"{cell(row['und_accuracy'], '8.3f')} {cell(row['gen_overall'], '8.3f')}"
        )
    for name in ("vanilla", "scheduled"):
        d = summary["declines"][name]
        print(
            f"{name} decline vs task-specific: "
            f"text {d['text_ppl']:+.1%}, und {d['und_accuracy']:+.1%}, "
            f"gen {d['gen_overall']:+.1%}"
        )
    print(f"tables under {args.root}")


if __name__ == "__main__":
    main()
