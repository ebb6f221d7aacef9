#!/usr/bin/env python3
"""Three-stage training pipeline at protocol scale.

Runs text_pretrain -> unified_pretrain (warm start, activation schedule) ->
sft, then evaluates the final model on held-out data: text perplexity,
caption accuracy, and the guided-generation check rate against twice the
random-scene base rate. Defaults take a few hours on one CPU; pass smaller
--*-steps for a smoke run.
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from uniar import evals
from uniar.chart import emit_chart
from uniar.corpus import exact_base_rate
from uniar.infer import SamplingConfig
from uniar.train import RunConfig, run_stage


def parse_args() -> argparse.Namespace:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--root", type=Path, default=Path("runs/pipeline"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--text-steps", type=int, default=4000)
    p.add_argument("--unified-steps", type=int, default=20000)
    p.add_argument("--sft-steps", type=int, default=2000)
    p.add_argument("--activation", default="250",
                   help='schedule period k, or "immediate"')
    p.add_argument("--cfg-scale", type=float, default=5.0)
    p.add_argument("--limit", type=int, default=50,
                   help="held-out samples per generation metric")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--threads", type=int, default=1)
    return p.parse_args()


def warmup_for(steps: int, default: int) -> int:
    # protocol warmups at full scale, shrunk proportionally for smoke runs
    return min(default, max(1, steps // 10))


def main() -> None:
    args = parse_args()
    activation = args.activation if args.activation == "immediate" else int(args.activation)
    common = dict(seed=args.seed, log_every=args.log_every, threads=args.threads)

    t0 = time.perf_counter()
    text_cfg = RunConfig.text_pretrain(
        total_steps=args.text_steps,
        warmup_steps=warmup_for(args.text_steps, 200), **common,
    )
    r1 = run_stage(text_cfg, out_dir=args.root / "text")
    print(f"text stage done, final loss {r1.final_loss:.4f}")

    uni_cfg = RunConfig.unified_pretrain(
        total_steps=args.unified_steps, activation=activation,
        warmup_steps=warmup_for(args.unified_steps, 200), **common,
    )
    r2 = run_stage(uni_cfg, out_dir=args.root / "unified", warm=r1.checkpoint)
    print(f"unified stage done, final loss {r2.final_loss:.4f}")

    sft_cfg = RunConfig.sft(
        total_steps=args.sft_steps,
        warmup_steps=warmup_for(args.sft_steps, 40), **common,
    )
    r3 = run_stage(sft_cfg, out_dir=args.root / "sft", warm=r2.checkpoint)
    print(f"sft stage done, final loss {r3.final_loss:.4f}")

    _, world, model, act, _ = evals.load_run(r3.run_dir)
    scfg = SamplingConfig(seed=args.seed, cfg_scale=args.cfg_scale)
    text_ppl = evals.perplexity(
        model, world.held["text"], world.layout, sft_cfg.row_len, act=act
    )
    und_acc = evals.und_accuracy(model, world, act=act, limit=args.limit)
    gen_rate, axes = evals.gen_score(model, world, scfg, act=act, limit=args.limit)
    base = exact_base_rate(sft_cfg.grid_size)

    points = [(float(p["step"]), float(p["ppl"])) for p in evals.trajectory(r2.metrics)]
    emit_chart(
        [("unified ppl", points)], args.root / "unified_ppl.svg",
        title="unified stage training perplexity", x_label="step", y_label="ppl",
    )

    summary = {
        "text_ppl": text_ppl,
        "und_accuracy": und_acc,
        "gen_check_rate": gen_rate,
        "gen_axes": axes,
        "base_rate": base,
        "passes_2x_base": gen_rate >= 2 * base,
        "minutes": (time.perf_counter() - t0) / 60,
        "stages": {
            "text": str(r1.run_dir),
            "unified": str(r2.run_dir),
            "sft": str(r3.run_dir),
        },
    }
    with open(args.root / "pipeline_summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)

    print(f"text ppl       {text_ppl:.3f}")
    print(f"und accuracy   {und_acc:.3f}")
    print(f"gen check rate {gen_rate:.3f} vs 2x base {2 * base:.4f} "
          f"({'ok' if summary['passes_2x_base'] else 'below'})")
    print(f"summary under {args.root}")


if __name__ == "__main__":
    main()
