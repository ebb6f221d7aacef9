"""Command surface: data generation, tokenizer fitting, staged training,
generation, evaluation, sweeps, the three-way comparison, and chart plotting.

Exit codes: 0 success, 1 usage error (bad flags, bad config, bad values),
2 runtime failure. All randomness flows from --seed / config seeds, so every
command is idempotent given identical inputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .chart import emit_chart
from .ckpt import CorruptCheckpointError, load_checkpoint
from .evals import (
    compare_three_way,
    evaluate_run,
    sweep_activation,
    sweep_vocab,
    trajectory,
)
from .infer import (
    SamplingConfig,
    SamplingError,
    generate_image,
    generate_mixed,
    generate_text,
)
from .prompt import parse_interleaved, sft_template
from .tok import TextTokenizer, dequantize, load_codebook, save_codebook
from .train import (
    SFT_GEN_PREFIX,
    STAGES,
    RunConfig,
    build_world,
    read_config_file,
    run_stage,
)
from .vocab import ActivationState

_STAGE_DEFAULTS = {
    "text_pretrain": RunConfig.text_pretrain,
    "unified_pretrain": RunConfig.unified_pretrain,
    "sft": RunConfig.sft,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uniar", description="unified autoregressive toy-model workbench"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic corpora as JSON Lines")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-text", type=int, default=2000)
    p.add_argument("--n-pairs", type=int, default=2000)
    p.add_argument("--grid-size", type=int, default=4)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-tokenizers", help="train the byte-pair and visual tokenizers")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-text", type=int, default=2000)
    p.add_argument("--n-pairs", type=int, default=2000)
    p.add_argument("--bpe-merges", type=int, default=200)
    p.add_argument("--codebook-size", type=int, default=64)
    p.add_argument("--grid-size", type=int, default=4)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit_tokenizers)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", choices=STAGES)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--activation", help='activation period or "immediate"')
    p.add_argument("--warm", help="donor checkpoint for stage chaining")
    p.add_argument("--out", help="run directory (default: runs/<name>)")
    p.add_argument("--runs-root", default="runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample from a trained checkpoint")
    p.add_argument("mode", choices=("text", "image", "mixed"))
    p.add_argument("--run", help="run directory holding final.ckpt + tokenizers")
    p.add_argument("--ckpt", help="checkpoint file (with --tokenizer/--codebook)")
    p.add_argument("--tokenizer")
    p.add_argument("--codebook")
    p.add_argument("--prompt", default="", help="text/mixed prompt")
    p.add_argument("--caption", default="", help="image-mode caption")
    p.add_argument("--cfg-scale", type=float, default=5.0)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--top-k", type=int)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--max-new-tokens", type=int, default=64)
    p.add_argument("--image-tokens", type=int, help="visual tokens per image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSONL output path (PPM images written beside it)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score a finished run on held-out data")
    p.add_argument("--run", required=True)
    p.add_argument("--limit", type=int, default=50, help="held-out pairs to score")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="vocabulary-size or activation-speed sweep")
    p.add_argument("kind", choices=("vocab", "activation"))
    p.add_argument("--config", help="base config file")
    p.add_argument("--k-list", required=True,
                   help='comma list, e.g. "64,256,1024" or "2,8,32,immediate"')
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--limit", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="task-specific vs unified vs scheduled")
    p.add_argument("--config", help="base config file")
    p.add_argument("--k", type=int, required=True, help="activation period for the scheduled run")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--limit", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot", help="render metric series to an SVG chart")
    p.add_argument("--metrics", required=True, help="metrics.jsonl path")
    p.add_argument("--series", default="ppl", help="comma list of record keys")
    p.add_argument("--title", default="")
    p.add_argument("--out", help="SVG path (default: beside the metrics file)")
    p.set_defaults(func=cmd_plot)

    return parser


def _base_config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = read_config_file(args.config)
    elif getattr(args, "stage", None):
        cfg = _STAGE_DEFAULTS[args.stage]()
    else:
        cfg = RunConfig()
    updates = {}
    if getattr(args, "stage", None) and args.stage != cfg.stage:
        updates["stage"] = args.stage
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        updates["total_steps"] = args.steps
    if getattr(args, "activation", None) is not None:
        act = args.activation
        updates["activation"] = act if act == "immediate" else int(act)
    return dataclasses.replace(cfg, **updates) if updates else cfg


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sentences = corpus_mod.gen_text_corpus(args.seed, args.n_text)
    text_records = [corpus_mod.text_record(s, args.seed) for s in sentences]
    corpus_mod.export_jsonl(text_records, out / "text.jsonl")
    pair_records = []
    for i in range(args.n_pairs):
        pair_seed = args.seed * 1_000_000 + i
        scene = corpus_mod.gen_scene(pair_seed, args.grid_size)
        cap = corpus_mod.caption(scene, pair_seed)
        image = corpus_mod.render(scene, args.patch_size)
        pair_records.append(corpus_mod.pair_record(scene, cap, image, pair_seed))
    corpus_mod.export_jsonl(pair_records, out / "pairs.jsonl")
    print(f"wrote {len(text_records)} text records and {len(pair_records)} pairs to {out}")
    return 0


def cmd_fit_tokenizers(args) -> int:
    cfg = RunConfig(
        seed=args.seed,
        n_text=args.n_text,
        n_pairs=args.n_pairs,
        bpe_merges=args.bpe_merges,
        codebook_size=args.codebook_size,
        grid_size=args.grid_size,
        patch_size=args.patch_size,
    )
    world = build_world(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world.text_tok.save(out / "tokenizer.txt")
    save_codebook(world.codebook, out / "codebook.bin")
    layout = world.layout
    print(
        f"tokenizer: {world.text_tok.vocab_size} textual ids; "
        f"codebook: {layout.visual_size} visual ids; total vocab {layout.total_size}"
    )
    return 0


def cmd_train(args) -> int:
    cfg = _base_config(args)
    result = run_stage(cfg, out_dir=args.out, warm=args.warm, runs_root=args.runs_root)
    print(f"run dir: {result.run_dir}")
    print(f"final loss: {result.final_loss:.6f}")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def _generation_bundle(args):
    if args.run:
        run_dir = Path(args.run)
        ckpt = load_checkpoint(run_dir / "final.ckpt")
        tok = TextTokenizer.load(run_dir / "tokenizer.txt")
        codebook = load_codebook(run_dir / "codebook.bin")
        cfg_path = run_dir / "config.txt"
        cfg = read_config_file(cfg_path) if cfg_path.exists() else None
    else:
        if not (args.ckpt and args.tokenizer and args.codebook):
            raise ValueError("need --run, or --ckpt with --tokenizer and --codebook")
        ckpt = load_checkpoint(args.ckpt)
        tok = TextTokenizer.load(args.tokenizer)
        codebook = load_codebook(args.codebook)
        cfg = None
    act = None
    if ckpt.activation is not None:
        act = ActivationState.from_state_dict(ckpt.layout, ckpt.activation)
    return ckpt, tok, codebook, cfg, act


def _settings_dict(scfg: SamplingConfig) -> dict:
    return dataclasses.asdict(scfg)


def cmd_generate(args) -> int:
    ckpt, tok, codebook, cfg, act = _generation_bundle(args)
    layout = ckpt.layout
    chat = ckpt.stage == "sft"
    scfg = SamplingConfig(
        temperature=args.temperature,
        top_k=args.top_k,
        cfg_scale=args.cfg_scale,
        max_new_tokens=args.max_new_tokens,
        seed=args.seed,
        greedy=args.greedy,
    )
    n_image_tokens = args.image_tokens or (cfg.grid_size**2 if cfg else 16)

    ppm_images = []
    if args.mode == "text":
        prompt = args.prompt
        text = sft_template([(prompt, "")]) if chat else prompt
        prefix = [layout.sos, *tok.encode(text)] if text else [layout.sos]
        ids = generate_text(ckpt.model, prefix, scfg, layout)
        record = {
            "prompt": prompt,
            "ids": ids,
            "text": tok.decode(ids),
            "image": None,
            "settings": _settings_dict(scfg),
        }
    elif args.mode == "image":
        caption = args.caption
        if chat:
            caption_ids = tok.encode(sft_template([(SFT_GEN_PREFIX + caption, "")]))
        else:
            caption_ids = tok.encode(caption)
        grid, image = generate_image(
            ckpt.model, caption_ids, scfg, layout, codebook, n_image_tokens, act=act
        )
        ppm_images.append(image)
        record = {
            "prompt": caption,
            "ids": [int(i) for i in grid.reshape(-1)],
            "text": None,
            "image": corpus_mod.image_to_b64(image),
            "settings": _settings_dict(scfg),
        }
    else:
        prompt = args.prompt
        prefix = [layout.sos, *tok.encode(prompt)] if prompt else [layout.sos]
        full = generate_mixed(
            ckpt.model, prefix, scfg, layout, n_image_tokens, act=act
        )
        segments = parse_interleaved(full, layout)
        parts, images_b64 = [], []
        for seg_kind, seg_ids in segments:
            if seg_kind == "text":
                parts.append(tok.decode(seg_ids))
            else:
                codes = [i - layout.text_size for i in seg_ids]
                image = dequantize(codebook, np.array(codes))
                ppm_images.append(image)
                images_b64.append(corpus_mod.image_to_b64(image))
                parts.append("<image>")
        record = {
            "prompt": prompt,
            "ids": full,
            "text": "".join(parts),
            "image": images_b64 or None,
            "settings": _settings_dict(scfg),
        }

    line = json.dumps(record, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "a") as f:
            f.write(line + "\n")
        for i, image in enumerate(ppm_images):
            corpus_mod.write_ppm(image, out.with_suffix(f".{i}.ppm"))
        print(f"wrote record to {out}")
    else:
        print(line)
    return 0


def cmd_eval(args) -> int:
    report = evaluate_run(args.run, limit=args.limit)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    (Path(args.run) / "eval.json").write_text(payload + "\n")
    print(payload)
    return 0


def _parse_k_list(raw: str, allow_immediate: bool) -> list:
    out = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        if part == "immediate":
            if not allow_immediate:
                raise ValueError('"immediate" is only valid for the activation sweep')
            out.append("immediate")
        else:
            out.append(int(part))
    if not out:
        raise ValueError("k-list must name at least one value")
    return out


def cmd_sweep(args) -> int:
    cfg = _base_config(args)
    if args.kind == "vocab":
        k_list = _parse_k_list(args.k_list, allow_immediate=False)
        rows = sweep_vocab(cfg, k_list, args.out, limit=args.limit)
        for row in rows:
            print(f"K={row['codebook_size']:<6} joint_ppl={row['joint_ppl']:.4f}")
    else:
        k_list = _parse_k_list(args.k_list, allow_immediate=True)
        rows = sweep_activation(cfg, k_list, args.out, limit=args.limit)
        for row in rows:
            flag = " (incomplete activation)" if row["incomplete_activation"] else ""
            print(f"k={row['activation']!s:<10} score={row['score']:.4f}{flag}")
    print(f"tables under {args.out}")
    return 0


def cmd_compare(args) -> int:
    cfg = _base_config(args)
    summary = compare_three_way(cfg, args.k, args.out, limit=args.limit)

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
    print(f"tables under {args.out}")
    return 0


def cmd_plot(args) -> int:
    points = trajectory(args.metrics)
    keys = [k.strip() for k in args.series.split(",") if k.strip()]
    if not keys:
        raise ValueError("--series must name at least one record key")
    series = []
    for key in keys:
        pts = [
            (float(p["step"]), float(p[key]))
            for p in points
            if p.get(key) is not None
        ]
        if not pts:
            raise ValueError(f"series {key!r} has no points in {args.metrics}")
        series.append((key, pts))
    out = Path(args.out) if args.out else Path(args.metrics).with_suffix(".svg")
    emit_chart(series, out, title=args.title, x_label="step", y_label=", ".join(keys))
    print(f"wrote {out}")
    return 0


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except (ValueError, SamplingError, CorruptCheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures: locks, numerics, I/O
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
