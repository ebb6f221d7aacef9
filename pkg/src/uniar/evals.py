"""Measurement and experiments: per-modality perplexity, metric trajectories,
the vocabulary-size and activation-speed sweeps, and the three-way comparison
of task-specific vs unified vs scheduled training.

All scoring is deterministic for a fixed checkpoint and seed. Held-out data
comes from the world split (every 10th generation seed, never trained on).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import torch

from . import corpus as corpus_mod
from .ckpt import load_checkpoint
from .infer import SamplingConfig, generate_image, generate_text
from .model import Transformer, sequence_loss
from .prompt import UnifiedSequence, pack, sft_template
from .train import (
    SFT_GEN_PREFIX,
    SFT_UND_INSTRUCTION,
    MIX_KINDS,
    RunConfig,
    World,
    build_world,
    data_stream_digest,
    read_config_file,
    run_stage,
)
from .vocab import ActivationState, VocabLayout, mask_sequence


@dataclass(frozen=True)
class EvalReport:
    text_ppl: float
    und_ppl: float
    gen_ppl: float
    und_accuracy: float
    gen_overall: float
    gen_axes: dict[str, float]
    step: int
    stage: str
    config_digest: str

    def __post_init__(self):
        for name in ("text_ppl", "und_ppl", "gen_ppl"):
            v = getattr(self, name)
            if not (math.isnan(v) or v >= 1.0):
                raise ValueError(f"{name} must be >= 1, got {v}")
        for name in ("und_accuracy", "gen_overall"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def to_dict(self) -> dict:
        return {
            "text_ppl": self.text_ppl,
            "und_ppl": self.und_ppl,
            "gen_ppl": self.gen_ppl,
            "und_accuracy": self.und_accuracy,
            "gen_overall": self.gen_overall,
            "gen_axes": dict(self.gen_axes),
            "step": self.step,
            "stage": self.stage,
            "config_digest": self.config_digest,
        }


def perplexity(
    model: Transformer,
    seqs: list[UnifiedSequence],
    layout: VocabLayout,
    row_len: int,
    act: ActivationState | None = None,
    kinds: tuple[str, ...] | None = None,
) -> float:
    """exp(mean NLL over non-padding target positions), with the evaluation
    -time activation state applied to visual ids before packing."""
    pool = [s for s in seqs if kinds is None or s.kind in kinds]
    if not pool:
        raise ValueError("no sequences left after the kind filter")
    if act is not None:
        pool = [mask_sequence(s, act) for s in pool]
    total = 0.0
    count = 0
    with torch.no_grad():
        for lo in range(0, len(pool), 64):
            batch = pack(pool[lo : lo + 64], row_len, layout)
            _, stats = sequence_loss(model, batch)
            total += stats.total * stats.n_targets
            count += stats.n_targets
    return math.exp(total / count)


def trajectory(metrics_path) -> list[dict]:
    """Ordered metric series from a run's JSON Lines log. Each point carries
    the logged losses plus derived per-modality perplexities. Corrupt lines
    and non-increasing steps are rejected with the offending line number."""
    points = []
    last_step = None
    with open(metrics_path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{metrics_path}:{lineno}: bad JSON ({e.msg})") from None
            if "step" not in rec:
                raise ValueError(f"{metrics_path}:{lineno}: record missing 'step'")
            step = rec["step"]
            if last_step is not None and step <= last_step:
                raise ValueError(
                    f"{metrics_path}:{lineno}: step {step} not after {last_step}"
                )
            last_step = step
            point = dict(rec)
            for kind in ("total", "text", "und", "gen"):
                loss = rec.get(f"loss_{kind}")
                point[f"ppl_{kind}"] = math.exp(loss) if loss is not None else None
            points.append(point)
    return points


def _und_prefix(world: World, pair) -> list[int]:
    layout = world.layout
    ids = [layout.sos, layout.soi, *pair.codes, layout.eoi]
    if world.chat:
        head = sft_template([(SFT_UND_INSTRUCTION, "")])
        ids.extend(world.text_tok.encode(head))
    return ids


def _gen_caption_ids(world: World, caption: str) -> list[int]:
    if world.chat:
        return list(world.text_tok.encode(sft_template([(SFT_GEN_PREFIX + caption, "")])))
    return list(world.text_tok.encode(caption))


def und_accuracy(
    model: Transformer,
    world: World,
    scfg: SamplingConfig | None = None,
    act: ActivationState | None = None,
    limit: int | None = None,
) -> float:
    """Greedy-decode a caption for each held-out image and score it against
    the true scene; unparseable output scores 0."""
    scfg = scfg or SamplingConfig(greedy=True, max_new_tokens=48)
    pairs = world.pairs_held[:limit]
    if not pairs:
        raise ValueError("no held-out pairs to score")
    hits = 0
    for pair in pairs:
        prefix = _und_prefix(world, pair)
        if act is not None:
            masked = [
                world.layout.mask if world.layout.is_visual(i) and i not in act.activated else i
                for i in prefix
            ]
            prefix = masked
        out = generate_text(model, prefix, scfg, world.layout)
        try:
            text = world.text_tok.decode(out)
            pred = corpus_mod.parse_caption(text)
        except (ValueError, corpus_mod.CaptionParseError):
            continue
        if corpus_mod.predicate_holds(pred, pair.scene.objects, world.grid_size):
            hits += 1
    return hits / len(pairs)


def gen_score(
    model: Transformer,
    world: World,
    scfg: SamplingConfig | None = None,
    act: ActivationState | None = None,
    limit: int | None = None,
) -> tuple[float, dict[str, float]]:
    """Guided image generation for each held-out caption, scored by the
    caption checker. Returns (overall satisfaction rate, per-axis rates)."""
    scfg = scfg or SamplingConfig()
    pairs = world.pairs_held[:limit]
    if not pairs:
        raise ValueError("no held-out pairs to score")
    overall = 0
    axes = {axis: 0 for axis in corpus_mod.CheckResult.AXES}
    for i, pair in enumerate(pairs):
        caption_ids = _gen_caption_ids(world, pair.caption)
        per_sample = replace(scfg, seed=scfg.seed + i)
        _, image = generate_image(
            model, caption_ids, per_sample, world.layout, world.codebook,
            world.image_len, act=act,
        )
        result = corpus_mod.check(pair.caption, image, world.patch_size)
        overall += result.ok
        for axis, value in result.axes().items():
            axes[axis] += value
    n = len(pairs)
    return overall / n, {axis: v / n for axis, v in axes.items()}


def load_run(run_dir):
    """(cfg, world, model, activation state, checkpoint) for a finished run."""
    run_dir = Path(run_dir)
    cfg = read_config_file(run_dir / "config.txt")
    world = build_world(cfg)
    ckpt = load_checkpoint(run_dir / "final.ckpt")
    act = None
    if ckpt.activation is not None:
        act = ActivationState.from_state_dict(world.layout, ckpt.activation)
    return cfg, world, ckpt.model, act, ckpt


def evaluate_run(
    run_dir,
    scfg: SamplingConfig | None = None,
    limit: int | None = 50,
) -> EvalReport:
    cfg, world, model, act, ckpt = load_run(run_dir)
    return evaluate(model, world, cfg, act=act, step=ckpt.step, stage=ckpt.stage,
                    scfg=scfg, limit=limit)


def evaluate(
    model: Transformer,
    world: World,
    cfg: RunConfig,
    act: ActivationState | None = None,
    step: int = 0,
    stage: str | None = None,
    scfg: SamplingConfig | None = None,
    limit: int | None = 50,
) -> EvalReport:
    held = world.held

    def ppl(kind: str) -> float:
        return perplexity(model, held[kind], world.layout, cfg.row_len, act=act)

    overall, axes = gen_score(model, world, scfg, act=act, limit=limit)
    greedy = SamplingConfig(greedy=True, max_new_tokens=48,
                            seed=scfg.seed if scfg else 0)
    return EvalReport(
        text_ppl=ppl("text"),
        und_ppl=ppl("und"),
        gen_ppl=ppl("gen"),
        und_accuracy=und_accuracy(model, world, greedy, act=act, limit=limit),
        gen_overall=overall,
        gen_axes=axes,
        step=step,
        stage=stage or cfg.stage,
        config_digest=cfg.digest(),
    )


# ---------------------------------------------------------------------------
# Sweeps and comparisons.


def write_rows(rows: list[dict], out_dir, name: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{name}.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    fieldnames = list(rows[0].keys())
    with open(out_dir / f"{name}.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})


def _stream_digest_for(cfg: RunConfig, world: World, n_steps: int = 50) -> str:
    sizes = {kind: len(world.datasets[kind]) for kind in MIX_KINDS}
    return data_stream_digest(cfg, sizes, min(cfg.total_steps, n_steps))


def sweep_vocab(
    base_cfg: RunConfig,
    k_list: list[int],
    out_dir,
    limit: int | None = 50,
) -> list[dict]:
    """Train a vanilla (immediate-activation) model per codebook size and
    record final held-out perplexities. Same seed and data stream throughout,
    isolating the vocabulary size."""
    if not k_list:
        raise ValueError("k_list must be nonempty")
    out_dir = Path(out_dir)
    rows = []
    for k in k_list:
        cfg = replace(base_cfg, codebook_size=int(k), activation="immediate")
        result = run_stage(cfg, runs_root=out_dir)
        world = result.world
        model = load_checkpoint(result.checkpoint).model
        held_all = world.held["text"] + world.held["und"] + world.held["gen"]
        rows.append({
            "codebook_size": int(k),
            "joint_ppl": perplexity(model, held_all, world.layout, cfg.row_len),
            "text_ppl": perplexity(model, world.held["text"], world.layout, cfg.row_len),
            "und_ppl": perplexity(model, world.held["und"], world.layout, cfg.row_len),
            "gen_ppl": perplexity(model, world.held["gen"], world.layout, cfg.row_len),
            "final_loss": result.final_loss,
            "stream_digest": _stream_digest_for(cfg, world),
            "run_dir": str(result.run_dir),
        })
    digests = {row["stream_digest"] for row in rows}
    if len(digests) != 1:
        raise RuntimeError(f"sweep runs drew different data streams: {digests}")
    write_rows(rows, out_dir, "sweep_vocab")
    return rows


def _minmax(values: list[float]) -> list[float]:
    lo, hi = min(values), max(values)
    if hi == lo:
        return [0.5] * len(values)
    return [(v - lo) / (hi - lo) for v in values]


def sweep_activation(
    base_cfg: RunConfig,
    k_list: list,
    out_dir,
    limit: int | None = 50,
) -> list[dict]:
    """Train once per activation speed (ints and/or "immediate") and score
    each run by the unweighted mean of min-max-normalized task metrics
    (inverse text perplexity, caption accuracy, generation check rate)."""
    if not k_list:
        raise ValueError("k_list must be nonempty")
    out_dir = Path(out_dir)
    rows = []
    for k in k_list:
        activation = "immediate" if k == "immediate" else int(k)
        cfg = replace(base_cfg, activation=activation)
        result = run_stage(cfg, runs_root=out_dir)
        world = result.world
        ckpt = load_checkpoint(result.checkpoint)
        model = ckpt.model
        act = ActivationState.from_state_dict(world.layout, ckpt.activation)
        incomplete = activation != "immediate" and activation * world.layout.visual_size > cfg.total_steps
        rows.append({
            "activation": activation,
            "text_ppl": perplexity(model, world.held["text"], world.layout, cfg.row_len, act=act),
            "und_accuracy": und_accuracy(model, world, act=act, limit=limit),
            "gen_overall": gen_score(model, world, act=act, limit=limit)[0],
            "incomplete_activation": bool(incomplete),
            "stream_digest": _stream_digest_for(cfg, world),
            "run_dir": str(result.run_dir),
        })
    inv_ppl = _minmax([1.0 / row["text_ppl"] for row in rows])
    und = _minmax([row["und_accuracy"] for row in rows])
    gen = _minmax([row["gen_overall"] for row in rows])
    for row, a, b, c in zip(rows, inv_ppl, und, gen):
        row["score"] = (a + b + c) / 3.0
    digests = {row["stream_digest"] for row in rows}
    if len(digests) != 1:
        raise RuntimeError(f"sweep runs drew different data streams: {digests}")
    write_rows(rows, out_dir, "sweep_activation")
    return rows


_COMPARE_NAMES = ("text_only", "und_only", "gen_only", "vanilla", "scheduled")


def compare_three_way(
    base_cfg: RunConfig,
    scheduled_k: int,
    out_dir,
    limit: int | None = 50,
) -> dict:
    """Five runs sharing seed/steps/backbone: three task-specific baselines,
    the vanilla unified mix, and the scheduled unified mix. Reports the raw
    5x3 metric table (None where a row never trained the task) plus relative
    declines of the two unified rows against the task-specific ones."""
    out_dir = Path(out_dir)
    ratios = {
        "text_only": (1, 0, 0),
        "und_only": (0, 1, 0),
        "gen_only": (0, 0, 1),
        "vanilla": base_cfg.data_ratio,
        "scheduled": base_cfg.data_ratio,
    }
    rows = []
    for name in _COMPARE_NAMES:
        activation = int(scheduled_k) if name == "scheduled" else "immediate"
        cfg = replace(base_cfg, data_ratio=ratios[name], activation=activation)
        result = run_stage(cfg, runs_root=out_dir)
        world = result.world
        ckpt = load_checkpoint(result.checkpoint)
        model, act = ckpt.model, ActivationState.from_state_dict(world.layout, ckpt.activation)
        r_text, r_und, r_gen = cfg.data_ratio
        rows.append({
            "name": name,
            "text_ppl": (
                perplexity(model, world.held["text"], world.layout, cfg.row_len, act=act)
                if r_text else None
            ),
            "und_accuracy": und_accuracy(model, world, act=act, limit=limit) if r_und else None,
            "gen_overall": gen_score(model, world, act=act, limit=limit)[0] if r_gen else None,
            "run_dir": str(result.run_dir),
        })
    by_name = {row["name"]: row for row in rows}

    def declines(row) -> dict:
        # positive decline = worse than the task-specific specialist
        out = {}
        text_base = by_name["text_only"]["text_ppl"]
        out["text_ppl"] = (row["text_ppl"] - text_base) / text_base
        for key, base_row in (("und_accuracy", "und_only"), ("gen_overall", "gen_only")):
            base = by_name[base_row][key]
            out[key] = (base - row[key]) / base if base else float("nan")
        return out

    summary = {
        "rows": rows,
        "declines": {
            "vanilla": declines(by_name["vanilla"]),
            "scheduled": declines(by_name["scheduled"]),
        },
    }
    write_rows(rows, out_dir, "compare")
    with open(out_dir / "compare_summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary
