"""Training: flat run configuration, toy-world assembly, the AdamW/cosine
optimizer stack, exact-ratio task mixing, and the staged training loop.

Stages: "text_pretrain" (language only), "unified_pretrain" (all three task
kinds with the visual-token activation schedule), "sft" (chat-templated
instruction tuning). Each stage restarts its own warmup+cosine schedule.
Per-step order: schedule tick, batch mix, schedule masking, packing, loss,
clipped AdamW update.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_mod
from . import tok as tok_mod
from .ckpt import load_checkpoint, save_checkpoint
from .model import ModelConfig, Transformer, init_params, loss_and_grads
from .prompt import (
    UnifiedSequence,
    drop_caption,
    format_gen,
    format_text,
    format_und,
    pack,
    sft_template,
)
from .vocab import ActivationState, VocabLayout, mask_sequence

STAGES = ("text_pretrain", "unified_pretrain", "sft")
MIX_KINDS = ("text", "und", "gen")

SFT_TEXT_INSTRUCTION = "write"
SFT_UND_INSTRUCTION = "describe"
SFT_GEN_PREFIX = "draw "

_RUN_SALT = 0x5EED


@dataclass(frozen=True)
class RunConfig:
    """Everything one stage needs, flat so it maps 1:1 onto key=value files."""

    stage: str = "unified_pretrain"
    seed: int = 0
    # optimization
    peak_lr: float = 1e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_steps: int = 200
    total_steps: int = 20000
    batch_size: int = 32
    data_ratio: tuple[int, int, int] = (3, 2, 5)
    activation: int | str = "immediate"
    caption_drop_p: float = 0.1
    # model dims
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_hidden: int = 512
    max_seq_len: int = 256
    norm_eps: float = 1e-5
    rope_base: float = 10000.0
    # toy corpus dims
    grid_size: int = 4
    patch_size: int = 4
    bpe_merges: int = 200
    codebook_size: int = 64
    n_text: int = 2000
    n_pairs: int = 2000
    # plumbing
    row_len: int = 64
    log_every: int = 1
    checkpoint_every: int = 0  # 0: final checkpoint only
    threads: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 <= warmup ({self.warmup_steps}) < total ({self.total_steps})"
            )
        ratio = tuple(int(r) for r in self.data_ratio)
        object.__setattr__(self, "data_ratio", ratio)
        if len(ratio) != 3 or min(ratio) < 0 or max(ratio) == 0:
            raise ValueError(f"data_ratio must be 3 non-negative ints, not all zero: {ratio}")
        if not 0.0 <= self.caption_drop_p <= 1.0:
            raise ValueError(f"caption_drop_p must be in [0, 1], got {self.caption_drop_p}")
        if self.activation != "immediate":
            k = int(self.activation)
            if k < 1:
                raise ValueError(f"activation period must be >= 1, got {k}")
            object.__setattr__(self, "activation", k)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.row_len > self.max_seq_len:
            raise ValueError(
                f"row_len {self.row_len} exceeds max_seq_len {self.max_seq_len}"
            )
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            mlp_hidden=self.mlp_hidden,
            max_seq_len=self.max_seq_len,
            norm_eps=self.norm_eps,
            rope_base=self.rope_base,
        )

    def digest(self) -> str:
        """Hex digest over every field except the seed."""
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "seed"}
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:8]

    def run_name(self) -> str:
        return f"{self.stage}-{self.digest()}-s{self.seed}"

    @classmethod
    def text_pretrain(cls, **kw) -> "RunConfig":
        kw.setdefault("data_ratio", (1, 0, 0))
        return cls(stage="text_pretrain", **kw)

    @classmethod
    def unified_pretrain(cls, **kw) -> "RunConfig":
        return cls(stage="unified_pretrain", **kw)

    @classmethod
    def sft(cls, **kw) -> "RunConfig":
        kw.setdefault("peak_lr", 3e-5)
        kw.setdefault("warmup_steps", 40)
        kw.setdefault("total_steps", 2000)
        kw.setdefault("batch_size", 16)
        kw.setdefault("data_ratio", (2, 6, 2))
        return cls(stage="sft", **kw)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def config_from_dict(d: dict) -> RunConfig:
    """Strict construction: unknown keys are a hard error; values coerce from
    strings (data_ratio as "a:b:c", activation as an int or "immediate")."""
    unknown = sorted(set(d) - set(_FIELD_TYPES))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    kw = {}
    for key, raw in d.items():
        kw[key] = _coerce(key, raw)
    return RunConfig(**kw)


def _coerce(key: str, raw):
    if key == "data_ratio":
        if isinstance(raw, str):
            parts = raw.split(":")
            if len(parts) != 3:
                raise ValueError(f"data_ratio must be 'a:b:c', got {raw!r}")
            return tuple(int(p) for p in parts)
        return tuple(int(p) for p in raw)
    if key == "activation":
        if raw == "immediate":
            return "immediate"
        return int(raw)
    if key == "stage":
        return str(raw)
    target = _FIELD_TYPES[key]
    if "int" in str(target):
        return int(raw)
    if "float" in str(target):
        return float(raw)
    return raw


def read_config_file(path) -> RunConfig:
    """Flat key=value text config; '#' starts a comment; blank lines ignored."""
    d = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in d:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            d[key] = value
    return config_from_dict(d)


def write_config_file(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        for fld in fields(RunConfig):
            value = getattr(cfg, fld.name)
            if fld.name == "data_ratio":
                value = ":".join(str(v) for v in value)
            f.write(f"{fld.name} = {value}\n")


# ---------------------------------------------------------------------------
# Toy world assembly.


@dataclass(frozen=True)
class PairSample:
    scene: corpus_mod.Scene
    caption: str
    image: np.ndarray
    codes: tuple[int, ...]  # unified visual ids, row-major


@dataclass
class World:
    layout: VocabLayout
    text_tok: tok_mod.TextTokenizer
    codebook: tok_mod.VisualCodebook
    grid_size: int
    patch_size: int
    image_len: int
    chat: bool  # True when datasets are chat-templated (sft stage)
    datasets: dict[str, list[UnifiedSequence]]  # train split, keys MIX_KINDS
    held: dict[str, list[UnifiedSequence]]
    pairs_train: list[PairSample]
    pairs_held: list[PairSample]
    text_train: list[str]
    text_held: list[str]


_world_cache: dict = {}


def _world_key(cfg: RunConfig):
    return (
        cfg.seed,
        cfg.n_text,
        cfg.n_pairs,
        cfg.bpe_merges,
        cfg.codebook_size,
        cfg.grid_size,
        cfg.patch_size,
        cfg.stage == "sft",
    )


def build_world(cfg: RunConfig, use_cache: bool = True) -> World:
    """Generate the corpus, fit both tokenizers, and wrap every sample.

    Depends only on seed + corpus fields (+ whether the stage chat-wraps), so
    every stage of a pipeline sees the same tokenizers and vocab layout.
    Every 10th sample (by generation seed) is held out for evaluation.
    """
    key = _world_key(cfg)
    if use_cache and key in _world_cache:
        return _world_cache[key]

    sentences = corpus_mod.gen_text_corpus(cfg.seed, cfg.n_text)
    pair_seeds = [cfg.seed * 1_000_000 + i for i in range(cfg.n_pairs)]
    scenes = [corpus_mod.gen_scene(s, cfg.grid_size) for s in pair_seeds]
    captions = [corpus_mod.caption(sc, s) for sc, s in zip(scenes, pair_seeds)]
    images = [corpus_mod.render(sc, cfg.patch_size) for sc in scenes]

    bpe_corpus = list(sentences) + list(captions)
    skeletons = (
        f"User:{SFT_TEXT_INSTRUCTION}\nAssistant:",
        f"User:{SFT_UND_INSTRUCTION}\nAssistant:",
        f"User:{SFT_GEN_PREFIX}\nAssistant:",
    )
    bpe_corpus.extend(skeletons * max(1, cfg.n_pairs // 50))
    text_tok = tok_mod.train_bpe(bpe_corpus, cfg.bpe_merges)

    train_idx = [i for i in range(cfg.n_pairs) if i % 10 != 0]
    fit_images = [images[i] for i in train_idx[:400]]
    patches = np.concatenate(
        [corpus_mod.extract_cells(im, cfg.patch_size) for im in fit_images]
    ).astype(np.float64)
    codebook = tok_mod.fit_codebook(patches, cfg.codebook_size, cfg.seed)

    layout = VocabLayout(text_tok.vocab_size, cfg.codebook_size)
    image_len = cfg.grid_size * cfg.grid_size

    pairs = []
    for scene, cap, image in zip(scenes, captions, images):
        codes = tok_mod.quantize(codebook, image).reshape(-1)
        unified = tuple(int(c) + layout.text_size for c in codes)
        pairs.append(PairSample(scene, cap, image, unified))

    chat = cfg.stage == "sft"
    enc = text_tok.encode

    def text_seq(sentence: str) -> UnifiedSequence:
        if chat:
            ids = enc(sft_template([(SFT_TEXT_INSTRUCTION, sentence)]))
        else:
            ids = enc(sentence)
        return format_text(ids, layout)

    def und_seq(p: PairSample) -> UnifiedSequence:
        if chat:
            ids = enc(sft_template([(SFT_UND_INSTRUCTION, p.caption)]))
        else:
            ids = enc(p.caption)
        return format_und(p.codes, ids, layout, image_len)

    def gen_seq(p: PairSample) -> UnifiedSequence:
        if chat:
            ids = enc(sft_template([(SFT_GEN_PREFIX + p.caption, "")]))
        else:
            ids = enc(p.caption)
        return format_gen(ids, p.codes, layout, image_len)

    def split(items):
        held = [x for i, x in enumerate(items) if i % 10 == 0]
        train = [x for i, x in enumerate(items) if i % 10 != 0]
        return train, held

    text_train, text_held = split(sentences)
    pairs_train, pairs_held = split(pairs)
    world = World(
        layout=layout,
        text_tok=text_tok,
        codebook=codebook,
        grid_size=cfg.grid_size,
        patch_size=cfg.patch_size,
        image_len=image_len,
        chat=chat,
        datasets={
            "text": [text_seq(s) for s in text_train],
            "und": [und_seq(p) for p in pairs_train],
            "gen": [gen_seq(p) for p in pairs_train],
        },
        held={
            "text": [text_seq(s) for s in text_held],
            "und": [und_seq(p) for p in pairs_held],
            "gen": [gen_seq(p) for p in pairs_held],
        },
        pairs_train=pairs_train,
        pairs_held=pairs_held,
        text_train=text_train,
        text_held=text_held,
    )
    longest = max(
        len(s) for ds in list(world.datasets.values()) + list(world.held.values()) for s in ds
    )
    if longest > cfg.row_len:
        raise ValueError(
            f"longest sample ({longest} ids) exceeds row_len {cfg.row_len}"
        )
    if use_cache:
        _world_cache[key] = world
    return world


# ---------------------------------------------------------------------------
# Optimizer stack.


def lr_at(cfg: RunConfig, t: int) -> float:
    """Linear warmup to peak over warmup_steps, then cosine to peak/10."""
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    peak, warm, total = cfg.peak_lr, cfg.warmup_steps, cfg.total_steps
    if warm > 0 and t < warm:
        return peak * t / warm
    floor = peak / 10.0
    if t >= total:
        return floor
    frac = (t - warm) / (total - warm)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def init(cls, model: Transformer) -> "OptState":
        zeros = {
            name: torch.zeros_like(p, memory_format=torch.contiguous_format)
            for name, p in model.named_parameters()
        }
        return cls(
            m={k: t.clone() for k, t in zeros.items()},
            v={k: t.clone() for k, t in zeros.items()},
        )

    def as_dict(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict) -> "OptState":
        return cls(m=d["m"], v=d["v"], step=d["step"])


def global_grad_norm(model: Transformer) -> float:
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(p.grad.pow(2).sum())
    return math.sqrt(total)


def clip_grads_(model: Transformer, max_norm: float) -> float:
    """Scale all gradients jointly so the global L2 norm is at most max_norm.

    Returns the pre-clip norm. The scale factor is exactly max_norm / norm
    (no epsilon), so a norm-10 gradient with clip 1 scales by exactly 0.1.
    """
    norm = global_grad_norm(model)
    if not math.isfinite(norm):
        bad = [
            name
            for name, p in model.named_parameters()
            if p.grad is not None and not torch.isfinite(p.grad).all()
        ]
        raise FloatingPointError(f"non-finite gradients in: {', '.join(bad) or 'norm'}")
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        with torch.no_grad():
            for p in model.parameters():
                if p.grad is not None:
                    p.grad.mul_(scale)
    return norm


def adamw_step(
    model: Transformer,
    opt: OptState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.95),
    eps: float = 1e-8,
) -> None:
    """Bias-corrected AdamW with decoupled weight decay."""
    b1, b2 = betas
    opt.step += 1
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = p.grad
            if g is None:
                continue
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            m, v = opt.m[name], opt.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)


# ---------------------------------------------------------------------------
# Batch mixing.


def ratio_split(n: int, ratio: tuple[int, int, int]) -> tuple[int, ...]:
    """Largest-remainder split of n items by the given ratio (ties to the
    earlier component), exact whenever n * r_i divides evenly."""
    total = sum(ratio)
    raw = [n * r / total for r in ratio]
    base = [int(x) for x in raw]
    remainder = n - sum(base)
    order = sorted(range(len(ratio)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:remainder]:
        base[i] += 1
    return tuple(base)


def _draw_indices(rng: np.random.Generator, counts, sizes) -> list[tuple[str, int]]:
    chosen: list[tuple[str, int]] = []
    for kind, count in zip(MIX_KINDS, counts):
        if count == 0:
            continue
        size = sizes[kind]
        if size == 0:
            raise ValueError(f"data_ratio requests {kind!r} samples but dataset is empty")
        for idx in rng.integers(size, size=count):
            chosen.append((kind, int(idx)))
    perm = rng.permutation(len(chosen))
    return [chosen[i] for i in perm]


def mix_batch(
    cfg: RunConfig,
    world: World,
    data_rng: np.random.Generator,
    drop_rng: np.random.Generator,
) -> list[UnifiedSequence]:
    """Exact-ratio batch of samples; text->image samples may lose their
    caption (classifier-free guidance's unconditional stream)."""
    counts = ratio_split(cfg.batch_size, cfg.data_ratio)
    sizes = {kind: len(world.datasets[kind]) for kind in MIX_KINDS}
    batch = []
    for kind, idx in _draw_indices(data_rng, counts, sizes):
        seq = world.datasets[kind][idx]
        if kind == "gen" and cfg.caption_drop_p > 0:
            seq = drop_caption(seq, cfg.caption_drop_p, drop_rng, world.layout)
        batch.append(seq)
    return batch


def data_stream_digest(cfg: RunConfig, sizes: dict[str, int], n_steps: int) -> str:
    """Digest of the sample-selection stream (kind + index per slot, in order)
    for n_steps batches; runs differing only in masking or codebook content
    produce identical digests."""
    rng = np.random.default_rng(rng_streams(cfg).data)
    counts = ratio_split(cfg.batch_size, cfg.data_ratio)
    h = hashlib.sha256()
    for t in range(1, n_steps + 1):
        for kind, idx in _draw_indices(rng, counts, sizes):
            h.update(f"{t}:{kind}:{idx};".encode())
    return h.hexdigest()


@dataclass
class Streams:
    data: np.random.SeedSequence
    drop: np.random.SeedSequence
    act_seed: int
    init_seed: int


def rng_streams(cfg: RunConfig) -> Streams:
    """The run's independent RNG streams, all derived from cfg.seed."""
    root = np.random.SeedSequence([_RUN_SALT, cfg.seed])
    data, drop, act, init = root.spawn(4)
    return Streams(
        data=data,
        drop=drop,
        act_seed=int(act.generate_state(1, np.uint64)[0]),
        init_seed=int(init.generate_state(1, np.uint64)[0]),
    )


def new_activation_state(cfg: RunConfig, layout: VocabLayout, act_seed: int) -> ActivationState:
    if cfg.activation == "immediate":
        return ActivationState.immediate(layout, act_seed)
    return ActivationState.periodic(layout, int(cfg.activation), act_seed)


# ---------------------------------------------------------------------------
# Training loop.


@dataclass
class StepStats:
    loss_total: float
    loss_text: float | None
    loss_und: float | None
    loss_gen: float | None
    lr: float
    activation_fraction: float
    wall_ms: float


def train_step(
    model: Transformer,
    opt: OptState,
    act: ActivationState,
    cfg: RunConfig,
    world: World,
    data_rng: np.random.Generator,
    drop_rng: np.random.Generator,
) -> StepStats:
    t0 = time.perf_counter()
    act.tick()
    batch = mix_batch(cfg, world, data_rng, drop_rng)
    masked = [mask_sequence(s, act) for s in batch]
    packed = pack(masked, cfg.row_len, world.layout)
    loss, stats = loss_and_grads(model, packed)
    clip_grads_(model, cfg.grad_clip)
    adamw_step(model, opt, lr_at(cfg, act.step), cfg.weight_decay)
    und = stats.kind_mean("image_to_text")
    gen_sum = stats.kind_sums.get("text_to_image", 0.0) + stats.kind_sums.get(
        "unconditional_image", 0.0
    )
    gen_n = stats.kind_counts.get("text_to_image", 0) + stats.kind_counts.get(
        "unconditional_image", 0
    )
    return StepStats(
        loss_total=loss,
        loss_text=stats.kind_mean("text_only"),
        loss_und=und,
        loss_gen=gen_sum / gen_n if gen_n else None,
        lr=lr_at(cfg, act.step),
        activation_fraction=act.activation_fraction(),
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


@dataclass
class RunResult:
    run_dir: Path
    checkpoint: Path
    metrics: Path
    config_digest: str
    final_loss: float
    world: World


def metrics_record(step: int, stage: str, s: StepStats) -> dict:
    return {
        "step": step,
        "stage": stage,
        "loss_total": s.loss_total,
        "loss_text": s.loss_text,
        "loss_und": s.loss_und,
        "loss_gen": s.loss_gen,
        "ppl": math.exp(s.loss_total),
        "lr": s.lr,
        "activation_fraction": s.activation_fraction,
        "wall_ms": s.wall_ms,
    }


def run_stage(
    cfg: RunConfig,
    out_dir=None,
    warm: str | Path | None = None,
    world: World | None = None,
    runs_root: str | Path = "runs",
) -> RunResult:
    """Train one stage end to end, writing metrics and checkpoints.

    `warm` names a donor checkpoint: for unified_pretrain it warm-starts all
    shared weights and redraws the visual/special embeddings; for sft it
    continues from the full donor parameters. Deterministic: identical config
    and seed reproduce identical checkpoints and metric values (wall_ms aside).
    """
    torch.set_num_threads(cfg.threads)
    run_dir = Path(out_dir) if out_dir is not None else Path(runs_root) / cfg.run_name()
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        lock_fd = open(lock, "x")
    except FileExistsError:
        raise RuntimeError(
            f"{run_dir} is locked by another process (stale? remove {lock})"
        ) from None
    try:
        world = world or build_world(cfg)
        streams = rng_streams(cfg)
        data_rng = np.random.default_rng(streams.data)
        drop_rng = np.random.default_rng(streams.drop)
        act = new_activation_state(cfg, world.layout, streams.act_seed)

        donor = None
        if warm is not None:
            prev = load_checkpoint(warm)
            if prev.layout != world.layout:
                raise ValueError(
                    f"warm checkpoint layout {prev.layout} != run layout {world.layout}"
                )
            if prev.config != cfg.model_config():
                raise ValueError(
                    f"warm checkpoint dims {prev.config} != run dims {cfg.model_config()}"
                )
            donor = prev.model
        if cfg.stage == "sft" and donor is not None:
            model = donor
        else:
            model = init_params(
                cfg.model_config(), world.layout, streams.init_seed, warm_text=donor
            )
        opt = OptState.init(model)

        write_config_file(cfg, run_dir / "config.txt")
        world.text_tok.save(run_dir / "tokenizer.txt")
        tok_mod.save_codebook(world.codebook, run_dir / "codebook.bin")

        metrics_path = run_dir / "metrics.jsonl"
        final_loss = float("nan")
        with open(metrics_path, "w") as mf:
            for t in range(1, cfg.total_steps + 1):
                stats = train_step(model, opt, act, cfg, world, data_rng, drop_rng)
                final_loss = stats.loss_total
                if t % cfg.log_every == 0 or t == cfg.total_steps:
                    mf.write(json.dumps(metrics_record(t, cfg.stage, stats)) + "\n")
                if cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                    save_checkpoint(
                        run_dir / f"step-{t:06d}.ckpt",
                        model,
                        step=t,
                        stage=cfg.stage,
                        activation=act.state_dict(),
                    )
        final = run_dir / "final.ckpt"
        save_checkpoint(
            final,
            model,
            step=cfg.total_steps,
            stage=cfg.stage,
            activation=act.state_dict(),
            opt=opt.as_dict(),
        )
        return RunResult(run_dir, final, metrics_path, cfg.digest(), final_loss, world)
    finally:
        lock_fd.close()
        lock.unlink(missing_ok=True)
