"""Training-stack tests: config handling, schedule oracles, optimizer hand
checks, exact batch mixing, world building, and run determinism."""

import dataclasses
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from uniar import model as M
from uniar import train
from uniar.ckpt import load_checkpoint
from uniar.train import RunConfig
from uniar.vocab import VocabLayout

from conftest import TINY


def test_stage_defaults():
    text = RunConfig.text_pretrain()
    assert text.stage == "text_pretrain" and text.data_ratio == (1, 0, 0)
    uni = RunConfig.unified_pretrain()
    assert uni.data_ratio == (3, 2, 5)
    assert uni.peak_lr == 1e-4 and uni.warmup_steps == 200
    assert uni.total_steps == 20000 and uni.batch_size == 32
    sft = RunConfig.sft()
    assert sft.peak_lr == 3e-5 and sft.warmup_steps == 40
    assert sft.total_steps == 2000 and sft.batch_size == 16
    assert sft.data_ratio == (2, 6, 2)


@pytest.mark.parametrize(
    "kw",
    [
        dict(stage="finetune"),
        dict(warmup_steps=10, total_steps=10),
        dict(data_ratio=(0, 0, 0)),
        dict(data_ratio=(1, -1, 2)),
        dict(data_ratio=(1, 2)),
        dict(caption_drop_p=1.5),
        dict(activation=0),
        dict(batch_size=0),
        dict(row_len=300, max_seq_len=256),
        dict(log_every=0),
        dict(threads=0),
    ],
)
def test_run_config_validation(kw):
    with pytest.raises(ValueError):
        RunConfig(**kw)


def test_run_config_coerces_activation():
    assert RunConfig(activation="7").activation == 7
    assert RunConfig(activation="immediate").activation == "immediate"


def test_digest_ignores_seed():
    a = RunConfig(seed=0)
    b = dataclasses.replace(a, seed=99)
    c = dataclasses.replace(a, d_model=64)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()
    assert b.run_name() == f"unified_pretrain-{a.digest()}-s99"


def test_config_file_roundtrip(tmp_path):
    cfg = RunConfig(**TINY)
    path = tmp_path / "config.txt"
    train.write_config_file(cfg, path)
    assert train.read_config_file(path) == cfg


def test_config_file_comments_and_errors(tmp_path):
    path = tmp_path / "config.txt"
    path.write_text("# leading comment\n\nseed = 3  # trailing\nstage = sft\n")
    cfg = train.read_config_file(path)
    assert cfg.seed == 3 and cfg.stage == "sft"

    path.write_text("seed = 1\nseed = 2\n")
    with pytest.raises(ValueError, match="duplicate"):
        train.read_config_file(path)
    path.write_text("not a config line\n")
    with pytest.raises(ValueError, match="key=value"):
        train.read_config_file(path)
    path.write_text("data_ratio = 1:2\n")
    with pytest.raises(ValueError, match="a:b:c"):
        train.read_config_file(path)
    with pytest.raises(ValueError, match="unknown"):
        train.config_from_dict({"momentum": "0.9"})


def test_lr_schedule_oracle():
    cfg = RunConfig(peak_lr=1e-3, warmup_steps=100, total_steps=1000)
    peak, floor = 1e-3, 1e-4
    assert train.lr_at(cfg, 0) == 0.0
    assert train.lr_at(cfg, 50) == pytest.approx(peak / 2)
    assert train.lr_at(cfg, 100) == pytest.approx(peak)
    assert train.lr_at(cfg, 550) == pytest.approx((peak + floor) / 2)
    assert train.lr_at(cfg, 1000) == pytest.approx(floor)
    assert train.lr_at(cfg, 5000) == pytest.approx(floor)
    # independent formula at an arbitrary interior point
    t = 300
    frac = (t - 100) / 900
    expected = floor + (peak - floor) * 0.5 * (1 + math.cos(math.pi * frac))
    assert train.lr_at(cfg, t) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        train.lr_at(cfg, -1)


def test_lr_no_warmup_starts_at_peak():
    cfg = RunConfig(peak_lr=1e-3, warmup_steps=0, total_steps=100)
    assert train.lr_at(cfg, 0) == pytest.approx(1e-3)


@pytest.mark.parametrize(
    "n,ratio,expected",
    [
        (10, (3, 2, 5), (3, 2, 5)),
        (32, (3, 2, 5), (10, 6, 16)),
        (5, (1, 0, 0), (5, 0, 0)),
        (1, (1, 1, 0), (1, 0, 0)),  # remainder tie goes to the earlier kind
        (2, (1, 1, 1), (1, 1, 0)),
        (16, (2, 6, 2), (3, 10, 3)),
    ],
)
def test_ratio_split_cases(n, ratio, expected):
    assert train.ratio_split(n, ratio) == expected


@given(
    st.integers(1, 200),
    st.tuples(st.integers(0, 9), st.integers(0, 9), st.integers(0, 9)).filter(
        lambda r: sum(r) > 0
    ),
)
@settings(max_examples=200, deadline=None)
def test_ratio_split_properties(n, ratio):
    counts = train.ratio_split(n, ratio)
    assert sum(counts) == n
    total = sum(ratio)
    for c, r in zip(counts, ratio):
        assert abs(c - n * r / total) < 1.0
        if r == 0:
            assert c == 0


def _scalar_model():
    # one-parameter stand-in: adamw_step only needs named_parameters()
    class Holder(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))

    return Holder()


def test_adamw_two_step_hand_oracle():
    net = _scalar_model()
    opt = train.OptState.init(net)
    lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.95, 1e-8

    p = 1.0
    m = v = 0.0
    for g in (0.5, -0.3):
        net.w.grad = torch.tensor([g], dtype=torch.float64)
        train.adamw_step(net, opt, lr, wd, betas=(b1, b2), eps=eps)
        t = opt.step
        p *= 1.0 - lr * wd
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        c1, c2 = 1 - b1**t, 1 - b2**t
        p -= lr / c1 * m / (math.sqrt(v / c2) + eps)
        assert float(net.w.detach()) == pytest.approx(p, rel=1e-14)
    assert opt.step == 2


def test_adamw_zero_grad_only_decays():
    net = _scalar_model()
    with torch.no_grad():
        net.w.fill_(2.0)
    net.w.grad = torch.zeros(1, dtype=torch.float64)
    opt = train.OptState.init(net)
    train.adamw_step(net, opt, lr=0.1, weight_decay=0.01)
    assert float(net.w.detach()) == pytest.approx(2.0 * (1 - 0.1 * 0.01), rel=1e-15)
    assert float(opt.m["w"]) == 0.0 and float(opt.v["w"]) == 0.0


def test_clip_grads_exact_scale(small_model):
    for p in small_model.parameters():
        p.grad = torch.zeros_like(p)
    first = small_model.text_embed
    first.grad[0, 0], first.grad[0, 1] = 6.0, 8.0
    norm = train.clip_grads_(small_model, 1.0)
    assert norm == pytest.approx(10.0, rel=1e-12)
    assert float(first.grad[0, 0]) == pytest.approx(0.6, rel=1e-6)
    assert train.global_grad_norm(small_model) == pytest.approx(1.0, rel=1e-6)


def test_clip_grads_noop_below_threshold(small_model):
    for p in small_model.parameters():
        p.grad = torch.zeros_like(p)
    small_model.head.grad[0, 0] = 0.5
    before = small_model.head.grad.clone()
    norm = train.clip_grads_(small_model, 1.0)
    assert norm == pytest.approx(0.5)
    assert torch.equal(small_model.head.grad, before)


def test_clip_grads_rejects_non_finite(small_model):
    for p in small_model.parameters():
        p.grad = torch.zeros_like(p)
    small_model.head.grad[0, 0] = float("inf")
    with pytest.raises(FloatingPointError, match="head"):
        train.clip_grads_(small_model, 1.0)


def test_opt_state_roundtrip(small_model):
    opt = train.OptState.init(small_model)
    opt.step = 5
    opt.m["head"][0, 0] = 1.5
    back = train.OptState.from_dict(opt.as_dict())
    assert back.step == 5
    assert torch.equal(back.m["head"], opt.m["head"])


# ---------------------------------------------------------------------------
# Mixing and streams.


def test_mix_batch_exact_counts(tiny_cfg, tiny_world):
    cfg = dataclasses.replace(tiny_cfg, batch_size=10, data_ratio=(3, 2, 5), caption_drop_p=0.0)
    data_rng = np.random.default_rng(0)
    drop_rng = np.random.default_rng(1)
    for _ in range(20):
        batch = train.mix_batch(cfg, tiny_world, data_rng, drop_rng)
        kinds = [s.kind for s in batch]
        assert kinds.count("text_only") == 3
        assert kinds.count("image_to_text") == 2
        assert kinds.count("text_to_image") == 5


def test_mix_batch_caption_drop_produces_unconditional(tiny_cfg, tiny_world):
    cfg = dataclasses.replace(tiny_cfg, batch_size=10, data_ratio=(0, 0, 1), caption_drop_p=1.0)
    batch = train.mix_batch(
        cfg, tiny_world, np.random.default_rng(0), np.random.default_rng(1)
    )
    assert all(s.kind == "unconditional_image" for s in batch)


def test_draw_indices_empty_dataset_error():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="empty"):
        train._draw_indices(rng, (1, 0, 0), {"text": 0, "und": 5, "gen": 5})


def test_draw_indices_shuffles_kind_order():
    rng = np.random.default_rng(2)
    seen_orders = {
        tuple(k for k, _ in train._draw_indices(rng, (2, 2, 2), {"text": 9, "und": 9, "gen": 9}))
        for _ in range(50)
    }
    assert len(seen_orders) > 1


def test_rng_streams_depend_only_on_seed(tiny_cfg):
    a = train.rng_streams(tiny_cfg)
    b = train.rng_streams(dataclasses.replace(tiny_cfg, activation=3, total_steps=50))
    c = train.rng_streams(dataclasses.replace(tiny_cfg, seed=1))
    assert np.random.default_rng(a.data).integers(1 << 30) == np.random.default_rng(
        b.data
    ).integers(1 << 30)
    assert a.act_seed == b.act_seed and a.init_seed == b.init_seed
    assert a.act_seed != c.act_seed
    assert a.act_seed != a.init_seed


def test_data_stream_digest_ignores_activation(tiny_cfg):
    """The activation schedule must not disturb the data stream: runs that
    differ only in the schedule draw identical sample indices."""
    sizes = {"text": 72, "und": 72, "gen": 72}
    a = train.data_stream_digest(tiny_cfg, sizes, 40)
    b = train.data_stream_digest(
        dataclasses.replace(tiny_cfg, activation=5), sizes, 40
    )
    c = train.data_stream_digest(dataclasses.replace(tiny_cfg, seed=1), sizes, 40)
    assert a == b
    assert a != c


# ---------------------------------------------------------------------------
# World building.


def test_world_holdout_split(tiny_cfg, tiny_world):
    assert len(tiny_world.pairs_held) == tiny_cfg.n_pairs // 10
    assert len(tiny_world.pairs_train) == tiny_cfg.n_pairs - tiny_cfg.n_pairs // 10
    assert len(tiny_world.text_held) == tiny_cfg.n_text // 10
    for kind in train.MIX_KINDS:
        assert len(tiny_world.datasets[kind]) > 0
        assert len(tiny_world.held[kind]) > 0


def test_world_shapes(tiny_cfg, tiny_world):
    w = tiny_world
    assert w.image_len == tiny_cfg.grid_size**2
    assert w.layout.visual_size == tiny_cfg.codebook_size
    assert not w.chat
    for p in w.pairs_train[:5]:
        assert len(p.codes) == w.image_len
        assert all(w.layout.is_visual(c) for c in p.codes)
    for s in w.datasets["und"][:5]:
        assert s.kind == "image_to_text" and len(s.image_ids()) == w.image_len
    for s in w.datasets["gen"][:5]:
        assert s.kind == "text_to_image"


def test_world_cache(tiny_cfg, tiny_world):
    assert train.build_world(tiny_cfg) is tiny_world
    assert train.build_world(tiny_cfg, use_cache=False) is not tiny_world


def test_world_sft_chat_wrapping(tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, stage="sft")
    world = train.build_world(cfg)
    assert world.chat
    text = world.text_tok.decode(list(world.datasets["text"][0].text_ids()))
    assert text.startswith("User:write\nAssistant:")
    und = world.text_tok.decode(list(world.datasets["und"][0].text_ids()))
    assert und.startswith("User:describe\nAssistant:")
    gen = world.text_tok.decode(list(world.datasets["gen"][0].text_ids()))
    assert gen.startswith("User:draw ") and gen.endswith("\nAssistant:")


def test_world_rejects_overlong_samples(tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, row_len=20, max_seq_len=96)
    with pytest.raises(ValueError, match="row_len"):
        train.build_world(cfg, use_cache=False)


# ---------------------------------------------------------------------------
# Training steps and full stage runs.


def test_train_step_stats(tiny_cfg, tiny_world):
    streams = train.rng_streams(tiny_cfg)
    model = M.init_params(
        tiny_cfg.model_config(), tiny_world.layout, streams.init_seed
    )
    opt = train.OptState.init(model)
    act = train.new_activation_state(tiny_cfg, tiny_world.layout, streams.act_seed)
    data_rng = np.random.default_rng(streams.data)
    drop_rng = np.random.default_rng(streams.drop)
    stats = train.train_step(model, opt, act, tiny_cfg, tiny_world, data_rng, drop_rng)
    assert act.step == 1 and opt.step == 1
    assert stats.lr == pytest.approx(train.lr_at(tiny_cfg, 1))
    assert stats.activation_fraction == 1.0
    assert stats.loss_total > 0
    assert stats.loss_text is not None and stats.loss_und is not None
    rec = train.metrics_record(1, tiny_cfg.stage, stats)
    assert list(rec) == [
        "step",
        "stage",
        "loss_total",
        "loss_text",
        "loss_und",
        "loss_gen",
        "ppl",
        "lr",
        "activation_fraction",
        "wall_ms",
    ]
    assert rec["ppl"] == pytest.approx(math.exp(stats.loss_total))


def test_scheduled_step_masks_inactive_rows(tiny_cfg, tiny_world):
    cfg = dataclasses.replace(tiny_cfg, activation=1000)
    streams = train.rng_streams(cfg)
    model = M.init_params(cfg.model_config(), tiny_world.layout, streams.init_seed)
    opt = train.OptState.init(model)
    act = train.new_activation_state(cfg, tiny_world.layout, streams.act_seed)
    data_rng = np.random.default_rng(streams.data)
    drop_rng = np.random.default_rng(streams.drop)
    for _ in range(2):
        train.train_step(model, opt, act, cfg, tiny_world, data_rng, drop_rng)
    assert len(act.activated) == 0
    visual_rows = model.aux_embed.grad[: tiny_world.layout.visual_size]
    assert float(visual_rows.abs().sum()) == 0.0
    # the aux table stores specials after the visual rows; MASK (third) is
    # what every image position turned into, so its row does train
    mask_aux_row = tiny_world.layout.visual_size + 2
    assert float(model.aux_embed.grad[mask_aux_row].abs().sum()) > 0.0


def test_run_stage_deterministic(tiny_cfg, tiny_world, tmp_path):
    a = train.run_stage(tiny_cfg, out_dir=tmp_path / "a", world=tiny_world)
    b = train.run_stage(tiny_cfg, out_dir=tmp_path / "b", world=tiny_world)

    def records(path):
        rows = [json.loads(line) for line in open(path)]
        for row in rows:
            row.pop("wall_ms")
        return rows

    assert records(a.metrics) == records(b.metrics)
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert a.final_loss == b.final_loss
    assert (a.run_dir / "config.txt").exists()
    assert (a.run_dir / "tokenizer.txt").exists()
    assert (a.run_dir / "codebook.bin").exists()
    assert not (a.run_dir / ".lock").exists()


def test_run_stage_lock(tiny_cfg, tiny_world, tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").touch()
    with pytest.raises(RuntimeError, match="locked"):
        train.run_stage(tiny_cfg, out_dir=out, world=tiny_world)
    assert (out / ".lock").exists()  # the pre-existing lock stays


def test_run_stage_warm_start(tiny_cfg, tmp_path):
    text_cfg = dataclasses.replace(
        tiny_cfg, stage="text_pretrain", data_ratio=(1, 0, 0), total_steps=3
    )
    donor = train.run_stage(text_cfg, out_dir=tmp_path / "text")
    uni_cfg = dataclasses.replace(tiny_cfg, total_steps=3)
    result = train.run_stage(
        uni_cfg, out_dir=tmp_path / "uni", warm=donor.checkpoint
    )
    assert result.checkpoint.exists()
    wrong = dataclasses.replace(uni_cfg, d_model=16, n_heads=2)
    with pytest.raises(ValueError, match="dims"):
        train.run_stage(wrong, out_dir=tmp_path / "bad", warm=donor.checkpoint)


def test_run_stage_periodic_checkpoints(tiny_cfg, tiny_world, tmp_path):
    cfg = dataclasses.replace(tiny_cfg, checkpoint_every=2, total_steps=5)
    result = train.run_stage(cfg, out_dir=tmp_path / "periodic", world=tiny_world)
    names = sorted(p.name for p in result.run_dir.glob("step-*.ckpt"))
    assert names == ["step-000002.ckpt", "step-000004.ckpt"]
    mid = load_checkpoint(result.run_dir / "step-000002.ckpt")
    assert mid.step == 2 and mid.opt is None
