"""Transformer tests: gradcheck against finite differences, packing isolation,
causality, embedding routing, incremental decoding, and loss bookkeeping."""

import math

import numpy as np
import pytest
import torch

from uniar import model as M
from uniar import prompt
from uniar.vocab import VocabLayout

L = VocabLayout(300, 64)
SMALL = VocabLayout(50, 8)
CFG = M.ModelConfig(d_model=16, n_layers=2, n_heads=2, mlp_hidden=32, max_seq_len=64)


def _seq(layout, n_text=4, n_img=4, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, layout.text_size, n_text)
    y = rng.integers(layout.text_size, layout.text_size + layout.visual_size, n_img)
    return prompt.format_und(y, x, layout, n_img)


def test_model_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(d_model=15, n_heads=2)
    with pytest.raises(ValueError, match="even"):
        M.ModelConfig(d_model=6, n_heads=2, n_layers=1, mlp_hidden=8)
    with pytest.raises(ValueError):
        M.ModelConfig(max_seq_len=1)
    assert M.ModelConfig().head_dim == 32


def test_uniform_logits_loss_is_log_vocab():
    net = M.init_params(CFG, L, seed=0, dtype=torch.float64)
    with torch.no_grad():
        net.head.zero_()
    batch = prompt.pack([_seq(L), prompt.format_text([7, 8, 9], L)], 32, L)
    loss, stats = M.sequence_loss(net, batch)
    expected = math.log(L.total_size)
    assert abs(float(loss.detach()) - expected) / expected < 1e-12
    assert stats.n_targets == sum(s.end - s.start - 1 for s in batch.samples)


def test_log_softmax_normalization():
    net = M.init_params(CFG, SMALL, seed=1, dtype=torch.float64)
    batch = prompt.pack([_seq(SMALL)], 16, SMALL)
    with torch.no_grad():
        logits = net(batch.ids, batch.block, batch.pos)
    probs = torch.softmax(logits, dim=-1)
    assert float((probs.sum(-1) - 1.0).abs().max()) < 1e-12


def test_gradcheck_against_finite_differences():
    net = M.init_params(CFG, SMALL, seed=2, dtype=torch.float64)
    batch = prompt.pack([_seq(SMALL, seed=1), prompt.format_text([3, 4], SMALL)], 16, SMALL)
    M.loss_and_grads(net, batch)
    analytic = {n: p.grad.clone() for n, p in net.named_parameters()}

    def loss_value():
        with torch.no_grad():
            loss, _ = M.sequence_loss(net, batch)
        return float(loss)

    rng = np.random.default_rng(0)
    eps = 1e-6
    for name, p in net.named_parameters():
        flat = p.data.view(-1)
        for idx in rng.integers(0, flat.numel(), 4):
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = loss_value()
            flat[idx] = orig - eps
            down = loss_value()
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = float(analytic[name].view(-1)[idx])
            denom = max(abs(fd), abs(an), 1e-8)
            assert abs(fd - an) / denom < 1e-4, f"{name}[{idx}]: fd={fd} an={an}"


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_packed_neighbor_isolation(dtype):
    net = M.init_params(CFG, SMALL, seed=3, dtype=dtype)
    a = _seq(SMALL, seed=10)
    b = _seq(SMALL, seed=11)
    b2 = _seq(SMALL, seed=12)
    assert b.ids != b2.ids
    first = prompt.pack([a, b], 32, SMALL)
    second = prompt.pack([a, b2], 32, SMALL)
    span = next(s for s in first.samples if first.ids[s.row, s.start : s.end].tolist() == list(a.ids))
    with torch.no_grad():
        la = net(first.ids, first.block, first.pos)[span.row, span.start : span.end]
        lb = net(second.ids, second.block, second.pos)[span.row, span.start : span.end]
    assert torch.equal(la, lb)


def test_packed_matches_standalone():
    net = M.init_params(CFG, SMALL, seed=4, dtype=torch.float64)
    a, b = _seq(SMALL, seed=20), prompt.format_text([1, 2, 3], SMALL)
    packed = prompt.pack([a, b], 32, SMALL)
    with torch.no_grad():
        together = net(packed.ids, packed.block, packed.pos)
        alone = net(torch.tensor([list(a.ids)]))[0]
    span = next(s for s in packed.samples if s.end - s.start == len(a.ids))
    assert torch.equal(together[span.row, span.start : span.end], alone)


def test_causality():
    net = M.init_params(CFG, SMALL, seed=5, dtype=torch.float64)
    ids = list(_seq(SMALL, seed=30).ids)
    changed = list(ids)
    changed[7] = (ids[7] + 1) % SMALL.text_size if ids[7] < SMALL.text_size else 0
    with torch.no_grad():
        base = net(torch.tensor([ids]))[0]
        after = net(torch.tensor([changed]))[0]
    assert torch.equal(base[:7], after[:7])
    assert not torch.equal(base[7:], after[7:])


def test_embed_routing():
    net = M.init_params(CFG, SMALL, seed=6)

    def row(tid):
        return net.embed(torch.tensor([[tid]]))[0, 0]

    assert torch.equal(row(17), net.text_embed[17])
    assert torch.equal(row(SMALL.sos), net.text_embed[SMALL.text_size])
    assert torch.equal(row(SMALL.eos), net.text_embed[SMALL.text_size + 1])
    assert torch.equal(row(SMALL.text_size + 3), net.aux_embed[3])
    for i, sid in enumerate((SMALL.soi, SMALL.eoi, SMALL.mask, SMALL.pad)):
        assert torch.equal(row(sid), net.aux_embed[SMALL.visual_size + i])


def test_init_determinism_and_seed_sensitivity():
    a = M.init_params(CFG, SMALL, seed=0)
    b = M.init_params(CFG, SMALL, seed=0)
    c = M.init_params(CFG, SMALL, seed=1)
    for (n, pa), pb, pc in zip(a.named_parameters(), b.parameters(), c.parameters()):
        assert torch.equal(pa, pb), n
        if not n.endswith("norm"):
            assert not torch.equal(pa, pc), n


def test_init_norms_and_residual_scaling():
    net = M.init_params(M.ModelConfig(64, 4, 4, 256, 64), SMALL, seed=0)
    assert torch.equal(net.final_norm, torch.ones(64))
    for blk in net.blocks:
        assert torch.equal(blk.attn_norm, torch.ones(64))
    with torch.no_grad():
        wo = torch.cat([b.wo.view(-1) for b in net.blocks])
        wqkv = torch.cat([b.wqkv.view(-1) for b in net.blocks])
        ratio = float(wo.std() / wqkv.std())
    assert abs(ratio - 1.0 / math.sqrt(2.0 * 4)) < 0.05


def test_warm_start_copies_all_but_aux():
    donor = M.init_params(CFG, SMALL, seed=0)
    warm = M.init_params(CFG, SMALL, seed=1, warm_text=donor)
    donor_params = dict(donor.named_parameters())
    for name, p in warm.named_parameters():
        if name == "aux_embed":
            assert not torch.equal(p, donor_params[name])
        else:
            assert torch.equal(p, donor_params[name]), name


def test_warm_start_shape_mismatch():
    donor = M.init_params(CFG, SMALL, seed=0)
    with pytest.raises(ValueError, match="shape mismatch"):
        M.init_params(CFG, VocabLayout(60, 8), seed=1, warm_text=donor)


def test_prefill_decode_matches_full_forward():
    net = M.init_params(CFG, SMALL, seed=7)
    ids = list(_seq(SMALL, seed=40).ids)
    with torch.no_grad():
        full = net(torch.tensor([ids]))[0]
    last, cache = net.prefill(ids[:6])
    assert torch.allclose(last, full[5], rtol=1e-5, atol=1e-6)
    assert int(last.argmax()) == int(full[5].argmax())
    for t in range(6, len(ids)):
        step = net.decode_one(ids[t], t, cache)
        assert torch.allclose(step, full[t], rtol=1e-5, atol=1e-6)
        assert int(step.argmax()) == int(full[t].argmax())


def test_forward_rejects_overlong_input():
    net = M.init_params(CFG, SMALL, seed=0)
    with pytest.raises(ValueError, match="exceeds"):
        net(torch.zeros(1, CFG.max_seq_len + 1, dtype=torch.long))
    _, cache = net.prefill([SMALL.sos])
    with pytest.raises(ValueError, match="exceeds"):
        net.decode_one(0, CFG.max_seq_len, cache)


def test_non_finite_params_are_named():
    net = M.init_params(CFG, SMALL, seed=0)
    with torch.no_grad():
        net.blocks[1].wqkv[0, 0] = float("nan")
    with pytest.raises(FloatingPointError, match="layer 1"):
        net(torch.tensor([[SMALL.sos, 1, SMALL.eos]]))


def test_sequence_loss_requires_targets():
    net = M.init_params(CFG, SMALL, seed=0)
    ids = np.full((1, 4), SMALL.pad, dtype=np.int64)
    empty = prompt.PackedBatch(
        ids,
        np.zeros((1, 4), dtype=np.int32),
        np.zeros((1, 4), dtype=np.int32),
        [],
        4,
        SMALL.pad,
    )
    with pytest.raises(ValueError, match="no loss-counted"):
        M.sequence_loss(net, empty)


def test_loss_stats_bookkeeping():
    net = M.init_params(CFG, SMALL, seed=8, dtype=torch.float64)
    seqs = [
        prompt.format_text([1, 2], SMALL),
        _seq(SMALL, seed=50),
        prompt.format_gen((), (SMALL.text_size,) * 4, SMALL, 4),
    ]
    batch = prompt.pack(seqs, 24, SMALL)
    loss, stats = M.sequence_loss(net, batch)
    assert set(stats.kind_counts) == {"text_only", "image_to_text", "unconditional_image"}
    assert sum(stats.kind_counts.values()) == stats.n_targets
    weighted = sum(stats.kind_sums.values()) / stats.n_targets
    assert abs(weighted - float(loss.detach())) < 1e-12
    assert stats.kind_mean("text_to_image") is None
    assert stats.kind_mean("text_only") == pytest.approx(
        stats.kind_sums["text_only"] / stats.kind_counts["text_only"]
    )


def test_unused_embedding_rows_get_zero_grad():
    net = M.init_params(CFG, SMALL, seed=9, dtype=torch.float64)
    batch = prompt.pack([prompt.format_text([1, 2, 3], SMALL)], 8, SMALL)
    M.loss_and_grads(net, batch)
    aux = net.aux_embed.grad
    assert aux is not None and float(aux.abs().sum()) == 0.0
    assert float(net.text_embed.grad[1].abs().sum()) > 0.0
    assert float(net.text_embed.grad[9].abs().sum()) == 0.0


def test_param_count():
    net = M.init_params(CFG, SMALL, seed=0)
    d, h, n = CFG.d_model, CFG.mlp_hidden, CFG.n_layers
    per_block = d + 3 * d * d + d * d + d + 2 * h * d + d * h
    expected = (
        (SMALL.text_size + 2) * d
        + (SMALL.visual_size + 4) * d
        + n * per_block
        + d
        + SMALL.total_size * d
    )
    assert M.param_count(net) == expected
