"""Decoding tests: guidance identities, sampling semantics, the three
generation modes, and schedule-restricted emission."""

import numpy as np
import pytest
import torch

from uniar import infer, prompt, tok
from uniar.infer import SamplingConfig, SamplingError
from uniar.model import ModelConfig, init_params
from uniar.vocab import ActivationState, VocabLayout

L = VocabLayout(300, 64)


@pytest.fixture
def flat_model(small_model):
    """Uniform logits: every allowed token equally likely."""
    with torch.no_grad():
        small_model.head.zero_()
    return small_model


@pytest.fixture
def codebook():
    rng = np.random.default_rng(0)
    return tok.VisualCodebook(rng.uniform(0, 255, size=(64, 48)), fit_seed=0)


def test_sampling_config_validation():
    with pytest.raises(ValueError):
        SamplingConfig(temperature=0.0)
    with pytest.raises(ValueError):
        SamplingConfig(top_k=0)
    with pytest.raises(ValueError):
        SamplingConfig(max_new_tokens=-1)
    assert SamplingConfig(max_new_tokens=0).max_new_tokens == 0


def test_cfg_logits_identities():
    cond = torch.tensor([3.0, 1.0])
    uncond = torch.tensor([2.0, 5.0])
    assert infer.cfg_logits(cond, uncond, 0.0) is uncond
    assert infer.cfg_logits(cond, uncond, 1.0) is cond
    guided = infer.cfg_logits(cond, uncond, 5.0)
    assert guided[0].item() == pytest.approx(2.0 + 5.0 * (3.0 - 2.0))
    assert guided[0].item() == 7.0
    with pytest.raises(ValueError, match="shapes differ"):
        infer.cfg_logits(cond, torch.zeros(3), 2.0)


def test_sample_next_greedy_ties_to_lowest():
    rng = infer.sampling_rng(SamplingConfig())
    logits = torch.tensor([1.0, 2.0, 2.0, 0.5])
    assert infer.sample_next(logits, SamplingConfig(greedy=True), None, rng) == 1


def test_sample_next_respects_mask():
    rng = infer.sampling_rng(SamplingConfig())
    logits = torch.tensor([9.0, 5.0, 1.0])
    allowed = np.array([False, False, True])
    scfg = SamplingConfig(greedy=True)
    assert infer.sample_next(logits, scfg, allowed, rng) == 2
    with pytest.raises(SamplingError, match="no tokens allowed"):
        infer.sample_next(logits, scfg, np.zeros(3, dtype=bool), rng)
    with pytest.raises(ValueError, match="mask shape"):
        infer.sample_next(logits, scfg, np.ones(4, dtype=bool), rng)
    with pytest.raises(ValueError, match="1-D"):
        infer.sample_next(torch.zeros(2, 3), scfg, None, rng)


def test_sample_next_frequencies_match_softmax():
    logits = torch.log(torch.tensor([1.0, 2.0, 3.0]))
    rng = infer.sampling_rng(SamplingConfig(seed=11))
    scfg = SamplingConfig()
    n = 30000
    counts = np.bincount(
        [infer.sample_next(logits, scfg, None, rng) for _ in range(n)], minlength=3
    )
    for i, p in enumerate((1 / 6, 2 / 6, 3 / 6)):
        sigma = (n * p * (1 - p)) ** 0.5
        assert abs(counts[i] - n * p) <= 3 * sigma, (i, counts)


def test_sample_next_top_k():
    logits = torch.tensor([5.0, 4.0, 4.0, 2.0])
    rng = infer.sampling_rng(SamplingConfig(seed=3))
    scfg = SamplingConfig(top_k=2)
    draws = {infer.sample_next(logits, scfg, None, rng) for _ in range(500)}
    # stable sort keeps the first of the tied 4.0s, so only ids 0 and 1 survive
    assert draws == {0, 1}


def test_sample_next_shift_invariance():
    logits = torch.tensor([0.3, -1.2, 2.0, 0.0])
    scfg = SamplingConfig(seed=5)
    a_rng = infer.sampling_rng(scfg)
    b_rng = infer.sampling_rng(scfg)
    a = [infer.sample_next(logits, scfg, None, a_rng) for _ in range(50)]
    b = [infer.sample_next(logits + 100.0, scfg, None, b_rng) for _ in range(50)]
    assert a == b


def test_decode_session(small_model):
    ids = [L.sos, 5, 6, L.eos]
    session = infer.DecodeSession(small_model, ids[:2])
    assert session.pos == 2
    with torch.no_grad():
        full = small_model(torch.tensor([ids]))[0]
    assert torch.allclose(session.last_logits, full[1], rtol=1e-5, atol=1e-6)
    session.advance(ids[2])
    assert session.pos == 3
    assert torch.allclose(session.last_logits, full[2], rtol=1e-5, atol=1e-6)
    with pytest.raises(ValueError):
        infer.DecodeSession(small_model, [])


# ---------------------------------------------------------------------------
# Text generation.


def test_generate_text_zero_budget(small_model):
    assert infer.generate_text(small_model, [L.sos], SamplingConfig(max_new_tokens=0), L) == []


def test_generate_text_greedy_budget_and_mask(flat_model):
    # uniform logits, greedy: lowest allowed id (0, textual) every step
    out = infer.generate_text(flat_model, [L.sos], SamplingConfig(greedy=True, max_new_tokens=7), L)
    assert out == [0] * 7


def test_generate_text_stops_at_eos(flat_model):
    # seed 1 draws EOS before the budget under uniform logits
    out = infer.generate_text(flat_model, [L.sos], SamplingConfig(max_new_tokens=50, seed=1), L)
    assert len(out) < 50
    assert all(L.is_textual(t) for t in out)


def test_generate_text_matches_uncached_reference(small_model):
    scfg = SamplingConfig(greedy=True, max_new_tokens=8)
    out = infer.generate_text(small_model, [L.sos, 17], scfg, L)

    allowed = np.zeros(L.total_size, dtype=bool)
    allowed[: L.text_size] = True
    allowed[L.eos] = True
    ref, ids = [], [L.sos, 17]
    rng = infer.sampling_rng(scfg)
    for _ in range(8):
        with torch.no_grad():
            logits = small_model(torch.tensor([ids]))[0, -1]
        t = infer.sample_next(logits, scfg, allowed, rng)
        if t == L.eos:
            break
        ref.append(t)
        ids.append(t)
    assert out == ref


# ---------------------------------------------------------------------------
# Image generation.


def test_generate_image_shapes(small_model, codebook):
    scfg = SamplingConfig(max_new_tokens=16, seed=2)
    grid, image = infer.generate_image(small_model, [4, 5], scfg, L, codebook, 16)
    assert grid.shape == (4, 4)
    assert ((grid >= L.text_size) & (grid < L.text_size + 64)).all()
    assert image.shape == (16, 16, 3) and image.dtype == np.uint8
    assert np.array_equal(image, tok.dequantize(codebook, grid - L.text_size))


def test_generate_image_rejects_non_square(small_model, codebook):
    with pytest.raises(ValueError, match="square"):
        infer.generate_image(small_model, [4], SamplingConfig(), L, codebook, 15)


def test_generate_image_scale_one_equals_cond_only(small_model, codebook):
    scfg = SamplingConfig(greedy=True, cfg_scale=1.0)
    grid, _ = infer.generate_image(small_model, [4, 5], scfg, L, codebook, 9)

    session = infer.DecodeSession(small_model, [L.sos, 4, 5, L.soi])
    allowed = np.zeros(L.total_size, dtype=bool)
    allowed[L.text_size : L.text_size + 64] = True
    rng = infer.sampling_rng(scfg)
    ref = []
    for _ in range(9):
        t = infer.sample_next(session.last_logits, scfg, allowed, rng)
        ref.append(t)
        session.advance(t)
    assert grid.reshape(-1).tolist() == ref


def test_generate_image_empty_caption_is_single_stream(small_model, codebook):
    scfg = SamplingConfig(greedy=True, cfg_scale=5.0)
    grid, _ = infer.generate_image(small_model, [], scfg, L, codebook, 9)

    session = infer.DecodeSession(small_model, [L.sos, L.soi])
    allowed = np.zeros(L.total_size, dtype=bool)
    allowed[L.text_size : L.text_size + 64] = True
    rng = infer.sampling_rng(scfg)
    ref = []
    for _ in range(9):
        t = infer.sample_next(session.last_logits, scfg, allowed, rng)
        ref.append(t)
        session.advance(t)
    assert grid.reshape(-1).tolist() == ref


def test_generate_image_restricted_to_activated(small_model, codebook):
    act = ActivationState.periodic(L, 1, seed=9)
    for _ in range(5):
        act.tick()
    assert len(act.activated) == 5
    scfg = SamplingConfig(seed=4, cfg_scale=2.0)
    grid, _ = infer.generate_image(small_model, [4], scfg, L, codebook, 16, act=act)
    assert set(grid.reshape(-1).tolist()) <= act.activated


def test_generate_image_requires_activated_codes(small_model, codebook):
    act = ActivationState.periodic(L, 10, seed=0)  # nothing activated yet
    with pytest.raises(SamplingError, match="activated"):
        infer.generate_image(small_model, [4], SamplingConfig(), L, codebook, 16, act=act)


# ---------------------------------------------------------------------------
# Mixed generation.


def test_generate_mixed_validation(small_model):
    with pytest.raises(ValueError):
        infer.generate_mixed(small_model, [L.sos], SamplingConfig(), L, 0)


def test_generate_mixed_without_visual_reduces_to_text(flat_model):
    act = ActivationState.periodic(L, 10, seed=0)
    for seed in range(8):
        scfg = SamplingConfig(max_new_tokens=12, seed=seed)
        out = infer.generate_mixed(flat_model, [L.sos], scfg, L, 4, act=act)
        segs = prompt.parse_interleaved(out, L)
        assert all(kind == "text" for kind, _ in segs)


def test_generate_mixed_outputs_always_parse(flat_model):
    image_runs = 0
    for seed in range(120):
        scfg = SamplingConfig(max_new_tokens=24, seed=seed)
        out = infer.generate_mixed(flat_model, [L.sos], scfg, L, 4)
        assert out[0] == L.sos and out[-1] == L.eos
        segs = prompt.parse_interleaved(out, L)
        for kind, ids in segs:
            if kind == "image":
                image_runs += 1
                assert len(ids) == 4  # images are emitted atomically
    assert image_runs > 0


def test_generate_mixed_budget_forces_eos(flat_model):
    scfg = SamplingConfig(max_new_tokens=3, seed=0, greedy=True)
    out = infer.generate_mixed(flat_model, [L.sos], scfg, L, 4)
    # greedy uniform never picks EOS on its own; the budget appends it
    assert out[-1] == L.eos
    assert len(out) <= 1 + 3 + 2 + 4  # prefix + budget (+ atomic image slack)
