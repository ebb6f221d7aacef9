"""Decoding: KV-cached sessions, classifier-free guidance for image tokens,
and the three generation modes (text, image, mixed interleaved).

Sampling arithmetic runs in float64 numpy regardless of model dtype so token
choices are reproducible bit-for-bit across runs with the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .model import Transformer
from .tok import VisualCodebook, dequantize
from .vocab import ActivationState, VocabLayout

_SAMPLE_SALT = 0x5A3F


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_k: int | None = None
    cfg_scale: float = 5.0
    max_new_tokens: int = 64
    seed: int = 0
    greedy: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")


def sampling_rng(scfg: SamplingConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_SAMPLE_SALT, scfg.seed]))


def cfg_logits(cond: torch.Tensor, uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """uncond + scale * (cond - uncond), with exact passthrough at 0 and 1 so
    the degenerate scales cannot pick up one-ulp drift."""
    if cond.shape != uncond.shape:
        raise ValueError(f"logit shapes differ: {tuple(cond.shape)} vs {tuple(uncond.shape)}")
    if scale == 0.0:
        return uncond
    if scale == 1.0:
        return cond
    return uncond + scale * (cond - uncond)


def sample_next(
    logits: torch.Tensor,
    scfg: SamplingConfig,
    allowed: np.ndarray | None,
    rng: np.random.Generator,
) -> int:
    """One token from a 1-D logit vector. `allowed` is a boolean keep-mask
    over the vocabulary (None keeps everything). Greedy breaks ties toward
    the lowest id; top-k keeps the k highest logits, ties likewise."""
    l = logits.detach().to(torch.float64).cpu().numpy().copy()
    if l.ndim != 1:
        raise ValueError(f"expected 1-D logits, got shape {l.shape}")
    if allowed is not None:
        if allowed.shape != l.shape:
            raise ValueError("allowed mask shape mismatch")
        if not allowed.any():
            raise SamplingError("no tokens allowed at this position")
        l[~allowed] = -np.inf
    if scfg.greedy:
        return int(np.argmax(l))
    l = l / scfg.temperature
    if scfg.top_k is not None and scfg.top_k < l.size:
        order = np.argsort(-l, kind="stable")
        cut = np.full_like(l, -np.inf)
        cut[order[: scfg.top_k]] = l[order[: scfg.top_k]]
        l = cut
    finite = l[np.isfinite(l)]
    if finite.size == 0:
        raise SamplingError("no tokens with finite probability")
    p = np.exp(l - finite.max())
    p = p / p.sum()
    return int(rng.choice(l.size, p=p))


class DecodeSession:
    """Incremental decoding over one prefix: prefill once, then one token at
    a time against the KV cache."""

    def __init__(self, model: Transformer, prefix_ids):
        prefix = list(prefix_ids)
        if not prefix:
            raise ValueError("prefix must contain at least one id")
        self.model = model
        self.last_logits, self._cache = model.prefill(prefix)
        self.pos = len(prefix)

    def advance(self, token_id: int) -> torch.Tensor:
        self.last_logits = self.model.decode_one(int(token_id), self.pos, self._cache)
        self.pos += 1
        return self.last_logits


def _visual_mask(layout: VocabLayout, act: ActivationState | None) -> np.ndarray:
    mask = np.zeros(layout.total_size, dtype=bool)
    visual = layout.visual_ids()
    mask[visual.start : visual.stop] = True
    if act is not None:
        mask &= act.active_lookup
    return mask


def _textual_mask(layout: VocabLayout) -> np.ndarray:
    mask = np.zeros(layout.total_size, dtype=bool)
    mask[: layout.text_size] = True
    return mask


def generate_text(
    model: Transformer,
    prefix_ids,
    scfg: SamplingConfig,
    layout: VocabLayout,
) -> list[int]:
    """Sample textual ids after the given prefix until EOS or the budget;
    returns the new textual ids only (EOS excluded)."""
    rng = sampling_rng(scfg)
    allowed = _textual_mask(layout)
    allowed[layout.eos] = True
    session = DecodeSession(model, prefix_ids)
    out: list[int] = []
    for _ in range(scfg.max_new_tokens):
        tok = sample_next(session.last_logits, scfg, allowed, rng)
        if tok == layout.eos:
            break
        out.append(tok)
        session.advance(tok)
    return out


def generate_image(
    model: Transformer,
    caption_ids,
    scfg: SamplingConfig,
    layout: VocabLayout,
    codebook: VisualCodebook,
    n_tokens: int,
    act: ActivationState | None = None,
):
    """Guided image sampling: the conditional stream sees the caption, the
    unconditional stream sees an empty prompt, both consume the same sampled
    visual prefix. Returns (grid of unified visual ids, decoded uint8 image).

    With an activation schedule in play only activated codes may be sampled.
    An empty caption collapses to plain unconditional sampling.
    """
    side = math.isqrt(n_tokens)
    if side * side != n_tokens:
        raise ValueError(f"n_tokens must be a perfect square, got {n_tokens}")
    caption = [int(i) for i in caption_ids]
    rng = sampling_rng(scfg)
    allowed = _visual_mask(layout, act)
    if not allowed.any():
        raise SamplingError("no visual tokens are activated yet")

    uncond_prefix = [layout.sos, layout.soi]
    if caption:
        cond = DecodeSession(model, [layout.sos, *caption, layout.soi])
        uncond = DecodeSession(model, uncond_prefix)
    else:
        cond = DecodeSession(model, uncond_prefix)
        uncond = None

    ids: list[int] = []
    for _ in range(n_tokens):
        if uncond is None:
            logits = cond.last_logits
        else:
            logits = cfg_logits(cond.last_logits, uncond.last_logits, scfg.cfg_scale)
        tok = sample_next(logits, scfg, allowed, rng)
        ids.append(tok)
        cond.advance(tok)
        if uncond is not None:
            uncond.advance(tok)

    grid = np.array(ids, dtype=np.int64).reshape(side, side)
    image = dequantize(codebook, grid - layout.text_size)
    return grid, image


def generate_mixed(
    model: Transformer,
    prefix_ids,
    scfg: SamplingConfig,
    layout: VocabLayout,
    n_image_tokens: int,
    act: ActivationState | None = None,
) -> list[int]:
    """Free interleaved generation without guidance. Text positions may emit
    textual ids, start an image, or stop; an image, once started, is emitted
    atomically (exactly n_image_tokens codes then the closing delimiter) even
    if that overshoots the budget, so the output always parses.

    Returns the full id sequence including the prefix and final EOS.
    """
    if n_image_tokens < 1:
        raise ValueError("n_image_tokens must be >= 1")
    rng = sampling_rng(scfg)
    visual_allowed = _visual_mask(layout, act)
    text_allowed = _textual_mask(layout)
    text_allowed[layout.soi] = True
    text_allowed[layout.eos] = True
    if not visual_allowed.any():
        # no image can be emitted; never offer to open one
        text_allowed[layout.soi] = False

    session = DecodeSession(model, prefix_ids)
    out = [int(i) for i in prefix_ids]
    emitted = 0
    while True:
        if emitted >= scfg.max_new_tokens:
            out.append(layout.eos)
            return out
        tok = sample_next(session.last_logits, scfg, text_allowed, rng)
        emitted += 1
        out.append(tok)
        if tok == layout.eos:
            return out
        session.advance(tok)
        if tok == layout.soi:
            for _ in range(n_image_tokens):
                code = sample_next(session.last_logits, scfg, visual_allowed, rng)
                out.append(code)
                session.advance(code)
            out.append(layout.eoi)
            session.advance(layout.eoi)
            emitted += n_image_tokens + 1
