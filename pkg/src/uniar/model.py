"""Decoder-only transformer over the unified ID space.

Pre-norm RMS blocks, rotary attention, gated MLP. Two input embedding
tables: textual ids plus [SOS]/[EOS] live in the text table, visual ids plus
the multimodal specials ([SOI], [EOI], [MASK], PAD) in the auxiliary table.
The output head is untied and always spans the full unified space.

Packed rows carry a block map (0 = PAD) and sample-relative positions;
attention is causal within a block and never crosses blocks, so co-packed
samples cannot influence each other. PAD positions attend only to themselves
to keep every softmax row finite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .prompt import KINDS, PackedBatch, shifted_targets
from .vocab import SPECIALS, VocabLayout

_INIT_SALT = 0x1217


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    mlp_hidden: int = 512
    max_seq_len: int = 256
    norm_eps: float = 1e-5
    rope_base: float = 10000.0

    def __post_init__(self):
        if min(self.d_model, self.n_layers, self.n_heads, self.mlp_hidden) < 1:
            raise ValueError("model dimensions must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dim must be even for rotary positions")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def rms_norm(x: torch.Tensor, weight: torch.Tensor, eps: float) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * weight


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, dtype):
        super().__init__()
        d, h = cfg.d_model, cfg.mlp_hidden
        self.cfg = cfg
        self.attn_norm = nn.Parameter(torch.ones(d, dtype=dtype))
        self.wqkv = nn.Parameter(torch.empty(3 * d, d, dtype=dtype))
        self.wo = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.mlp_norm = nn.Parameter(torch.ones(d, dtype=dtype))
        self.w_gate_up = nn.Parameter(torch.empty(2 * h, d, dtype=dtype))
        self.w_down = nn.Parameter(torch.empty(d, h, dtype=dtype))

    def _qkv(self, x: torch.Tensor):
        cfg = self.cfg
        r, l, _ = x.shape
        qkv = F.linear(rms_norm(x, self.attn_norm, cfg.norm_eps), self.wqkv)
        q, k, v = qkv.split(cfg.d_model, dim=-1)
        shape = (r, l, cfg.n_heads, cfg.head_dim)
        return (t.view(shape).transpose(1, 2) for t in (q, k, v))

    def forward(self, x, cos, sin, allowed):
        q, k, v = self._qkv(x)
        q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.cfg.head_dim)
        scores = scores.masked_fill(~allowed, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        r, l = x.shape[0], x.shape[1]
        out = out.transpose(1, 2).reshape(r, l, self.cfg.d_model)
        x = x + F.linear(out, self.wo)
        return x + self._mlp(x)

    def _mlp(self, x):
        gate, up = F.linear(
            rms_norm(x, self.mlp_norm, self.cfg.norm_eps), self.w_gate_up
        ).chunk(2, dim=-1)
        return F.linear(F.silu(gate) * up, self.w_down)

    def forward_step(self, x, cos, sin, cache):
        """One new position; cache holds (k, v) of all previous positions."""
        q, k, v = self._qkv(x)
        q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
        if cache["k"] is not None:
            k = torch.cat((cache["k"], k), dim=2)
            v = torch.cat((cache["v"], v), dim=2)
        cache["k"], cache["v"] = k, v
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.cfg.head_dim)
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).reshape(1, 1, self.cfg.d_model)
        x = x + F.linear(out, self.wo)
        return x + self._mlp(x)


class Transformer(nn.Module):
    """Parameter declaration order (the checkpoint tensor order) is:
    text_embed, aux_embed, per block (attn_norm, wqkv, wo, mlp_norm,
    w_gate_up, w_down), final_norm, head."""

    def __init__(self, cfg: ModelConfig, layout: VocabLayout, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.layout = layout
        self.dtype_ = dtype
        d = cfg.d_model
        self.text_embed = nn.Parameter(torch.empty(layout.text_size + 2, d, dtype=dtype))
        self.aux_embed = nn.Parameter(
            torch.empty(layout.visual_size + len(SPECIALS) - 2, d, dtype=dtype)
        )
        self.blocks = nn.ModuleList(Block(cfg, dtype) for _ in range(cfg.n_layers))
        self.final_norm = nn.Parameter(torch.ones(d, dtype=dtype))
        self.head = nn.Parameter(torch.empty(layout.total_size, d, dtype=dtype))

        # ID -> (table, row) routing. [SOS]/[EOS] reuse the text table's two
        # extra rows; everything else non-textual lives in the aux table.
        total = layout.total_size
        use_text = torch.zeros(total, dtype=torch.bool)
        text_row = torch.zeros(total, dtype=torch.long)
        aux_row = torch.zeros(total, dtype=torch.long)
        for t in range(layout.text_size):
            use_text[t], text_row[t] = True, t
        use_text[layout.sos], text_row[layout.sos] = True, layout.text_size
        use_text[layout.eos], text_row[layout.eos] = True, layout.text_size + 1
        for v in layout.visual_ids():
            aux_row[v] = v - layout.text_size
        for i, sid in enumerate((layout.soi, layout.eoi, layout.mask, layout.pad)):
            aux_row[sid] = layout.visual_size + i
        self.register_buffer("use_text", use_text, persistent=False)
        self.register_buffer("text_row", text_row, persistent=False)
        self.register_buffer("aux_row", aux_row, persistent=False)
        inv_freq = cfg.rope_base ** (
            -torch.arange(0, cfg.head_dim, 2, dtype=torch.float64) / cfg.head_dim
        )
        self.register_buffer("inv_freq", inv_freq, persistent=False)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        sel = self.use_text[ids].unsqueeze(-1)
        return torch.where(
            sel, self.text_embed[self.text_row[ids]], self.aux_embed[self.aux_row[ids]]
        )

    def _angles(self, pos: torch.Tensor):
        angles = pos.to(torch.float64).unsqueeze(-1) * self.inv_freq
        cos = angles.cos().to(self.dtype_).unsqueeze(1)  # (R, 1, L, hd/2)
        sin = angles.sin().to(self.dtype_).unsqueeze(1)
        return cos, sin

    def forward(self, ids, block=None, pos=None) -> torch.Tensor:
        """Logits over the unified space, shape (rows, length, total_size).

        `block` is the packed-batch block map (0 = PAD); None means one
        sample per row. `pos` gives sample-relative positions; None means
        0..L-1 per row.
        """
        ids = _as_long(ids)
        r, l = ids.shape
        if l > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {l} exceeds max {self.cfg.max_seq_len}")
        if pos is None:
            pos = torch.arange(l).expand(r, l)
        else:
            pos = _as_long(pos)
        causal = torch.tril(torch.ones(l, l, dtype=torch.bool))
        if block is None:
            allowed = causal.view(1, 1, l, l).expand(r, 1, l, l)
        else:
            block = _as_long(block)
            same = (block.unsqueeze(2) == block.unsqueeze(1)) & (
                block.unsqueeze(2) != 0
            )
            allowed = (same & causal) | torch.eye(l, dtype=torch.bool)
            allowed = allowed.unsqueeze(1)
        cos, sin = self._angles(pos)
        h = self.embed(ids)
        for i, blk in enumerate(self.blocks):
            h = blk(h, cos, sin, allowed)
            if not torch.isfinite(h).all():
                raise FloatingPointError(f"non-finite activations after layer {i}")
        return F.linear(rms_norm(h, self.final_norm, self.cfg.norm_eps), self.head)

    # -- incremental decoding ------------------------------------------------

    def prefill(self, ids) -> tuple[torch.Tensor, list[dict]]:
        """Run a single prompt (1D ids), returning last logits and a KV cache."""
        ids = _as_long(ids).view(1, -1)
        cache = [{"k": None, "v": None} for _ in self.blocks]
        logits = None
        with torch.no_grad():
            for t in range(ids.shape[1]):
                logits = self._step(ids[:, t : t + 1], t, cache)
        return logits, cache

    def decode_one(self, token_id: int, pos: int, cache) -> torch.Tensor:
        """Append one token at sample position `pos`; returns its logits (1D)."""
        with torch.no_grad():
            return self._step(torch.tensor([[token_id]]), pos, cache)

    def _step(self, ids, pos: int, cache) -> torch.Tensor:
        if pos >= self.cfg.max_seq_len:
            raise ValueError(f"position {pos} exceeds max {self.cfg.max_seq_len}")
        cos, sin = self._angles(torch.tensor([[pos]]))
        h = self.embed(ids)
        for blk, entry in zip(self.blocks, cache):
            h = blk.forward_step(h, cos, sin, entry)
        logits = F.linear(rms_norm(h, self.final_norm, self.cfg.norm_eps), self.head)
        return logits[0, -1]


def _as_long(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.long()
    return torch.as_tensor(np.asarray(x), dtype=torch.long)


def init_params(
    cfg: ModelConfig,
    layout: VocabLayout,
    seed: int,
    dtype=torch.float32,
    warm_text: Transformer | None = None,
) -> Transformer:
    """Fresh model with normal(0, 0.02) weights (residual-output projections
    scaled by 1/sqrt(2 * n_layers)), norms at one, deterministic per seed.

    With `warm_text`, every parameter except the auxiliary embedding table is
    copied from the donor model; visual/special embeddings stay freshly drawn.
    """
    model = Transformer(cfg, layout, dtype=dtype)
    rng = np.random.default_rng(np.random.SeedSequence([_INIT_SALT, seed]))
    resid = 1.0 / math.sqrt(2.0 * cfg.n_layers)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("norm"):
                p.fill_(1.0)
                continue
            std = 0.02 * (resid if name.endswith(("wo", "w_down")) else 1.0)
            p.copy_(torch.from_numpy(rng.normal(0.0, std, tuple(p.shape))).to(dtype))
        if warm_text is not None:
            donor = dict(warm_text.named_parameters())
            for name, p in model.named_parameters():
                if name == "aux_embed":
                    continue
                if name not in donor or donor[name].shape != p.shape:
                    raise ValueError(f"warm start shape mismatch for {name}")
                p.copy_(donor[name].to(dtype))
    return model


def param_count(model: Transformer) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass
class LossStats:
    """Mean NLL over counted target positions, plus per-task-kind sums."""

    total: float
    n_targets: int
    kind_sums: dict[str, float]
    kind_counts: dict[str, int]

    def kind_mean(self, kind: str) -> float | None:
        n = self.kind_counts.get(kind, 0)
        return self.kind_sums[kind] / n if n else None


def sequence_loss(model: Transformer, batch: PackedBatch):
    """Mean next-token NLL over non-PAD targets of a packed batch.

    Returns (differentiable scalar, LossStats). PAD positions and cross-sample
    transitions are the only exclusions; special tokens are predicted like any
    other target.
    """
    targets_np, kinds_np = shifted_targets(batch)
    logits = model(batch.ids, batch.block, batch.pos)
    targets = torch.from_numpy(targets_np)
    valid = targets >= 0
    if not bool(valid.any()):
        raise ValueError("batch has no loss-counted targets")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    loss = nll[valid].mean()

    kinds = torch.from_numpy(kinds_np.astype(np.int64))
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    with torch.no_grad():
        for code, kind in enumerate(KINDS):
            sel = valid & (kinds == code)
            n = int(sel.sum())
            if n:
                sums[kind] = float(nll[sel].sum())
                counts[kind] = n
    stats = LossStats(float(loss.detach()), int(valid.sum()), sums, counts)
    return loss, stats


def loss_and_grads(model: Transformer, batch: PackedBatch):
    """Backward pass; gradients land in each parameter's .grad (overwritten,
    not accumulated). Returns (loss value, LossStats)."""
    model.zero_grad(set_to_none=True)
    loss, stats = sequence_loss(model, batch)
    loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
    return stats.total, stats
