"""Binary checkpoints.

Layout: 8-byte magic, u64 little-endian header length, JSON header (model
config, vocab layout, step, stage, activation-schedule state, tensor
manifest), then every tensor as little-endian 32-bit floats in declaration
order (optimizer moments, when present, follow the parameters in the same
order), and finally a SHA-256 checksum of everything before it. Loading
verifies the checksum before touching any tensor bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .model import ModelConfig, Transformer
from .vocab import VocabLayout

MAGIC = b"UACKPT01"


class CorruptCheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Transformer
    config: ModelConfig
    layout: VocabLayout
    step: int
    stage: str
    activation: dict | None
    opt: dict | None  # {"step": int, "m": {name: tensor}, "v": {name: tensor}}


def save_checkpoint(
    path,
    model: Transformer,
    *,
    step: int,
    stage: str,
    activation: dict | None = None,
    opt: dict | None = None,
) -> str:
    """Write a checkpoint; returns the hex content digest."""
    params = list(model.named_parameters())
    header = {
        "config": model.cfg.to_dict(),
        "layout": {
            "text_size": model.layout.text_size,
            "visual_size": model.layout.visual_size,
        },
        "step": int(step),
        "stage": stage,
        "activation": activation,
        "dtype": "float32",
        "params": [[name, list(p.shape)] for name, p in params],
        "has_opt": opt is not None,
        "opt_step": None if opt is None else int(opt["step"]),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    hasher = hashlib.sha256()
    with open(path, "wb") as f:

        def put(chunk: bytes):
            hasher.update(chunk)
            f.write(chunk)

        put(MAGIC)
        put(struct.pack("<Q", len(header_bytes)))
        put(header_bytes)
        for _, p in params:
            put(p.detach().numpy().astype("<f4").tobytes())
        if opt is not None:
            for name, _ in params:
                put(opt["m"][name].detach().numpy().astype("<f4").tobytes())
                put(opt["v"][name].detach().numpy().astype("<f4").tobytes())
        digest = hasher.digest()
        f.write(digest)
    return digest.hex()


def load_checkpoint(path, dtype=torch.float32) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8 + 32 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    offset = len(MAGIC)
    (header_len,) = struct.unpack_from("<Q", body, offset)
    offset += 8
    header = json.loads(body[offset : offset + header_len].decode("utf-8"))
    offset += header_len

    config = ModelConfig.from_dict(header["config"])
    layout = VocabLayout(**header["layout"])
    model = Transformer(config, layout, dtype=dtype)
    named = dict(model.named_parameters())

    def take(shape) -> torch.Tensor:
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        return torch.from_numpy(arr.copy()).to(dtype)

    with torch.no_grad():
        for name, shape in header["params"]:
            if name not in named or list(named[name].shape) != shape:
                raise CorruptCheckpointError(f"{path}: unexpected tensor {name} {shape}")
            named[name].copy_(take(shape))
    opt = None
    if header["has_opt"]:
        m, v = {}, {}
        for name, shape in header["params"]:
            m[name] = take(shape)
            v[name] = take(shape)
        opt = {"step": header["opt_step"], "m": m, "v": v}
    if offset != len(body):
        raise CorruptCheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return Checkpoint(
        model,
        config,
        layout,
        header["step"],
        header["stage"],
        header["activation"],
        opt,
    )
