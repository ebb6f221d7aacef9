"""Shared fixtures: single-threaded torch, a small layout, and one tiny
trained world reused across the train/infer/eval tests."""

import pytest
import torch

from uniar.model import ModelConfig, init_params
from uniar.train import RunConfig, build_world
from uniar.vocab import VocabLayout

torch.set_num_threads(1)

TINY = dict(
    stage="unified_pretrain",
    seed=0,
    total_steps=6,
    warmup_steps=2,
    batch_size=8,
    n_text=80,
    n_pairs=80,
    bpe_merges=40,
    codebook_size=16,
    d_model=32,
    n_layers=2,
    n_heads=2,
    mlp_hidden=64,
    max_seq_len=96,
    row_len=96,
    activation="immediate",
)


@pytest.fixture(scope="session")
def tiny_cfg():
    return RunConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_world(tiny_cfg):
    return build_world(tiny_cfg)


@pytest.fixture
def layout():
    return VocabLayout(300, 64)


@pytest.fixture
def small_model(layout):
    cfg = ModelConfig(d_model=32, n_layers=2, n_heads=2, mlp_hidden=64, max_seq_len=96)
    return init_params(cfg, layout, seed=0)
