from __future__ import annotations

import numpy as np
import pytest

from maskbench.encoder import Encoder, EncoderConfig, Vocab
from maskbench.synthdata import build_behavior_pairs, generate_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def vocab():
    return Vocab.default()


@pytest.fixture(scope="session")
def small_users():
    return generate_corpus(80, 3, seed=11, noise=0.0)


@pytest.fixture(scope="session")
def small_pairs(small_users):
    return build_behavior_pairs(small_users, 3, seed=11)


def tiny_encoder(vocab, **kw) -> Encoder:
    cfg = dict(vocab_size=len(vocab), d_model=8, n_heads=2, n_layers=2, d_ff=16, max_len=48, seed=3)
    cfg.update(kw)
    return Encoder(EncoderConfig(**cfg))
