"""Shared fixtures: synthetic story corpora and small model configurations."""

from __future__ import annotations

import random

import pytest
import torch

from gqvae.corpus import CharVocab, make_chunks
from gqvae.model import GQVAE, TrainConfig

WORDS = (
    "the a one little big red blue old happy tiny cat dog bird fox bear girl "
    "boy tree house garden sun moon star river hill ran sat saw found made "
    "liked wanted played jumped smiled looked went said was had and then but "
    "so because with near under over into again very really quite always never "
    "friend family morning night day story time home forest park town"
).split()


def make_story_corpus(n_chars: int, seed: int, n_words: int | None = None) -> str:
    """Deterministic tinystories-flavored text of roughly n_chars characters.

    `n_words` restricts the word bank to its first n entries; smaller banks give
    more repetitive text, which the compression-focused acceptance tests use so
    reconstruction is easy enough for the boundary pressure to dominate.
    """
    rng = random.Random(seed)
    words = WORDS if n_words is None else WORDS[:n_words]
    parts = []
    total = 0
    while total < n_chars:
        n = rng.randint(4, 12)
        s = " ".join(rng.choice(words) for _ in range(n)).capitalize() + ". "
        parts.append(s)
        total += len(s)
    return "".join(parts)


def tiny_config(**overrides) -> TrainConfig:
    """Small but structurally complete configuration for fast unit tests."""
    base = dict(
        d=16,
        codebook_size=8,
        max_token_len=4,
        chunk_len=8,
        enc_layers=1,
        enc_heads=2,
        gater_layers=1,
        gater_heads=2,
        batch_size=4,
        total_steps=4,
        warmup_steps=0,
        resample_interval=0,
        cache_capacity=64,
        log_interval=0,
        ckpt_interval=0,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def story_text() -> str:
    return make_story_corpus(20_000, seed=11)


@pytest.fixture(scope="session")
def story_vocab(story_text) -> CharVocab:
    return CharVocab.build([story_text])


@pytest.fixture()
def tiny_model(story_vocab) -> GQVAE:
    torch.manual_seed(0)
    return GQVAE(tiny_config(), story_vocab.size)


@pytest.fixture()
def story_chunks(story_text, story_vocab):
    return make_chunks([story_text], story_vocab, s_max=8)
