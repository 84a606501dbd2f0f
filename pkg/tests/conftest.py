"""Shared fixtures and tiny-model helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from collective_el.corpus import Document, KnowledgeBase, MentionAnnotation, Vocabulary
from collective_el.encoder import EncoderConfig, init_params


def make_vocab(n_words: int = 30, extra: tuple[str, ...] = ()) -> Vocabulary:
    return Vocabulary(tokens=tuple(f"w{i:03d}" for i in range(n_words)) + extra)


def make_kb(vocab: Vocabulary, n_entities: int = 6, name_len: int = 2) -> KnowledgeBase:
    words = vocab.tokens
    entities = []
    for e in range(n_entities):
        name = " ".join(words[(e * name_len + k) % len(words)] for k in range(name_len))
        entities.append((f"E{e}", name))
    return KnowledgeBase(entities=tuple(entities))


def make_doc(doc_id: str, token_ids, spans_with_golds) -> Document:
    mentions = tuple(MentionAnnotation(i, j, eid) for (i, j), eid in spans_with_golds)
    return Document(doc_id=doc_id, tokens=tuple(token_ids), mentions=mentions)


def tiny_config(vocab_size: int, **kw) -> EncoderConfig:
    defaults = dict(
        hidden_dim=8,
        num_layers=1,
        num_heads=2,
        ffn_dim=16,
        max_seq_len=64,
        vocab_size=vocab_size,
        seed=0,
    )
    defaults.update(kw)
    return EncoderConfig(**defaults)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture
def small_world():
    """Vocabulary, KB, and initialized tiny params shared by inference tests."""
    vocab = make_vocab(30)
    kb = make_kb(vocab, n_entities=6)
    params = init_params(tiny_config(vocab.size))
    return vocab, kb, params
