"""Analytic gradients vs central finite differences."""

from __future__ import annotations

import numpy as np
import pytest

from collective_el.corpus import KnowledgeBase
from collective_el.encoder import EncoderConfig, init_params
from collective_el.index_infer import NameTable
from collective_el.linker import CandidateSet
from collective_el.synth import GeneratorConfig, generate_synthetic_corpus
from collective_el.training import (
    MODES,
    MentionExample,
    SegmentExample,
    build_mention_examples,
    build_segment_examples,
    loss_and_grads,
)

EPS = 1e-5
MAX_SPAN_LEN = 3


def _world(vocab_size=24, n_entities=5):
    cfg = GeneratorConfig(
        entities=n_entities, docs=4, mentions_per_doc=2, vocab_size=vocab_size,
        gap_min=1, gap_max=3,
    )
    return generate_synthetic_corpus(cfg, seed=1)


def _fixed_rows(gold: int, m: int) -> tuple[int, ...]:
    return tuple(dict.fromkeys((gold, (gold + 1) % m, (gold + 2) % m)))


def _batch_for(mode: str, kb, docs):
    if mode == "per_mention":
        batch = build_mention_examples(docs[:2], kb, width=10)[:3]
        for ex in batch:
            ex.cand_set = CandidateSet(
                key=ex.key, rows=_fixed_rows(ex.gold_row, kb.size), gold_position=0
            )
        return batch
    batch = build_segment_examples(docs[:2], kb, max_mentions=8, max_tokens=40)
    for ex in batch:
        ex.cand_sets = [
            CandidateSet(key=k, rows=_fixed_rows(g, kb.size), gold_position=0)
            for k, g in zip(ex.keys, ex.gold_rows)
        ]
    return batch


def _fd_check(params, batch, mode, table, rng, coords_per_tensor=3):
    """Sampled central-difference check of every tensor's gradient."""
    loss, grads, _ = loss_and_grads(
        params, batch, mode, table, max_span_len=MAX_SPAN_LEN, joint_weight=0.7
    )
    assert np.isfinite(loss)

    def loss_at():
        value, _, _ = loss_and_grads(
            params, batch, mode, table,
            max_span_len=MAX_SPAN_LEN, joint_weight=0.7, want_grads=False,
        )
        return value

    worst = 0.0
    for name, tensor in params.tensors.items():
        flat = tensor.reshape(-1)
        n = flat.size
        picks = rng.choice(n, size=min(coords_per_tensor, n), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + EPS
            up = loss_at()
            flat[idx] = orig - EPS
            down = loss_at()
            flat[idx] = orig
            fd = (up - down) / (2 * EPS)
            analytic = grads[name].reshape(-1)[idx]
            tol = 1e-8 + 1e-4 * max(abs(analytic), abs(fd))
            gap = abs(analytic - fd)
            worst = max(worst, gap - tol)
            assert gap <= tol, f"{mode}/{name}[{idx}]: analytic={analytic} fd={fd}"
    return worst


@pytest.mark.parametrize("mode", MODES)
def test_every_tensor_gradient_matches_finite_differences(mode):
    kb, vocab, docs = _world()
    cfg = EncoderConfig(
        hidden_dim=6, num_layers=1, num_heads=2, ffn_dim=10,
        max_seq_len=48, vocab_size=vocab.size, seed=2,
    )
    params = init_params(cfg)
    table = NameTable.build(kb, vocab)
    rng = np.random.Generator(np.random.PCG64(0))
    _fd_check(params, _batch_for(mode, kb, docs), mode, table, rng)


def test_tied_encoder_gradients_match_finite_differences():
    kb, vocab, docs = _world()
    cfg = EncoderConfig(
        hidden_dim=4, num_layers=2, num_heads=1, ffn_dim=8,
        max_seq_len=48, vocab_size=vocab.size, seed=5, tie_encoders=True,
    )
    params = init_params(cfg)
    table = NameTable.build(kb, vocab)
    rng = np.random.Generator(np.random.PCG64(1))
    for mode in ("collective", "end_to_end_exhaustive"):
        _fd_check(params, _batch_for(mode, kb, docs), mode, table, rng, coords_per_tensor=2)


def test_detection_only_gradients_leave_candidate_stack_untouched():
    # single-candidate sets zero out the disambiguation term, so only the
    # span/tag heads and the mention stack should receive gradient
    kb, vocab, docs = _world()
    cfg = EncoderConfig(
        hidden_dim=6, num_layers=1, num_heads=2, ffn_dim=10,
        max_seq_len=48, vocab_size=vocab.size, seed=3,
    )
    params = init_params(cfg)
    table = NameTable.build(kb, vocab)
    batch = build_segment_examples(docs[:2], kb, max_mentions=8, max_tokens=40)
    for ex in batch:
        ex.cand_sets = [
            CandidateSet(key=k, rows=(g,), gold_position=0)
            for k, g in zip(ex.keys, ex.gold_rows)
        ]

    _, grads, _ = loss_and_grads(
        params, batch, "end_to_end_exhaustive", table, max_span_len=MAX_SPAN_LEN
    )
    assert any(grads[f"head.span.{w}"].any() for w in ("ws", "we", "wm"))
    assert all(not g.any() for n, g in grads.items() if n.startswith("cand."))

    _, grads, _ = loss_and_grads(
        params, batch, "end_to_end_bio", table, max_span_len=MAX_SPAN_LEN
    )
    assert grads["head.bio.w"].any() and grads["head.bio.b"].any()
    assert all(not g.any() for n, g in grads.items() if n.startswith("cand."))
