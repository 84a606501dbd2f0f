"""Training loop pieces: examples, losses, optimizer, and the full loop."""

from __future__ import annotations

import json

import numpy as np
import pytest

from collective_el.checkpoint import load_checkpoint, save_checkpoint
from collective_el.corpus import Document, MentionAnnotation
from collective_el.encoder import EncoderConfig, encode_sequence, init_params, mark_tokens
from collective_el.index_infer import NameTable, build_index, enumerate_spans, rank_rows
from collective_el.linker import (
    CandidateSet,
    TrainConfig,
    ce_loss,
    mention_detection_loss,
    mention_rep,
    mention_rep_meanpool,
    score,
    span_probability,
)
from collective_el.synth import GeneratorConfig, generate_synthetic_corpus, split_documents
from collective_el.training import (
    AdamW,
    DivergenceError,
    MentionExample,
    SegmentExample,
    _mention_rng,
    build_mention_examples,
    build_segment_examples,
    context_window,
    loss_and_grads,
    mine_all,
    rank_gold_mentions,
    train,
)
from conftest import make_doc, tiny_config


def _micro_world(seed=0):
    cfg = GeneratorConfig(entities=6, docs=10, mentions_per_doc=2, vocab_size=30)
    kb, vocab, docs = generate_synthetic_corpus(cfg, seed=seed)
    params = init_params(tiny_config(vocab_size=vocab.size))
    return kb, vocab, docs, params


# ------------------------------------------------------------ example builders

def test_context_window_centers_and_clamps():
    tokens = tuple(range(100, 120))
    win, span = context_window(tokens, (10, 11), width=6)
    assert win.tolist() == list(tokens[8:14])
    assert span == (2, 3)

    win, span = context_window(tokens, (0, 0), width=4)
    assert win.tolist() == list(tokens[:4])
    assert span == (0, 0)

    win, span = context_window(tokens, (19, 19), width=4)
    assert win.tolist() == list(tokens[16:])
    assert span == (3, 3)

    win, span = context_window(tokens, (5, 6), width=500)
    assert win.tolist() == list(tokens)
    assert span == (5, 6)

    with pytest.raises(ValueError):
        context_window(tokens, (3, 9), width=5)


def test_segment_examples_carry_absolute_keys():
    kb, vocab, _, _ = _micro_world()
    kb_ids = [kb.entity_id(r) for r in range(3)]
    doc = make_doc(
        "doc7",
        list(range(4, 24)),
        [((2, 3), kb_ids[0]), ((8, 8), kb_ids[1]), ((15, 16), kb_ids[2])],
    )
    exs = build_segment_examples([doc], kb, max_mentions=2, max_tokens=512)
    assert len(exs) == 2
    assert exs[0].keys == [("doc7", 2, 3), ("doc7", 8, 8)]
    assert exs[1].keys == [("doc7", 15, 16)]
    assert exs[1].base == 15
    assert exs[1].spans == [(0, 1)]
    np.testing.assert_array_equal(
        np.concatenate([exs[0].content_ids, exs[1].content_ids]), np.asarray(doc.tokens)
    )


def test_mention_examples_window_and_key():
    kb, vocab, docs, _ = _micro_world()
    exs = build_mention_examples(docs[:2], kb, width=8)
    assert len(exs) == 4
    for ex, m in zip(exs, [m for d in docs[:2] for m in d.mentions]):
        assert ex.window_ids.size <= 8
        i, j = ex.span
        doc = next(d for d in docs if d.doc_id == ex.key[0])
        np.testing.assert_array_equal(
            ex.window_ids[i : j + 1],
            np.asarray(doc.tokens[ex.key[1] : ex.key[2] + 1]),
        )


# ------------------------------------------------------------ loss composition

def _seg_example(doc, kb, cand_rows):
    return SegmentExample(
        doc_id=doc.doc_id,
        base=0,
        content_ids=np.asarray(doc.tokens, dtype=np.int64),
        spans=[(m.start, m.end) for m in doc.mentions],
        gold_rows=[kb.row_of(m.entity_id) for m in doc.mentions],
        keys=[(doc.doc_id, m.start, m.end) for m in doc.mentions],
        cand_sets=[
            CandidateSet(key=(doc.doc_id, m.start, m.end), rows=rows, gold_position=0)
            for m, rows in zip(doc.mentions, cand_rows)
        ],
    )


def test_single_candidate_collective_loss_is_zero_with_zero_grads():
    kb, vocab, docs, params = _micro_world()
    doc = docs[0]
    gold_rows = [kb.row_of(m.entity_id) for m in doc.mentions]
    ex = _seg_example(doc, kb, [(r,) for r in gold_rows])
    table = NameTable.build(kb, vocab)
    loss, grads, stats = loss_and_grads(params, [ex], "collective", table)
    assert loss == 0.0
    assert stats["n_mentions"] == len(doc.mentions)
    assert all(not g.any() for g in grads.values())


def test_collective_loss_recomposes_from_primitives():
    kb, vocab, docs, params = _micro_world()
    doc = docs[0]
    gold_rows = [kb.row_of(m.entity_id) for m in doc.mentions]
    cand_rows = [tuple(dict.fromkeys((r, (r + 1) % kb.size, (r + 2) % kb.size))) for r in gold_rows]
    ex = _seg_example(doc, kb, cand_rows)
    table = NameTable.build(kb, vocab)
    loss, _, stats = loss_and_grads(params, [ex], "collective", table, want_grads=False)

    # independent recomposition: encode once, project spans, score rows
    V = build_index(kb, vocab, params).matrix
    h = encode_sequence(params, mark_tokens(np.asarray(doc.tokens)))
    want = 0.0
    for (i, j), rows in zip(ex.spans, cand_rows):
        u = mention_rep(h, (i + 1, j + 1), params)
        scores = np.array([score(u, V[r]) for r in rows])
        want += ce_loss(scores, 0)
    want /= len(ex.spans)
    assert loss == pytest.approx(want, abs=1e-10)
    assert stats["disambiguation"] == pytest.approx(want, abs=1e-10)


def test_per_mention_loss_recomposes_from_primitives():
    kb, vocab, docs, params = _micro_world()
    doc = docs[0]
    m = doc.mentions[0]
    win, span = context_window(doc.tokens, (m.start, m.end), width=12)
    rows = (kb.row_of(m.entity_id), (kb.row_of(m.entity_id) + 3) % kb.size)
    ex = MentionExample(
        key=(doc.doc_id, m.start, m.end),
        window_ids=win,
        span=span,
        gold_row=rows[0],
        cand_set=CandidateSet(key=(), rows=rows, gold_position=0),
    )
    table = NameTable.build(kb, vocab)
    loss, _, _ = loss_and_grads(params, [ex], "per_mention", table, want_grads=False)

    V = build_index(kb, vocab, params).matrix
    h = encode_sequence(params, mark_tokens(win))
    u = mention_rep(h, (span[0] + 1, span[1] + 1), params)
    want = ce_loss(np.array([score(u, V[r]) for r in rows]), 0)
    assert loss == pytest.approx(want, abs=1e-10)


def test_exhaustive_joint_loss_recomposes_from_primitives():
    kb, vocab, docs, params = _micro_world()
    doc = docs[0]
    L = 3
    gold_rows = [kb.row_of(m.entity_id) for m in doc.mentions]
    cand_rows = [tuple(dict.fromkeys((r, (r + 1) % kb.size))) for r in gold_rows]
    ex = _seg_example(doc, kb, cand_rows)
    table = NameTable.build(kb, vocab)
    weight = 0.7
    loss, _, stats = loss_and_grads(
        params, [ex], "end_to_end_exhaustive", table,
        max_span_len=L, joint_weight=weight, want_grads=False,
    )

    V = build_index(kb, vocab, params).matrix
    h = encode_sequence(params, mark_tokens(np.asarray(doc.tokens)))
    content = h[1:-1]
    spans = enumerate_spans(content.shape[0], L)
    probs = np.array([span_probability(content, s, params, L) for s in spans])
    det = mention_detection_loss(probs, set(ex.spans), spans)
    dis = 0.0
    for (i, j), rows in zip(ex.spans, cand_rows):
        u = mention_rep_meanpool(h, (i + 1, j + 1))
        dis += ce_loss(np.array([score(u, V[r]) for r in rows]), 0)
    dis /= len(ex.spans)
    assert loss == pytest.approx(det + weight * dis, abs=1e-10)
    assert stats["detection"] == pytest.approx(det, abs=1e-10)
    assert stats["disambiguation"] == pytest.approx(dis, abs=1e-10)


def test_bio_joint_loss_recomposes_from_primitives():
    kb, vocab, docs, params = _micro_world()
    doc = docs[0]
    gold_rows = [kb.row_of(m.entity_id) for m in doc.mentions]
    ex = _seg_example(doc, kb, [(r,) for r in gold_rows])
    table = NameTable.build(kb, vocab)
    loss, _, stats = loss_and_grads(
        params, [ex], "end_to_end_bio", table, want_grads=False
    )

    h = encode_sequence(params, mark_tokens(np.asarray(doc.tokens)))
    content = h[1:-1]
    tags = np.zeros(content.shape[0], dtype=int)
    for i, j in ex.spans:
        tags[i] = 1
        tags[i + 1 : j + 1] = 2
    logits = content @ params.tensors["head.bio.w"].T + params.tensors["head.bio.b"]
    det = float(np.mean([ce_loss(logits[t], tags[t]) for t in range(len(tags))]))
    # single-candidate sets make the disambiguation term vanish
    assert stats["disambiguation"] == 0.0
    assert loss == pytest.approx(det, abs=1e-10)


def test_loss_and_grads_rejects_unknown_mode():
    kb, vocab, docs, params = _micro_world()
    table = NameTable.build(kb, vocab)
    with pytest.raises(ValueError, match="unknown mode"):
        loss_and_grads(params, [], "hybrid", table)


# ----------------------------------------------------------------- optimizer

def test_adamw_first_step_matches_hand_update():
    params = init_params(tiny_config(vocab_size=9))
    before = {n: t.copy() for n, t in params.tensors.items()}
    grads = {n: np.full_like(t, 0.25) for n, t in params.tensors.items()}
    opt = AdamW(params, learning_rate=0.1)
    opt.step(params, grads)
    # bias-corrected first step: m_hat = g, v_hat = g^2
    expect_delta = 0.1 * 0.25 / (0.25 + 1e-8)
    for name, t in params.tensors.items():
        np.testing.assert_allclose(before[name] - t, expect_delta, atol=1e-12)


def test_adamw_weight_decay_is_decoupled():
    params = init_params(tiny_config(vocab_size=9))
    before = {n: t.copy() for n, t in params.tensors.items()}
    zero = {n: np.zeros_like(t) for n, t in params.tensors.items()}
    opt = AdamW(params, learning_rate=0.1, weight_decay=0.5)
    opt.step(params, zero)
    for name, t in params.tensors.items():
        np.testing.assert_allclose(t, before[name] * (1.0 - 0.1 * 0.5), atol=1e-12)


def test_adamw_lr_scale_rescales_the_step():
    a = init_params(tiny_config(vocab_size=9))
    b = init_params(tiny_config(vocab_size=9))
    grads = {n: np.full_like(t, -0.5) for n, t in a.tensors.items()}
    opt_a = AdamW(a, learning_rate=0.2)
    opt_b = AdamW(b, learning_rate=0.1)
    opt_a.step(a, grads, lr_scale=0.5)
    opt_b.step(b, grads, lr_scale=1.0)
    for name in a.tensors:
        np.testing.assert_allclose(a.tensors[name], b.tensors[name], atol=1e-12)


def test_adamw_state_round_trip_resumes_identically():
    params = init_params(tiny_config(vocab_size=9))
    rng = np.random.Generator(np.random.PCG64(0))
    grads = [
        {n: rng.normal(size=t.shape) for n, t in params.tensors.items()} for _ in range(3)
    ]
    opt = AdamW(params, learning_rate=0.05)
    opt.step(params, grads[0])
    opt.step(params, grads[1])

    clone = init_params(tiny_config(vocab_size=9))
    for n in clone.tensors:
        clone.tensors[n] = params.tensors[n].copy()
    opt2 = AdamW(clone, learning_rate=0.05)
    opt2.load_state(opt.state_tensors(), opt.step_count)

    opt.step(params, grads[2])
    opt2.step(clone, grads[2])
    for name in params.tensors:
        np.testing.assert_array_equal(params.tensors[name], clone.tensors[name])


# --------------------------------------------------------------------- mining

def test_mention_rng_streams_are_deterministic_and_distinct():
    a = _mention_rng(3, 1, 5).integers(0, 1_000_000, size=4)
    b = _mention_rng(3, 1, 5).integers(0, 1_000_000, size=4)
    c = _mention_rng(3, 1, 6).integers(0, 1_000_000, size=4)
    d = _mention_rng(3, 2, 5).integers(0, 1_000_000, size=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


def test_mine_all_attaches_candidate_sets():
    kb, vocab, docs, params = _micro_world()
    cfg = TrainConfig(n_hard=2, n_random=2, seed=0)
    index = build_index(kb, vocab, params)

    segs = build_segment_examples(docs[:3], kb, max_mentions=8, max_tokens=62)
    mine_all(params, segs, "collective", index, cfg, epoch=0)
    for ex in segs:
        assert ex.cand_sets is not None and len(ex.cand_sets) == len(ex.spans)
        for cs, gold in zip(ex.cand_sets, ex.gold_rows):
            assert cs.rows[0] == gold
            assert len(cs.rows) == 5

    again = build_segment_examples(docs[:3], kb, max_mentions=8, max_tokens=62)
    mine_all(params, again, "collective", index, cfg, epoch=0)
    assert [cs.rows for ex in again for cs in ex.cand_sets] == [
        cs.rows for ex in segs for cs in ex.cand_sets
    ]

    ments = build_mention_examples(docs[:3], kb, width=12)
    mine_all(params, ments, "per_mention", index, cfg, epoch=0)
    assert all(ex.cand_set is not None and ex.cand_set.rows[0] == ex.gold_row for ex in ments)


# ---------------------------------------------------------------- gold ranking

def test_rank_gold_mentions_matches_manual_encoding():
    kb, vocab, docs, params = _micro_world()
    doc = docs[0]
    index = build_index(kb, vocab, params)
    preds = rank_gold_mentions(params, [doc], kb, index, "collective", topk=3)
    assert len(preds) == len(doc.mentions)

    h = encode_sequence(params, mark_tokens(np.asarray(doc.tokens)))
    for pred, m in zip(preds, doc.mentions):
        assert pred.key == (doc.doc_id, m.start, m.end)
        assert pred.gold == m.entity_id
        u = mention_rep(h, (m.start + 1, m.end + 1), params)
        rows, _ = rank_rows(u, index, 3)
        assert pred.ranked == tuple(kb.entity_id(int(r)) for r in rows)


def test_rank_gold_mentions_modes_cover_all_mentions():
    kb, vocab, docs, params = _micro_world()
    index = build_index(kb, vocab, params)
    n = sum(len(d.mentions) for d in docs)
    for mode in ("collective", "per_mention", "end_to_end_exhaustive"):
        preds = rank_gold_mentions(params, docs, kb, index, mode, topk=2)
        assert len(preds) == n
        assert all(len(p.ranked) == 2 for p in preds)


# ------------------------------------------------------------------ train loop

def _train_setup(tmp_path, tag, epochs=2, seed=0, resume_from=None):
    cfg = GeneratorConfig(entities=6, docs=12, mentions_per_doc=2, vocab_size=30)
    kb, vocab, docs = generate_synthetic_corpus(cfg, seed=0)
    splits = split_documents(docs, cfg)
    enc = EncoderConfig(
        hidden_dim=8, num_layers=1, num_heads=2, ffn_dim=16,
        max_seq_len=64, vocab_size=vocab.size, seed=seed,
    )
    tc = TrainConfig(
        epochs=epochs, n_hard=2, n_random=2, learning_rate=1e-3,
        context_window=32, seed=seed, batch_size=2,
    )
    ckpt = tmp_path / f"{tag}.ckpt"
    log = tmp_path / f"{tag}.log.jsonl"
    result = train(
        enc, tc, "collective", splits["train"], splits["dev"], kb, vocab,
        checkpoint_path=str(ckpt), log_path=str(log), resume_from=resume_from,
    )
    return result, ckpt, log, (kb, vocab, splits)


def test_train_smoke_history_checkpoint_and_log(tmp_path):
    result, ckpt, log, _ = _train_setup(tmp_path, "smoke")
    assert [h["epoch"] for h in result.history] == [0, 1]
    for entry in result.history:
        assert set(entry) >= {"epoch", "train_loss", "p_at_1", "map", "recall_at_10", "wall_seconds"}
        assert np.isfinite(entry["train_loss"])
    assert all(np.isfinite(t).all() for t in result.params.tensors.values())

    saved = load_checkpoint(ckpt)
    assert saved.epoch == 2
    assert saved.mode == "collective"
    assert any(n.startswith("opt.m.") for n in saved.extra_tensors)
    for name, t in result.params.tensors.items():
        np.testing.assert_array_equal(saved.params.tensors[name], t)

    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert {r["split"] for r in records} == {"train", "dev"}
    assert all(
        set(r) == {"epoch", "split", "loss", "p_at_1", "map", "recall_at_10", "wall_seconds"}
        for r in records
    )


def test_train_is_deterministic_for_a_fixed_seed(tmp_path):
    _, ckpt_a, _, _ = _train_setup(tmp_path, "run_a")
    _, ckpt_b, _, _ = _train_setup(tmp_path, "run_b")
    assert ckpt_a.read_bytes() == ckpt_b.read_bytes()


def test_resume_reproduces_interrupted_run(tmp_path, monkeypatch):
    # snapshot every per-epoch checkpoint so we can "interrupt" after epoch 0
    import shutil

    import collective_el.checkpoint as ckpt_mod

    real_save = ckpt_mod.save_checkpoint

    def capturing_save(path, ckpt):
        real_save(path, ckpt)
        shutil.copy(path, f"{path}.epoch{ckpt.epoch}")

    monkeypatch.setattr(ckpt_mod, "save_checkpoint", capturing_save)
    straight_result, straight, _, _ = _train_setup(tmp_path, "straight", epochs=2)
    monkeypatch.setattr(ckpt_mod, "save_checkpoint", real_save)

    resumed_result, resumed, _, _ = _train_setup(
        tmp_path, "resumed", epochs=2, resume_from=f"{straight}.epoch1"
    )
    assert straight.read_bytes() == resumed.read_bytes()
    # the replayed epoch reproduces its loss exactly
    assert resumed_result.history == [
        {k: v for k, v in straight_result.history[-1].items() if k != "wall_seconds"}
        | {"wall_seconds": resumed_result.history[0]["wall_seconds"]}
    ]


def test_train_raises_on_divergence(tmp_path):
    _, ckpt, _, (kb, vocab, splits) = _train_setup(tmp_path, "seedrun", epochs=1)
    bad = load_checkpoint(ckpt)
    bad.params.tensors["men.tok_emb"][:] = np.nan
    bad_path = tmp_path / "bad.ckpt"
    save_checkpoint(bad_path, bad)

    enc = bad.params.config
    tc = TrainConfig(epochs=2, n_hard=2, n_random=2, context_window=32, batch_size=2)
    with pytest.raises(DivergenceError):
        train(
            enc, tc, "collective", splits["train"], splits["dev"], kb, vocab,
            resume_from=str(bad_path),
        )


def test_train_rejects_vocab_mismatch_on_resume(tmp_path):
    _, ckpt, _, (kb, vocab, splits) = _train_setup(tmp_path, "hashrun", epochs=1)
    other_cfg = GeneratorConfig(entities=6, docs=12, mentions_per_doc=2, vocab_size=50)
    kb2, vocab2, docs2 = generate_synthetic_corpus(other_cfg, seed=0)
    enc = load_checkpoint(ckpt).params.config
    tc = TrainConfig(epochs=2, n_hard=2, n_random=2, context_window=32)
    with pytest.raises(ValueError, match="hash"):
        train(
            enc, tc, "collective", docs2[:8], docs2[8:], kb2, vocab2,
            resume_from=str(ckpt),
        )
