"""Training engine: per-mode losses with exact gradients, AdamW with linear
learning-rate decay, per-epoch hard-negative refresh, and checkpointing.

Modes:
  - ``collective``: encode each segment once, CE over candidate scores for all
    gold mentions (first/last-token projection representations).
  - ``per_mention``: one context-window encoder pass per mention, same CE.
  - ``end_to_end_exhaustive``: joint loss = mean BCE over all enumerated spans
    + CE over gold-span candidates with mean-pooled representations.
  - ``end_to_end_bio``: joint loss = mean tag CE over tokens (O/B/I head)
    + the same mean-pooled disambiguation CE.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import CorpusError, Document, KnowledgeBase, Vocabulary, segment_corpus
from .encoder import (
    EncoderConfig,
    ModelParams,
    encoder_backward,
    encoder_forward,
    init_params,
    mark_tokens,
    zero_grads,
)
from .index_infer import (
    EntityIndex,
    NameTable,
    build_index,
    encode_candidate_rows,
    enumerate_spans,
    rank_rows,
)
from .linker import CandidateSet, TrainConfig, mine_candidates

MODES = ("collective", "per_mention", "end_to_end_exhaustive", "end_to_end_bio")
_TAG_IDS = {"O": 0, "B": 1, "I": 2}


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass
class SegmentExample:
    doc_id: str
    base: int
    content_ids: np.ndarray
    spans: list[tuple[int, int]]
    gold_rows: list[int]
    keys: list[tuple]
    cand_sets: list[CandidateSet] | None = None


@dataclass
class MentionExample:
    key: tuple
    window_ids: np.ndarray
    span: tuple[int, int]
    gold_row: int
    cand_set: CandidateSet | None = None


def build_segment_examples(
    docs: list[Document], kb: KnowledgeBase, max_mentions: int, max_tokens: int
) -> list[SegmentExample]:
    out = []
    for seg, base in segment_corpus(docs, max_mentions, max_tokens):
        out.append(
            SegmentExample(
                doc_id=seg.doc_id,
                base=base,
                content_ids=np.asarray(seg.tokens, dtype=np.int64),
                spans=[(m.start, m.end) for m in seg.mentions],
                gold_rows=[kb.row_of(m.entity_id) for m in seg.mentions],
                keys=[(seg.doc_id, base + m.start, base + m.end) for m in seg.mentions],
            )
        )
    return out


def context_window(tokens: tuple[int, ...], span: tuple[int, int], width: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Window of up to ``width`` tokens centered on the span, span re-based."""
    i, j = span
    total = len(tokens)
    w = min(width, total)
    if j - i + 1 > w:
        raise ValueError(f"mention span ({i}, {j}) does not fit a {w}-token window")
    left = max(0, min(i - (w - (j - i + 1)) // 2, total - w))
    window = np.asarray(tokens[left : left + w], dtype=np.int64)
    return window, (i - left, j - left)


def build_mention_examples(
    docs: list[Document], kb: KnowledgeBase, width: int
) -> list[MentionExample]:
    out = []
    for doc in docs:
        for m in doc.mentions:
            window, span = context_window(doc.tokens, (m.start, m.end), width)
            out.append(
                MentionExample(
                    key=(doc.doc_id, m.start, m.end),
                    window_ids=window,
                    span=span,
                    gold_row=kb.row_of(m.entity_id),
                )
            )
    return out


def _softmax_1d(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _gather_candidate_rows(batch, mode: str) -> np.ndarray:
    rows: set[int] = set()
    if mode == "per_mention":
        for ex in batch:
            rows.update(ex.cand_set.rows)
    else:
        for ex in batch:
            for cs in ex.cand_sets:
                rows.update(cs.rows)
    return np.array(sorted(rows), dtype=np.int64)


def loss_and_grads(
    params: ModelParams,
    batch: list,
    mode: str,
    table: NameTable,
    max_span_len: int = 10,
    joint_weight: float = 1.0,
    want_grads: bool = True,
):
    """Compute the batch loss and (optionally) exact gradients for every tensor.

    Returns (loss, grads, stats); grads is None when ``want_grads`` is False.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode: {mode!r}")
    t = params.tensors
    d = params.config.hidden_dim
    grads = zero_grads(params) if want_grads else None

    distinct = _gather_candidate_rows(batch, mode)
    pos_of = {int(r): p for p, r in enumerate(distinct)}
    if distinct.size > 0:
        cand_vecs, (cand_shape, cand_cache) = encode_candidate_rows(
            params, table, distinct, need_cache=want_grads
        )
    else:
        cand_vecs, cand_shape, cand_cache = None, None, None
    d_cand = np.zeros_like(cand_vecs) if (want_grads and cand_vecs is not None) else None

    def disambiguation_terms(h, spans, cand_sets, scale, pooled: bool, dh):
        """CE over each mention's candidate scores; returns summed loss.

        ``scale`` multiplies each mention's gradient contribution.
        """
        total = 0.0
        for (i, j), cs in zip(spans, cand_sets):
            ri, rj = i + 1, j + 1  # content -> marked row offset
            if pooled:
                u = h[ri : rj + 1].mean(axis=0)
            else:
                cat = np.concatenate([h[ri], h[rj]])
                u = t["head.proj.w"] @ cat + t["head.proj.b"]
            positions = [pos_of[r] for r in cs.rows]
            vecs = cand_vecs[positions]
            scores = vecs @ u
            probs = _softmax_1d(scores)
            total += -np.log(probs[cs.gold_position])
            if want_grads:
                dscores = probs.copy()
                dscores[cs.gold_position] -= 1.0
                dscores *= scale
                du = vecs.T @ dscores
                d_cand[positions] += np.outer(dscores, u)
                if pooled:
                    dh[ri : rj + 1] += du / (rj - ri + 1)
                else:
                    grads["head.proj.w"] += np.outer(du, cat)
                    grads["head.proj.b"] += du
                    dcat = t["head.proj.w"].T @ du
                    dh[ri] += dcat[:d]
                    dh[rj] += dcat[d:]
        return total

    loss = 0.0
    stats = {"n_examples": len(batch), "n_mentions": 0, "detection": 0.0, "disambiguation": 0.0}

    if mode == "per_mention":
        n_mentions = len(batch)
        stats["n_mentions"] = n_mentions
        for ex in batch:
            marked = mark_tokens(ex.window_ids)
            h, cache = encoder_forward(
                params, params.mention_prefix, marked[None, :], need_cache=want_grads
            )
            dh = np.zeros_like(h[0]) if want_grads else None
            loss += disambiguation_terms(
                h[0], [ex.span], [ex.cand_set], 1.0 / n_mentions, pooled=False, dh=dh
            )
            if want_grads:
                encoder_backward(params, params.mention_prefix, cache, dh[None, :], grads)
        loss /= n_mentions
        stats["disambiguation"] = loss
    elif mode == "collective":
        n_mentions = sum(len(ex.spans) for ex in batch)
        if n_mentions == 0:
            raise ValueError("collective batch contains no mentions")
        stats["n_mentions"] = n_mentions
        for ex in batch:
            marked = mark_tokens(ex.content_ids)
            h, cache = encoder_forward(
                params, params.mention_prefix, marked[None, :], need_cache=want_grads
            )
            dh = np.zeros_like(h[0]) if want_grads else None
            loss += disambiguation_terms(
                h[0], ex.spans, ex.cand_sets, 1.0 / n_mentions, pooled=False, dh=dh
            )
            if want_grads:
                encoder_backward(params, params.mention_prefix, cache, dh[None, :], grads)
        loss /= n_mentions
        stats["disambiguation"] = loss
    else:
        # Joint end-to-end objectives, averaged over segments.
        n_seg = len(batch)
        stats["n_mentions"] = sum(len(ex.spans) for ex in batch)
        det_total = 0.0
        dis_total = 0.0
        for ex in batch:
            marked = mark_tokens(ex.content_ids)
            h, cache = encoder_forward(
                params, params.mention_prefix, marked[None, :], need_cache=want_grads
            )
            hs = h[0]
            content = hs[1:-1]
            n_content = content.shape[0]
            dh = np.zeros_like(hs) if want_grads else None

            if mode == "end_to_end_exhaustive":
                spans = enumerate_spans(n_content, max_span_len)
                starts = np.fromiter((s for s, _ in spans), dtype=np.int64, count=len(spans))
                ends = np.fromiter((e for _, e in spans), dtype=np.int64, count=len(spans))
                s_start = content @ t["head.span.ws"]
                s_end = content @ t["head.span.we"]
                cum = np.concatenate(([0.0], np.cumsum(content @ t["head.span.wm"])))
                logits = s_start[starts] + s_end[ends] + (cum[ends + 1] - cum[starts])
                gold = set(ex.spans)
                y = np.fromiter((1.0 if s in gold else 0.0 for s in spans), dtype=np.float64)
                det = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
                if want_grads:
                    sig = 1.0 / (1.0 + np.exp(-logits))
                    dlog = (sig - y) / (len(spans) * n_seg)
                    acc_s = np.bincount(starts, weights=dlog, minlength=n_content)
                    acc_e = np.bincount(ends, weights=dlog, minlength=n_content)
                    diff = np.zeros(n_content + 1)
                    np.add.at(diff, starts, dlog)
                    np.add.at(diff, ends + 1, -dlog)
                    inside = np.cumsum(diff)[:n_content]
                    grads["head.span.ws"] += content.T @ acc_s
                    grads["head.span.we"] += content.T @ acc_e
                    grads["head.span.wm"] += content.T @ inside
                    dh[1:-1] += (
                        np.outer(acc_s, t["head.span.ws"])
                        + np.outer(acc_e, t["head.span.we"])
                        + np.outer(inside, t["head.span.wm"])
                    )
            else:  # end_to_end_bio
                tags = np.zeros(n_content, dtype=np.int64)
                for (i, j) in ex.spans:
                    tags[i] = _TAG_IDS["B"]
                    tags[i + 1 : j + 1] = _TAG_IDS["I"]
                logits = content @ t["head.bio.w"].T + t["head.bio.b"]
                shifted = logits - logits.max(axis=1, keepdims=True)
                logz = np.log(np.exp(shifted).sum(axis=1))
                det = float(np.mean(logz - shifted[np.arange(n_content), tags]))
                if want_grads:
                    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
                    dlog = probs
                    dlog[np.arange(n_content), tags] -= 1.0
                    dlog /= n_content * n_seg
                    grads["head.bio.w"] += dlog.T @ content
                    grads["head.bio.b"] += dlog.sum(axis=0)
                    dh[1:-1] += dlog @ t["head.bio.w"]

            n_gold = len(ex.spans)
            if n_gold > 0:
                dis = disambiguation_terms(
                    hs,
                    ex.spans,
                    ex.cand_sets,
                    joint_weight / (n_gold * n_seg),
                    pooled=True,
                    dh=dh,
                )
                dis /= n_gold
            else:
                dis = 0.0
            det_total += det
            dis_total += dis
            if want_grads:
                encoder_backward(params, params.mention_prefix, cache, dh[None, :], grads)
        det_total /= n_seg
        dis_total /= n_seg
        loss = det_total + joint_weight * dis_total
        stats["detection"] = det_total
        stats["disambiguation"] = dis_total

    if want_grads and cand_vecs is not None:
        dhc = np.zeros(cand_shape)
        dhc[:, 0, :] = d_cand
        encoder_backward(params, params.candidate_prefix, cand_cache, dhc, grads)

    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss in mode {mode!r}")
    return float(loss), grads, stats


def backward(params: ModelParams, batch: list, mode: str, table: NameTable, **kw):
    """Gradients of the batch loss, one tensor per parameter tensor."""
    _, grads, _ = loss_and_grads(params, batch, mode, table, want_grads=True, **kw)
    return grads


class AdamW:
    """Adam with decoupled weight decay over the named tensor manifest."""

    def __init__(
        self,
        params: ModelParams,
        learning_rate: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        self.learning_rate = learning_rate
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = zero_grads(params)
        self.v = zero_grads(params)

    def step(self, params: ModelParams, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        lr = self.learning_rate * lr_scale
        for name, p in params.tensors.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m in self.m.items():
            out[f"opt.m.{name}"] = m
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, extra: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name] = extra[f"opt.m.{name}"].copy()
            self.v[name] = extra[f"opt.v.{name}"].copy()
        self.step_count = step_count


def _mention_rng(seed: int, epoch: int, idx: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, idx])))


def mine_all(
    params: ModelParams,
    examples: list,
    mode: str,
    index: EntityIndex,
    cfg: TrainConfig,
    epoch: int,
) -> None:
    """Refresh every example's candidate sets with the current params/index."""
    pooled = mode.startswith("end_to_end")
    counter = 0
    if mode == "per_mention":
        for ex in examples:
            h, _ = encoder_forward(
                params, params.mention_prefix, mark_tokens(ex.window_ids)[None, :]
            )
            hs = h[0]
            i, j = ex.span
            cat = np.concatenate([hs[i + 1], hs[j + 1]])
            u = params.tensors["head.proj.w"] @ cat + params.tensors["head.proj.b"]
            ex.cand_set = mine_candidates(
                u, ex.gold_row, index.matrix, cfg, _mention_rng(cfg.seed, epoch, counter), ex.key
            )
            counter += 1
        return
    for ex in examples:
        if not ex.spans:
            ex.cand_sets = []
            continue
        h, _ = encoder_forward(
            params, params.mention_prefix, mark_tokens(ex.content_ids)[None, :]
        )
        hs = h[0]
        sets = []
        for (i, j), gold_row, key in zip(ex.spans, ex.gold_rows, ex.keys):
            if pooled:
                u = hs[i + 1 : j + 2].mean(axis=0)
            else:
                cat = np.concatenate([hs[i + 1], hs[j + 1]])
                u = params.tensors["head.proj.w"] @ cat + params.tensors["head.proj.b"]
            sets.append(
                mine_candidates(
                    u, gold_row, index.matrix, cfg, _mention_rng(cfg.seed, epoch, counter), key
                )
            )
            counter += 1
        ex.cand_sets = sets


def rank_gold_mentions(
    params: ModelParams,
    docs: list[Document],
    kb: KnowledgeBase,
    index: EntityIndex,
    mode: str,
    max_mentions: int = 8,
    max_tokens: int = 512,
    window: int = 128,
    topk: int = 10,
):
    """Rank every gold mention against the full index; returns RankedPredictions."""
    from .eval_bench import RankedPrediction

    preds = []
    if mode == "per_mention":
        for doc in docs:
            for m in doc.mentions:
                win, span = context_window(doc.tokens, (m.start, m.end), window)
                h, _ = encoder_forward(
                    params, params.mention_prefix, mark_tokens(win)[None, :]
                )
                hs = h[0]
                cat = np.concatenate([hs[span[0] + 1], hs[span[1] + 1]])
                u = params.tensors["head.proj.w"] @ cat + params.tensors["head.proj.b"]
                rows, _ = rank_rows(u, index, topk)
                preds.append(
                    RankedPrediction(
                        key=(doc.doc_id, m.start, m.end),
                        ranked=tuple(kb.entity_id(int(r)) for r in rows),
                        gold=m.entity_id,
                    )
                )
        return preds
    pooled = mode.startswith("end_to_end")
    for seg, base in segment_corpus(docs, max_mentions, max_tokens):
        if not seg.mentions:
            continue
        h, _ = encoder_forward(
            params, params.mention_prefix, mark_tokens(np.asarray(seg.tokens))[None, :]
        )
        hs = h[0]
        for m in seg.mentions:
            if pooled:
                u = hs[m.start + 1 : m.end + 2].mean(axis=0)
            else:
                cat = np.concatenate([hs[m.start + 1], hs[m.end + 1]])
                u = params.tensors["head.proj.w"] @ cat + params.tensors["head.proj.b"]
            rows, _ = rank_rows(u, index, topk)
            preds.append(
                RankedPrediction(
                    key=(seg.doc_id, base + m.start, base + m.end),
                    ranked=tuple(kb.entity_id(int(r)) for r in rows),
                    gold=m.entity_id,
                )
            )
    return preds


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)


def train(
    enc_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    mode: str,
    train_docs: list[Document],
    dev_docs: list[Document],
    kb: KnowledgeBase,
    vocab: Vocabulary,
    max_mentions: int = 8,
    max_tokens: int = 512,
    max_span_len: int = 10,
    checkpoint_path: str | None = None,
    log_path: str | None = None,
    resume_from: str | None = None,
) -> TrainResult:
    """Run the full training loop; returns the trained params and epoch history.

    A checkpoint (params + optimizer state) is written after every epoch, so a
    divergence abort leaves the last good epoch on disk.
    """
    from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint

    if mode not in MODES:
        raise ValueError(f"unknown mode: {mode!r}")
    train_cfg.validate()
    if train_cfg.seed < 0:
        raise ValueError("seed must be non-negative")

    vocab_hash = vocab.content_hash()
    cap = min(max_tokens, enc_cfg.max_seq_len - 2)
    if mode == "per_mention":
        width = min(train_cfg.context_window, enc_cfg.max_seq_len - 2)
        examples: list = build_mention_examples(train_docs, kb, width)
    else:
        examples = build_segment_examples(train_docs, kb, max_mentions, cap)
        if mode == "collective":
            examples = [ex for ex in examples if ex.spans]
    if not examples:
        raise CorpusError("training corpus yields no examples")

    start_epoch = 0
    step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.vocab_hash != vocab_hash:
            raise CheckpointError("checkpoint vocabulary hash does not match this vocabulary")
        params = ckpt.params
        enc_cfg = params.config
        opt = AdamW(params, train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)
        opt.load_state(ckpt.extra_tensors or {}, ckpt.step)
        start_epoch = ckpt.epoch
        step = ckpt.step
    else:
        params = init_params(enc_cfg)
        opt = AdamW(params, train_cfg.learning_rate, weight_decay=train_cfg.weight_decay)

    table = NameTable.build(kb, vocab)
    n_batches = -(-len(examples) // train_cfg.batch_size)
    total_steps = max(1, train_cfg.epochs * n_batches)

    history: list[dict] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    t0 = time.perf_counter()
    try:
        index = None
        for epoch in range(start_epoch, train_cfg.epochs):
            if index is None or epoch % train_cfg.hard_refresh_every == 0:
                index = build_index(kb, vocab, params)
                mine_all(params, examples, mode, index, train_cfg, epoch)
            order = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence([train_cfg.seed, epoch]))
            ).permutation(len(examples))
            loss_sum = 0.0
            weight_sum = 0
            for lo in range(0, len(examples), train_cfg.batch_size):
                batch = [examples[i] for i in order[lo : lo + train_cfg.batch_size]]
                loss, grads, stats = loss_and_grads(
                    params,
                    batch,
                    mode,
                    table,
                    max_span_len=max_span_len,
                    joint_weight=train_cfg.joint_weight,
                )
                if train_cfg.lr_schedule == "linear":
                    lr_scale = max(0.0, 1.0 - step / total_steps)
                else:
                    lr_scale = 1.0
                opt.step(params, grads, lr_scale)
                step += 1
                loss_sum += loss * stats["n_examples"]
                weight_sum += stats["n_examples"]
            train_loss = loss_sum / weight_sum

            eval_index = build_index(kb, vocab, params)
            entry = {"epoch": epoch, "train_loss": train_loss}
            if dev_docs:
                from .eval_bench import ranking_metrics

                preds = rank_gold_mentions(
                    params,
                    dev_docs,
                    kb,
                    eval_index,
                    mode,
                    max_mentions=max_mentions,
                    max_tokens=cap,
                    window=train_cfg.context_window,
                    topk=10,
                )
                metrics = ranking_metrics(preds, ks=(10,))
                entry.update(
                    p_at_1=metrics["p_at_1"],
                    map=metrics["map"],
                    recall_at_10=metrics["recall_at_k"][10],
                )
            entry["wall_seconds"] = time.perf_counter() - t0
            history.append(entry)

            if log_fh:
                log_fh.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "split": "train",
                            "loss": train_loss,
                            "p_at_1": None,
                            "map": None,
                            "recall_at_10": None,
                            "wall_seconds": entry["wall_seconds"],
                        }
                    )
                    + "\n"
                )
                if dev_docs:
                    log_fh.write(
                        json.dumps(
                            {
                                "epoch": epoch,
                                "split": "dev",
                                "loss": None,
                                "p_at_1": entry["p_at_1"],
                                "map": entry["map"],
                                "recall_at_10": entry["recall_at_10"],
                                "wall_seconds": entry["wall_seconds"],
                            }
                        )
                        + "\n"
                    )
                log_fh.flush()

            if checkpoint_path:
                save_checkpoint(
                    checkpoint_path,
                    Checkpoint(
                        params=params,
                        vocab_hash=vocab_hash,
                        mode=mode,
                        epoch=epoch + 1,
                        step=step,
                        extra_tensors=opt.state_tensors(),
                        train_config=None,
                    ),
                )
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(params=params, history=history)
