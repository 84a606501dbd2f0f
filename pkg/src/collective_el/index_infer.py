"""Entity-embedding cache, exact maximum-inner-product search, and the
inference-time decoders (known-span, BIO tagging, exhaustive spans)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from .corpus import CLS_ID, PAD_ID, SEP_ID, KnowledgeBase, Vocabulary, tokenize
from .encoder import ModelParams, encoder_forward
from .linker import mention_rep_meanpool

ENTITY_NAME_MAX_TOKENS = 128


@dataclass(frozen=True)
class DecodeConfig:
    gamma: float = 0.5
    max_span_len: int = 10
    allow_overlaps: bool = False

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.max_span_len < 1:
            raise ValueError("max_span_len must be >= 1")


@dataclass
class NameTable:
    """Marked, padded entity-name token ids, row-aligned to the KB."""

    ids: np.ndarray  # (M, W) int64, [CLS] name [SEP] [PAD]...
    mask: np.ndarray  # (M, W) bool, True at real positions

    @classmethod
    def build(cls, kb: KnowledgeBase, vocab: Vocabulary) -> "NameTable":
        rows = [
            tokenize(name, vocab)[:ENTITY_NAME_MAX_TOKENS] for _, name in kb.entities
        ]
        width = max((len(r) for r in rows), default=0) + 2
        ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(rows), width), dtype=bool)
        for r, toks in enumerate(rows):
            ids[r, 0] = CLS_ID
            ids[r, 1 : 1 + len(toks)] = toks
            ids[r, 1 + len(toks)] = SEP_ID
            mask[r, : len(toks) + 2] = True
        return cls(ids=ids, mask=mask)


@dataclass
class EntityIndex:
    """Cached entity vectors, row-aligned to KB rows, tagged with the params
    fingerprint they were built from."""

    matrix: np.ndarray  # (M, d)
    fingerprint: str


def params_fingerprint(params: ModelParams) -> str:
    """Hash of the candidate-encoder tensors (index must be rebuilt when it changes)."""
    h = hashlib.sha256()
    h.update(json.dumps(asdict(params.config), sort_keys=True).encode())
    prefix = params.candidate_prefix
    for name in sorted(params.tensors):
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(params.tensors[name]).tobytes())
    return h.hexdigest()


def encode_candidate_rows(
    params: ModelParams, table: NameTable, rows: np.ndarray, need_cache: bool = False
):
    """Batched candidate encoding; returns ((n, d) vectors, cache)."""
    ids = table.ids[rows]
    mask = table.mask[rows]
    h, cache = encoder_forward(
        params, params.candidate_prefix, ids, key_mask=mask, need_cache=need_cache
    )
    return h[:, 0, :], (h.shape, cache)


def build_index(
    kb: KnowledgeBase,
    vocab: Vocabulary,
    params: ModelParams,
    batch_size: int = 256,
    dtype=np.float64,
) -> EntityIndex:
    """Pre-compute the entity vector for every KB row with the current params."""
    table = NameTable.build(kb, vocab)
    out = np.empty((kb.size, params.config.hidden_dim), dtype=np.float64)
    for lo in range(0, kb.size, batch_size):
        rows = np.arange(lo, min(lo + batch_size, kb.size))
        out[rows], _ = encode_candidate_rows(params, table, rows)
    return EntityIndex(matrix=out.astype(dtype), fingerprint=params_fingerprint(params))


def rank_rows(u: np.ndarray, index: EntityIndex, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact MIPS over all rows; ties broken by lowest row index.

    Returns (rows, scores) for the top-k, best first.
    """
    m = index.matrix.shape[0]
    if m == 0:
        raise ValueError("entity index is empty")
    scores = index.matrix @ u
    order = np.argsort(-scores, kind="stable")[: min(k, m)]
    return order, scores[order]


def link_mention(
    u: np.ndarray, index: EntityIndex, kb: KnowledgeBase, k: int = 10
) -> tuple[str, list[tuple[str, float]]]:
    """Argmax entity over the whole index plus the ranked top-k list."""
    rows, scores = rank_rows(u, index, k)
    ranked = [(kb.entity_id(int(r)), float(s)) for r, s in zip(rows, scores)]
    return ranked[0][0], ranked


def enumerate_spans(length: int, max_span_len: int) -> list[tuple[int, int]]:
    """All (i, j) with i <= j, span length <= max_span_len, in lexicographic order."""
    if length < 1 or max_span_len < 1:
        raise ValueError("length and max_span_len must be >= 1")
    return [
        (i, j)
        for i in range(length)
        for j in range(i, min(i + max_span_len, length))
    ]


def span_logits_all(
    content_states: np.ndarray, params: ModelParams, max_span_len: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized span scorer over every span of length <= max_span_len.

    Returns (starts, ends, logits) aligned with `enumerate_spans` order.
    """
    t = params.tensors
    n = content_states.shape[0]
    spans = enumerate_spans(n, max_span_len)
    starts = np.fromiter((s for s, _ in spans), dtype=np.int64, count=len(spans))
    ends = np.fromiter((e for _, e in spans), dtype=np.int64, count=len(spans))
    s_start = content_states @ t["head.span.ws"]
    s_end = content_states @ t["head.span.we"]
    cum = np.concatenate(([0.0], np.cumsum(content_states @ t["head.span.wm"])))
    logits = s_start[starts] + s_end[ends] + (cum[ends + 1] - cum[starts])
    return starts, ends, logits


def predict_bio_tags(content_states: np.ndarray, params: ModelParams) -> list[str]:
    """Per-token argmax over the O/B/I tagging head."""
    logits = content_states @ params.tensors["head.bio.w"].T + params.tensors["head.bio.b"]
    return [("O", "B", "I")[int(i)] for i in np.argmax(logits, axis=-1)]


def encode_bio(spans: list[tuple[int, int]], length: int) -> list[str]:
    """Render non-overlapping spans as a BIO tag sequence."""
    tags = ["O"] * length
    for i, j in sorted(spans):
        tags[i] = "B"
        for q in range(i + 1, j + 1):
            tags[q] = "I"
    return tags


def decode_bio(tags: list[str]) -> list[tuple[int, int]]:
    """Maximal B(I)* segments as spans; an orphan I (no live segment) opens one."""
    spans: list[tuple[int, int]] = []
    start: int | None = None
    for pos, tag in enumerate(tags):
        if tag == "B":
            if start is not None:
                spans.append((start, pos - 1))
            start = pos
        elif tag == "I":
            if start is None:
                start = pos  # orphan promotion
        else:
            if start is not None:
                spans.append((start, pos - 1))
                start = None
    if start is not None:
        spans.append((start, len(tags) - 1))
    return spans


def decode_end_to_end(
    states: np.ndarray,
    params: ModelParams,
    index: EntityIndex,
    cfg: DecodeConfig,
    kb: KnowledgeBase,
) -> list[tuple[tuple[int, int], str, float]]:
    """Exhaustive-span decoding over one encoded sequence.

    ``states`` are the marked token states; returned spans use content-token
    coordinates.  Spans with probability > gamma survive; under the default
    greedy policy they are kept in descending probability, discarding any span
    overlapping an already-kept one.  Each kept span links through its
    mean-pooled representation.
    """
    cfg.validate()
    content = states[1:-1]
    if content.shape[0] == 0:
        return []
    starts, ends, logits = span_logits_all(content, params, cfg.max_span_len)
    probs = 1.0 / (1.0 + np.exp(-logits))
    keep = probs > cfg.gamma
    candidates = sorted(
        zip(starts[keep], ends[keep], probs[keep]),
        key=lambda x: (-x[2], x[0], x[1]),
    )
    chosen: list[tuple[int, int, float]] = []
    for i, j, p in candidates:
        if not cfg.allow_overlaps and any(i <= cj and ci <= j for ci, cj, _ in chosen):
            continue
        chosen.append((int(i), int(j), float(p)))
    results = []
    for i, j, p in sorted(chosen):
        u = mention_rep_meanpool(content, (i, j))
        entity_id, _ = link_mention(u, index, kb, k=1)
        results.append(((i, j), entity_id, p))
    return results


def decode_end_to_end_bio(
    states: np.ndarray,
    params: ModelParams,
    index: EntityIndex,
    cfg: DecodeConfig,
    kb: KnowledgeBase,
) -> list[tuple[tuple[int, int], str, float]]:
    """Tagging-based decoding over one encoded sequence.

    Spans come from the argmax O/B/I tag sequence; each links through its
    mean-pooled representation.  The reported score is the mean argmax-tag
    probability over the span's tokens.
    """
    cfg.validate()
    content = states[1:-1]
    if content.shape[0] == 0:
        return []
    logits = content @ params.tensors["head.bio.w"].T + params.tensors["head.bio.b"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    tags = [("O", "B", "I")[int(i)] for i in np.argmax(logits, axis=-1)]
    top = probs.max(axis=1)
    results = []
    for i, j in decode_bio(tags):
        u = mention_rep_meanpool(content, (i, j))
        entity_id, _ = link_mention(u, index, kb, k=1)
        results.append(((i, j), entity_id, float(top[i : j + 1].mean())))
    return results
