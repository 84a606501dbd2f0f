"""Scoring math and losses: mention/candidate representations, dot-product
scores, span probabilities, negative mining, and the CE/BCE/joint objectives."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoder import ModelParams


@dataclass(frozen=True)
class CandidateSet:
    """Gold row plus mined negatives for one mention; gold appears exactly once."""

    key: tuple
    rows: tuple[int, ...]
    gold_position: int

    def __post_init__(self) -> None:
        if len(set(self.rows)) != len(self.rows):
            raise ValueError("candidate rows must be distinct")
        if not 0 <= self.gold_position < len(self.rows):
            raise ValueError("gold_position out of range")


@dataclass(frozen=True)
class TrainConfig:
    n_random: int = 10
    n_hard: int = 10
    learning_rate: float = 1e-4
    lr_schedule: str = "linear"  # "linear" decay to 0, or "constant"
    epochs: int = 20
    batch_size: int = 1
    hard_refresh_every: int = 1  # epochs between hard-negative re-mining
    weight_decay: float = 0.0
    joint_weight: float = 1.0  # disambiguation weight inside the joint loss
    context_window: int = 128  # per-mention mode context size (tokens)
    seed: int = 0

    def validate(self) -> None:
        if self.n_random < 0 or self.n_hard < 0:
            raise ValueError("negative counts must be >= 0")
        if self.n_random == 0 and self.n_hard == 0:
            raise ValueError("need at least one of n_random, n_hard > 0")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("invalid learning_rate/epochs/batch_size")
        if self.lr_schedule not in ("linear", "constant"):
            raise ValueError(f"unknown lr_schedule: {self.lr_schedule!r}")
        if self.hard_refresh_every < 1:
            raise ValueError("hard_refresh_every must be >= 1")
        if self.context_window < 3:
            raise ValueError("context_window must be >= 3")


def mention_rep(states: np.ndarray, span: tuple[int, int], params: ModelParams) -> np.ndarray:
    """Project the concatenated first/last span states through the mention head."""
    i, j = span
    if not 0 <= i <= j < states.shape[0]:
        raise ValueError(f"span ({i}, {j}) out of range for {states.shape[0]} states")
    cat = np.concatenate([states[i], states[j]])
    return params.tensors["head.proj.w"] @ cat + params.tensors["head.proj.b"]


def mention_rep_meanpool(states: np.ndarray, span: tuple[int, int]) -> np.ndarray:
    """Mean of the final-layer states across the span."""
    i, j = span
    if not 0 <= i <= j < states.shape[0]:
        raise ValueError(f"span ({i}, {j}) out of range for {states.shape[0]} states")
    return states[i : j + 1].mean(axis=0)


def score(u: np.ndarray, v: np.ndarray) -> float:
    """Dot-product similarity between a mention and an entity vector."""
    return float(np.dot(u, v))


def span_logit(states: np.ndarray, span: tuple[int, int], params: ModelParams) -> float:
    i, j = span
    t = params.tensors
    return float(
        t["head.span.ws"] @ states[i]
        + t["head.span.we"] @ states[j]
        + (states[i : j + 1] @ t["head.span.wm"]).sum()
    )


def span_probability(
    states: np.ndarray,
    span: tuple[int, int],
    params: ModelParams,
    max_span_len: int,
) -> float:
    """Sigmoid span score; spans longer than ``max_span_len`` are rejected."""
    i, j = span
    if not 0 <= i <= j < states.shape[0]:
        raise ValueError(f"span ({i}, {j}) out of range for {states.shape[0]} states")
    if j - i + 1 > max_span_len:
        raise ValueError(f"span ({i}, {j}) longer than max span length {max_span_len}")
    return float(1.0 / (1.0 + np.exp(-span_logit(states, span, params))))


def mine_candidates(
    u: np.ndarray,
    gold_row: int,
    index_matrix: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    key: tuple = (),
) -> CandidateSet:
    """Assemble gold + hard + random negative rows for one mention.

    Hard negatives are the non-gold rows scoring above the gold, best first;
    when fewer than ``n_hard`` exist the remainder is backfilled with the
    top-scoring non-gold rows.  Random negatives are sampled uniformly without
    replacement from the rows not already taken.
    """
    m = index_matrix.shape[0]
    if not 0 <= gold_row < m:
        raise ValueError(f"gold row {gold_row} out of range for index of {m} rows")
    n_hard = cfg.n_hard
    n_random = cfg.n_random
    if n_hard + n_random > m - 1:
        warnings.warn(
            f"knowledge base has only {m - 1} non-gold entities; capping "
            f"candidates below n_hard={n_hard} + n_random={n_random}",
            stacklevel=2,
        )
        n_hard = min(n_hard, m - 1)
        n_random = min(n_random, m - 1 - n_hard)

    scores = index_matrix @ u
    order = np.argsort(-scores, kind="stable")
    non_gold = order[order != gold_row]
    hard = [int(r) for r in non_gold[:n_hard]]

    taken = {gold_row, *hard}
    pool = np.array([r for r in range(m) if r not in taken], dtype=np.int64)
    if n_random > 0 and pool.size > 0:
        picks = rng.choice(pool.size, size=min(n_random, pool.size), replace=False)
        random_rows = [int(pool[p]) for p in np.sort(picks)]
    else:
        random_rows = []
    rows = (gold_row, *hard, *random_rows)
    return CandidateSet(key=key, rows=rows, gold_position=0)


def ce_loss(scores: np.ndarray, gold_position: int) -> float:
    """Cross-entropy of the gold candidate under a softmax over the scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 1:
        raise ValueError("scores must be a non-empty 1-D array")
    if not 0 <= gold_position < scores.size:
        raise ValueError("gold_position out of range")
    shifted = scores - scores.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[gold_position])


def mention_detection_loss(
    span_probs: np.ndarray,
    gold_spans: "set[tuple[int, int]] | list[tuple[int, int]]",
    candidate_spans: list[tuple[int, int]],
) -> float:
    """Mean binary cross-entropy over the enumerated spans, gold spans positive."""
    probs = np.asarray(span_probs, dtype=np.float64)
    if probs.shape[0] != len(candidate_spans):
        raise ValueError("one probability per candidate span required")
    gold = set(gold_spans)
    labels = np.array([1.0 if s in gold else 0.0 for s in candidate_spans])
    probs = np.clip(probs, 1e-12, 1.0 - 1e-12)
    bce = -(labels * np.log(probs) + (1.0 - labels) * np.log(1.0 - probs))
    return float(bce.mean())


def joint_loss(detection_loss: float, disambiguation_loss: float, weight: float = 1.0) -> float:
    """Sum of the mention-detection and entity-disambiguation terms."""
    return float(detection_loss + weight * disambiguation_loss)
