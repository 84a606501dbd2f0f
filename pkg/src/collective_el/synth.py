"""Synthetic corpus generation for desk-scale experiments.

Entities are grouped by shared surface form.  At ambiguity level 1 every
surface form belongs to exactly one entity, so the gold entity is recoverable
from the mention tokens alone.  At higher levels the entities in a group share
the surface form and differ only by a cue token planted in the context next to
each mention, so disambiguation requires attending to context.

Surface forms are tuples of 1..surface_len_max tokens drawn from a shared pool,
so individual tokens recur across different surface forms and positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import CorpusError, Document, KnowledgeBase, MentionAnnotation, Vocabulary


@dataclass(frozen=True)
class GeneratorConfig:
    entities: int = 100
    docs: int = 200
    mentions_per_doc: int = 8
    vocab_size: int = 120  # number of filler token types
    ambiguity: int = 1
    surface_pool: int = 0  # 0 = derive from entity count
    surface_len_max: int = 3
    gap_min: int = 2
    gap_max: int = 6
    distractor_rate: float = 0.0  # fraction of gap tokens drawn from the surface pool
    name_prefix_len: int = 0  # shared boilerplate tokens prepended to every KB name
    chain_len: int = 0  # >0: surfaces form nested prefix chains of this depth
    continuation_rate: float = 0.0  # chain mode: chance to plant chain tokens after a span
    continuation_len: int = 3
    star_size: int = 0  # >0: families of 3-token surfaces sharing first/last tokens
    train_frac: float = 0.8
    dev_frac: float = 0.1

    def validate(self) -> None:
        if self.entities < 1 or self.docs < 1 or self.mentions_per_doc < 1:
            raise CorpusError("entities, docs and mentions_per_doc must be >= 1")
        if self.ambiguity < 1:
            raise CorpusError("ambiguity must be >= 1")
        if self.ambiguity > self.entities:
            raise CorpusError(
                f"ambiguity {self.ambiguity} exceeds entity count {self.entities}"
            )
        if self.vocab_size < 1:
            raise CorpusError("vocab_size must be >= 1")
        if self.surface_len_max < 1:
            raise CorpusError("surface_len_max must be >= 1")
        if not 0 <= self.gap_min <= self.gap_max:
            raise CorpusError("need 0 <= gap_min <= gap_max")
        if not 0 <= self.distractor_rate <= 1:
            raise CorpusError("distractor_rate must be in [0, 1]")
        if self.name_prefix_len < 0:
            raise CorpusError("name_prefix_len must be >= 0")
        if self.chain_len < 0:
            raise CorpusError("chain_len must be >= 0")
        if not 0 <= self.continuation_rate <= 1:
            raise CorpusError("continuation_rate must be in [0, 1]")
        if self.continuation_rate > 0 and self.chain_len == 0:
            raise CorpusError("continuation_rate requires chain_len > 0")
        if self.continuation_len < 1:
            raise CorpusError("continuation_len must be >= 1")
        if self.star_size < 0:
            raise CorpusError("star_size must be >= 0")
        if self.star_size > 0 and self.chain_len > 0:
            raise CorpusError("star_size and chain_len are mutually exclusive")
        if not (0 < self.train_frac < 1 and 0 <= self.dev_frac < 1):
            raise CorpusError("invalid split fractions")
        if self.train_frac + self.dev_frac >= 1:
            raise CorpusError("train_frac + dev_frac must be < 1")

    @property
    def pool_size(self) -> int:
        if self.surface_pool > 0:
            return self.surface_pool
        n_groups = -(-self.entities // self.ambiguity)
        if self.chain_len > 0:
            return -(-n_groups // self.chain_len) * self.chain_len
        if self.star_size > 0:
            return -(-n_groups // self.star_size) * (self.star_size + 2)
        return max(8, -(-self.entities * 3 // 5))  # ceil(0.6 * entities)


def _draw_surfaces(cfg: GeneratorConfig, n_groups: int, rng: np.random.Generator) -> list[tuple[str, ...]]:
    if cfg.chain_len > 0:
        return _draw_chain_surfaces(cfg, n_groups)
    if cfg.star_size > 0:
        return _draw_star_surfaces(cfg, n_groups)
    pool = [f"s{i:03d}" for i in range(cfg.pool_size)]
    max_len = min(cfg.surface_len_max, len(pool))
    surfaces: list[tuple[str, ...]] = []
    used: set[tuple[str, ...]] = set()
    for _ in range(n_groups):
        for _attempt in range(10_000):
            length = int(rng.integers(1, max_len + 1))
            surf = tuple(pool[i] for i in rng.choice(len(pool), size=length, replace=False))
            if surf not in used:
                used.add(surf)
                surfaces.append(surf)
                break
        else:
            raise CorpusError(
                f"cannot draw {n_groups} distinct surface forms from a pool of "
                f"{cfg.pool_size} tokens with max length {max_len}"
            )
    return surfaces


def _draw_star_surfaces(cfg: GeneratorConfig, n_groups: int) -> list[tuple[str, ...]]:
    """Families of 3-token surfaces sharing first and last tokens and varying
    only in the middle, so mention boundaries alone cannot tell them apart.
    """
    size = cfg.star_size
    n_families = -(-n_groups // size)
    surfaces: list[tuple[str, ...]] = []
    for f in range(n_families):
        base = f * (size + 2)
        first = f"s{base:03d}"
        last = f"s{base + 1:03d}"
        for i in range(size):
            if len(surfaces) < n_groups:
                surfaces.append((first, f"s{base + 2 + i:03d}", last))
    return surfaces


def _draw_chain_surfaces(cfg: GeneratorConfig, n_groups: int) -> list[tuple[str, ...]]:
    """Surfaces as nested prefix chains: family tokens (t0..tF-1) yield the
    surfaces (t0), (t0,t1), ..., so short mentions have many superset
    lookalikes in the knowledge base.
    """
    depth = cfg.chain_len
    n_families = -(-n_groups // depth)
    surfaces: list[tuple[str, ...]] = []
    for f in range(n_families):
        toks = tuple(f"s{f * depth + k:03d}" for k in range(depth))
        for k in range(1, depth + 1):
            if len(surfaces) < n_groups:
                surfaces.append(toks[:k])
    return surfaces


def generate_synthetic_corpus(
    cfg: GeneratorConfig, seed: int
) -> tuple[KnowledgeBase, Vocabulary, list[Document]]:
    """Deterministically generate (kb, vocabulary, documents) from (cfg, seed)."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    n_groups = -(-cfg.entities // cfg.ambiguity)  # ceil
    surfaces = _draw_surfaces(cfg, n_groups, rng)
    prefix = tuple(f"n{i:03d}" for i in range(cfg.name_prefix_len))

    # Entity inventory: group g holds up to `ambiguity` variants of one surface.
    entities: list[tuple[str, str]] = []
    ent_surface: list[tuple[str, ...]] = []
    ent_cue: list[str | None] = []
    group_sizes: list[int] = []
    ent_cont: list[tuple[str, ...]] = []
    for g in range(n_groups):
        size = min(cfg.ambiguity, cfg.entities - g * cfg.ambiguity)
        group_sizes.append(size)
        if cfg.chain_len > 0:
            family = g // cfg.chain_len
            last = min((family + 1) * cfg.chain_len, n_groups) - 1
            chain_rest = surfaces[last][len(surfaces[g]) :]
            cont = chain_rest[: cfg.continuation_len]
        else:
            cont = ()
        for v in range(size):
            idx = len(entities)
            cue = f"c{g:03d}v{v}" if size > 1 else None
            name_tokens = prefix + surfaces[g] + ((cue,) if cue else ())
            entities.append((f"E{idx:04d}", " ".join(name_tokens)))
            ent_surface.append(surfaces[g])
            ent_cue.append(cue)
            ent_cont.append(cont)
    kb = KnowledgeBase(entities=tuple(entities))

    fillers = [f"w{i:03d}" for i in range(cfg.vocab_size)]
    pool = [f"s{i:03d}" for i in range(cfg.pool_size)]
    cues = [c for c in ent_cue if c is not None]
    vocab = Vocabulary(tokens=tuple(fillers + pool + cues + list(prefix)))

    # Balanced entity coverage: repeat shuffled cycles of the entity list.
    need = cfg.docs * cfg.mentions_per_doc
    targets: list[int] = []
    while len(targets) < need:
        targets.extend(int(e) for e in rng.permutation(cfg.entities))
    targets = targets[:need]

    def draw_gap(n: int) -> list[str]:
        out = []
        for _ in range(n):
            if cfg.distractor_rate > 0 and rng.random() < cfg.distractor_rate:
                out.append(pool[int(rng.integers(0, len(pool)))])
            else:
                out.append(fillers[int(rng.integers(0, len(fillers)))])
        return out

    docs: list[Document] = []
    pos = 0
    for d in range(cfg.docs):
        tokens: list[str] = []
        mentions: list[MentionAnnotation] = []
        for _ in range(cfg.mentions_per_doc):
            ent = targets[pos]
            pos += 1
            gap = int(rng.integers(cfg.gap_min, cfg.gap_max + 1))
            tokens.extend(draw_gap(gap))
            cue = ent_cue[ent]
            cont: tuple[str, ...] = ()
            if cfg.continuation_rate > 0 and ent_cont[ent]:
                if rng.random() < cfg.continuation_rate:
                    cont = ent_cont[ent]
            cue_before = cue is not None and (bool(cont) or bool(rng.integers(0, 2)))
            if cue_before:
                tokens.append(cue)
            start = len(tokens)
            tokens.extend(ent_surface[ent])
            end = len(tokens) - 1
            if cue is not None and not cue_before:
                tokens.append(cue)
            tokens.extend(cont)
            mentions.append(MentionAnnotation(start, end, kb.entity_id(ent)))
        tail = int(rng.integers(cfg.gap_min, cfg.gap_max + 1))
        tokens.extend(draw_gap(tail))
        token_ids = tuple(vocab.id_of(t) for t in tokens)
        docs.append(Document(doc_id=f"d{d:05d}", tokens=token_ids, mentions=tuple(mentions)))
    return kb, vocab, docs


def split_documents(
    docs: list[Document], cfg: GeneratorConfig
) -> dict[str, list[Document]]:
    """Contiguous train/dev/test split by document position."""
    n = len(docs)
    n_train = int(round(n * cfg.train_frac))
    n_dev = int(round(n * cfg.dev_frac))
    n_train = min(n_train, n)
    n_dev = min(n_dev, n - n_train)
    return {
        "train": docs[:n_train],
        "dev": docs[n_train : n_train + n_dev],
        "test": docs[n_train + n_dev :],
    }
