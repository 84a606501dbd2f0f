"""Data model and file ingestion: vocabulary, documents, knowledge base, segmentation.

File formats (all UTF-8):
  - KB:      one ``entity_id<TAB>name`` record per line, row order = file order.
  - Vocab:   one token per line; token id = line number + size of the reserved block.
  - Corpus:  one JSON object per line with keys ``doc_id``, ``tokens`` (list of
             token strings) and ``mentions`` (list of ``{start, end, entity_id}``
             with inclusive token indices).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

PAD_TOKEN = "[PAD]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
UNK_TOKEN = "[UNK]"

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
UNK_ID = 3

RESERVED_TOKENS = (PAD_TOKEN, CLS_TOKEN, SEP_TOKEN, UNK_TOKEN)
NUM_RESERVED = len(RESERVED_TOKENS)


class CorpusError(ValueError):
    """Raised for malformed or inconsistent corpus/KB/vocabulary data."""


@dataclass(frozen=True)
class Vocabulary:
    """Closed token vocabulary with a fixed reserved block.

    Ids are dense ``0..V-1``; ids 0-3 are the reserved padding, sequence-start,
    sequence-end and unknown markers.
    """

    tokens: tuple[str, ...]  # non-reserved tokens, id = NUM_RESERVED + position

    def __post_init__(self) -> None:
        seen: set[str] = set(RESERVED_TOKENS)
        for tok in self.tokens:
            if not tok or tok.split() != [tok]:
                raise CorpusError(f"invalid vocabulary token: {tok!r}")
            if tok in seen:
                raise CorpusError(f"duplicate vocabulary token: {tok!r}")
            seen.add(tok)
        object.__setattr__(
            self,
            "_token_to_id",
            {tok: NUM_RESERVED + i for i, tok in enumerate(self.tokens)},
        )

    @property
    def size(self) -> int:
        return NUM_RESERVED + len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if 0 <= token_id < NUM_RESERVED:
            return RESERVED_TOKENS[token_id]
        if NUM_RESERVED <= token_id < self.size:
            return self.tokens[token_id - NUM_RESERVED]
        raise CorpusError(f"token id {token_id} out of range for V={self.size}")

    def content_hash(self) -> str:
        """Stable hash of the vocabulary contents, stored in checkpoints."""
        payload = "\x00".join(RESERVED_TOKENS + self.tokens).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class MentionAnnotation:
    """Gold mention: inclusive token span (start, end) plus its KB entity id."""

    start: int
    end: int
    entity_id: str

    def __post_init__(self) -> None:
        if self.start < 0 or self.end < self.start:
            raise CorpusError(
                f"invalid mention span ({self.start}, {self.end}) for {self.entity_id}"
            )

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class Document:
    """Tokenized document with gold mention annotations (token ids, not strings)."""

    doc_id: str
    tokens: tuple[int, ...]
    mentions: tuple[MentionAnnotation, ...]

    def __post_init__(self) -> None:
        for m in self.mentions:
            if m.end >= len(self.tokens):
                raise CorpusError(
                    f"{self.doc_id}: mention span ({m.start}, {m.end}) exceeds "
                    f"document length {len(self.tokens)}"
                )


@dataclass(frozen=True)
class KnowledgeBase:
    """Entity inventory: (entity_id, canonical name) rows with dense row indices."""

    entities: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "id_to_row", {eid: r for r, (eid, _) in enumerate(self.entities)}
        )
        if len(self.id_to_row) != len(self.entities):
            raise CorpusError("knowledge base has duplicate entity ids")

    @property
    def size(self) -> int:
        return len(self.entities)

    def row_of(self, entity_id: str) -> int:
        try:
            return self.id_to_row[entity_id]
        except KeyError:
            raise CorpusError(f"entity id not in knowledge base: {entity_id}") from None

    def entity_id(self, row: int) -> str:
        return self.entities[row][0]

    def name(self, row: int) -> str:
        return self.entities[row][1]


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Whitespace tokenization against a closed vocabulary.

    Unknown words map to the unknown id.  The output never contains the
    reserved start/end markers; those are added by the encoder input builder.
    """
    return [vocab.id_of(tok) for tok in text.split()]


def load_kb(path: str) -> KnowledgeBase:
    """Load a tab-separated entity file; row order equals file order."""
    entities: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"{path}:{lineno}: expected 'id<TAB>name'")
            eid, name = parts
            if not eid:
                raise CorpusError(f"{path}:{lineno}: empty entity id")
            if not name:
                raise CorpusError(f"{path}:{lineno}: empty name for entity {eid!r}")
            if eid in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate entity id {eid!r}")
            seen.add(eid)
            entities.append((eid, name))
    return KnowledgeBase(entities=tuple(entities))


def save_kb(kb: KnowledgeBase, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for eid, name in kb.entities:
            fh.write(f"{eid}\t{name}\n")


def load_vocab(path: str) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh]
    while tokens and tokens[-1] == "":
        tokens.pop()
    return Vocabulary(tokens=tuple(tokens))


def save_vocab(vocab: Vocabulary, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.tokens:
            fh.write(tok + "\n")


def load_corpus(path: str, vocab: Vocabulary, kb: KnowledgeBase) -> list[Document]:
    """Load a line-delimited corpus file, validating spans and gold entity ids.

    Gold entities absent from the KB and overlapping gold mentions are load-time
    errors rather than silent drops.
    """
    docs: list[Document] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON: {exc}") from None
            try:
                doc_id = rec["doc_id"]
                token_strs = rec["tokens"]
                mention_recs = rec["mentions"]
            except (KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: missing field {exc}") from None
            if doc_id in seen_ids:
                raise CorpusError(f"{path}:{lineno}: duplicate doc_id {doc_id!r}")
            seen_ids.add(doc_id)
            token_ids = tuple(vocab.id_of(t) for t in token_strs)
            mentions = []
            for m in mention_recs:
                ann = MentionAnnotation(
                    start=int(m["start"]), end=int(m["end"]), entity_id=m["entity_id"]
                )
                if ann.end >= len(token_ids):
                    raise CorpusError(
                        f"{path}:{lineno}: mention span ({ann.start}, {ann.end}) "
                        f"out of range in {doc_id!r}"
                    )
                if ann.entity_id not in kb.id_to_row:
                    raise CorpusError(
                        f"{path}:{lineno}: gold entity {ann.entity_id!r} in "
                        f"{doc_id!r} is not in the knowledge base"
                    )
                mentions.append(ann)
            mentions.sort(key=lambda a: (a.start, a.end))
            for prev, cur in zip(mentions, mentions[1:]):
                if cur.start <= prev.end:
                    raise CorpusError(
                        f"{path}:{lineno}: overlapping gold mentions in {doc_id!r}: "
                        f"({prev.start},{prev.end}) and ({cur.start},{cur.end})"
                    )
            docs.append(Document(doc_id=doc_id, tokens=token_ids, mentions=tuple(mentions)))
    return docs


def save_corpus(docs: list[Document], vocab: Vocabulary, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            rec = {
                "doc_id": doc.doc_id,
                "tokens": [vocab.token_of(t) for t in doc.tokens],
                "mentions": [
                    {"start": m.start, "end": m.end, "entity_id": m.entity_id}
                    for m in doc.mentions
                ],
            }
            fh.write(json.dumps(rec) + "\n")


def segment_document(
    doc: Document, max_mentions: int, max_tokens: int
) -> list[Document]:
    """Greedily cut a document into segments of at most ``max_mentions`` mentions
    or ``max_tokens`` tokens, whichever cap binds first.

    Cuts never split a mention: a cut landing inside one moves left to the
    mention start.  Concatenating the segment token sequences reproduces the
    original document, and every mention lands in exactly one segment with
    re-based indices.
    """
    if max_mentions < 1:
        raise CorpusError(f"max_mentions must be >= 1, got {max_mentions}")
    if max_tokens < 3:
        raise CorpusError(f"max_tokens must be >= 3, got {max_tokens}")
    mentions = sorted(doc.mentions, key=lambda m: (m.start, m.end))
    for m in mentions:
        if m.length > max_tokens - 2:
            raise CorpusError(
                f"{doc.doc_id}: mention ({m.start}, {m.end}) of {m.entity_id} "
                f"spans {m.length} tokens and cannot fit a {max_tokens}-token segment"
            )

    total = len(doc.tokens)
    segments: list[Document] = []
    start = 0
    while start < total:
        cut = min(start + max_tokens, total)
        # Move the cut left past any mention it would split.
        moved = True
        while moved:
            moved = False
            for m in mentions:
                if m.start < cut <= m.end:
                    cut = m.start
                    moved = True
        inside = [m for m in mentions if m.start >= start and m.end < cut]
        if len(inside) > max_mentions:
            cut = inside[max_mentions].start
            inside = inside[:max_mentions]
        if cut <= start:
            raise CorpusError(
                f"{doc.doc_id}: cannot segment at token {start} under caps "
                f"({max_mentions} mentions, {max_tokens} tokens)"
            )
        rebased = tuple(
            MentionAnnotation(m.start - start, m.end - start, m.entity_id)
            for m in inside
        )
        segments.append(
            Document(doc_id=doc.doc_id, tokens=doc.tokens[start:cut], mentions=rebased)
        )
        start = cut
    return segments


def segment_corpus(
    docs: list[Document], max_mentions: int, max_tokens: int
) -> list[tuple[Document, int]]:
    """Segment every document, returning (segment, token offset in original doc)."""
    out: list[tuple[Document, int]] = []
    for doc in docs:
        base = 0
        for seg in segment_document(doc, max_mentions, max_tokens):
            out.append((seg, base))
            base += len(seg.tokens)
    return out
