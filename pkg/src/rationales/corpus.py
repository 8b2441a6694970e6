"""Dataset model: tokenization, JSONL ingestion, synthetic corpora, and statistics.

Documents are lowercased, whitespace-tokenized, and each word is split into
fixed-width character chunks ("pieces"). All downstream scoring sums piece-level
quantities back to word level, so the piece width is the only tokenizer knob.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, EmptyDocumentError, ParseError, SchemaError

PAD_PIECE = "<pad>"
UNK_PIECE = "<unk>"
SEP_PIECE = "<sep>"
SPECIAL_PIECES = (PAD_PIECE, UNK_PIECE, SEP_PIECE)

DEFAULT_MAX_PIECE_LEN = 4
DEFAULT_MAX_PIECES = 512

SPLIT_NAMES = ("train", "dev", "test")


@dataclass(frozen=True)
class Token:
    """A surface word together with its character-chunk pieces."""

    surface: str
    pieces: tuple[str, ...]

    def __post_init__(self):
        if len(self.pieces) < 1:
            raise EmptyDocumentError(f"token {self.surface!r} has no pieces")
        if "".join(self.pieces) != self.surface:
            raise SchemaError(
                f"pieces {self.pieces!r} do not concatenate to surface {self.surface!r}"
            )

    @property
    def piece_count(self) -> int:
        return len(self.pieces)


@dataclass(frozen=True)
class Document:
    """A tokenized text with optional query, class label, and gold rationale."""

    id: str
    tokens: tuple[Token, ...]
    label: int
    query: tuple[Token, ...] | None = None
    gold_rationale: frozenset[int] | None = None

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise EmptyDocumentError(f"document {self.id!r} has no tokens")
        if self.gold_rationale is not None:
            bad = [i for i in self.gold_rationale if not 0 <= i < len(self.tokens)]
            if bad:
                raise SchemaError(
                    f"document {self.id!r}: gold rationale indices {sorted(bad)} out of range"
                )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def num_pieces(self) -> int:
        return sum(t.piece_count for t in self.tokens)


class Vocabulary:
    """Immutable bidirectional piece/id map with reserved pad, unknown, and separator ids."""

    def __init__(self, pieces: Iterable[str]):
        ordered = list(SPECIAL_PIECES) + sorted(set(pieces) - set(SPECIAL_PIECES))
        self._id_to_piece = tuple(ordered)
        self._piece_to_id = {p: i for i, p in enumerate(ordered)}

    @property
    def pad_id(self) -> int:
        return self._piece_to_id[PAD_PIECE]

    @property
    def unk_id(self) -> int:
        return self._piece_to_id[UNK_PIECE]

    @property
    def sep_id(self) -> int:
        return self._piece_to_id[SEP_PIECE]

    def __len__(self) -> int:
        return len(self._id_to_piece)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._id_to_piece == other._id_to_piece

    def __contains__(self, piece: str) -> bool:
        return piece in self._piece_to_id

    def id_of(self, piece: str) -> int:
        """Map a piece to its id; unseen pieces map to the unknown id."""
        return self._piece_to_id.get(piece, self.unk_id)

    def piece_of(self, piece_id: int) -> str:
        return self._id_to_piece[piece_id]

    def encode(self, pieces: Iterable[str]) -> list[int]:
        get = self._piece_to_id.get
        unk = self.unk_id
        return [get(p, unk) for p in pieces]

    @classmethod
    def from_documents(cls, documents: Iterable[Document]) -> "Vocabulary":
        pieces: set[str] = set()
        for doc in documents:
            for tok in doc.tokens:
                pieces.update(tok.pieces)
            if doc.query:
                for tok in doc.query:
                    pieces.update(tok.pieces)
        return cls(pieces)

    def save(self, path: str | Path) -> None:
        """Write a sorted piece-to-id table, one tab-separated entry per line."""
        lines = sorted(f"{p}\t{i}" for p, i in self._piece_to_id.items())
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        mapping: dict[str, int] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            try:
                piece, raw_id = line.rsplit("\t", 1)
                mapping[piece] = int(raw_id)
            except ValueError as exc:
                raise ParseError(f"vocabulary line {lineno}: {line!r}") from exc
        vocab = cls(mapping.keys())
        if vocab._piece_to_id != mapping:
            raise ParseError(f"vocabulary file {path} is not a canonical table")
        return vocab


@dataclass(frozen=True)
class DatasetSplit:
    """A named split with its documents, class count, and (shared) vocabulary."""

    name: str
    documents: tuple[Document, ...]
    num_classes: int
    vocabulary: Vocabulary

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise ConfigError(f"split name must be one of {SPLIT_NAMES}, got {self.name!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        for doc in self.documents:
            if not 0 <= doc.label < self.num_classes:
                raise SchemaError(
                    f"document {doc.id!r}: label {doc.label} outside [0, {self.num_classes})"
                )

    def __len__(self) -> int:
        return len(self.documents)


@dataclass(frozen=True)
class CorpusStats:
    num_documents: int
    doc_len_mean: float
    doc_len_max: int
    query_len_mean: float | None
    query_len_max: int | None
    rationale_ratio_mean: float | None
    rationale_ratio_max: float | None
    label_distribution: tuple[float, ...]


def tokenize(text: str, max_piece_len: int = DEFAULT_MAX_PIECE_LEN) -> list[Token]:
    """Lowercase, split on whitespace, and chunk each word into pieces of at most
    ``max_piece_len`` characters."""
    if max_piece_len < 1:
        raise ConfigError(f"max_piece_len must be >= 1, got {max_piece_len}")
    words = text.lower().split()
    if not words:
        raise EmptyDocumentError("text is empty or whitespace-only")
    tokens = []
    for word in words:
        pieces = tuple(word[i : i + max_piece_len] for i in range(0, len(word), max_piece_len))
        tokens.append(Token(surface=word, pieces=pieces))
    return tokens


@dataclass(frozen=True)
class IngestConfig:
    """How to read one JSONL split: class count, span unit, and tokenizer settings.

    ``vocabulary`` is None when loading the split the vocabulary is built from
    (train); dev and test must pass the frozen train vocabulary.
    """

    split_name: str
    num_classes: int
    max_piece_len: int = DEFAULT_MAX_PIECE_LEN
    span_unit: str = "token"  # or "char"
    max_pieces: int = DEFAULT_MAX_PIECES
    vocabulary: Vocabulary | None = None

    def __post_init__(self):
        if self.span_unit not in ("token", "char"):
            raise ConfigError(f"span_unit must be 'token' or 'char', got {self.span_unit!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")


def _char_span_to_token_indices(text: str, start: int, end: int) -> set[int]:
    # A token is selected when its character interval overlaps [start, end).
    indices = set()
    offset = 0
    for i, word in enumerate(text.split()):
        word_start = text.index(word, offset)
        word_end = word_start + len(word)
        offset = word_end
        if word_start < end and start < word_end:
            indices.add(i)
    return indices


def _parse_line(line: str, lineno: int, cfg: IngestConfig) -> Document:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(record, dict):
        raise ParseError(f"line {lineno}: expected a JSON object")
    for required in ("id", "text", "label"):
        if required not in record:
            raise SchemaError(f"line {lineno}: missing required field {required!r}")
    label = record["label"]
    if not isinstance(label, int) or isinstance(label, bool):
        raise SchemaError(f"line {lineno}: label must be an integer, got {label!r}")
    if not 0 <= label < cfg.num_classes:
        raise SchemaError(
            f"line {lineno}: label {label} outside declared class set [0, {cfg.num_classes})"
        )
    try:
        tokens = tokenize(record["text"], cfg.max_piece_len)
    except EmptyDocumentError as exc:
        raise SchemaError(f"line {lineno}: {exc}") from exc
    query = None
    if record.get("query"):
        query = tuple(tokenize(record["query"], cfg.max_piece_len))

    gold = None
    if record.get("rationale_spans") is not None:
        spans = record["rationale_spans"]
        indices: set[int] = set()
        for span in spans:
            if not (isinstance(span, list) and len(span) == 2):
                raise SchemaError(f"line {lineno}: rationale span {span!r} is not a [start, end) pair")
            start, end = span
            if cfg.span_unit == "token":
                if not (0 <= start < end <= len(tokens)):
                    raise SchemaError(
                        f"line {lineno}: token span [{start}, {end}) out of range for {len(tokens)} tokens"
                    )
                indices.update(range(start, end))
            else:
                indices.update(_char_span_to_token_indices(record["text"].lower(), start, end))
        gold = frozenset(indices)

    doc = Document(id=str(record["id"]), tokens=tuple(tokens), label=label, query=query,
                   gold_rationale=gold)
    seq_pieces = doc.num_pieces + (sum(t.piece_count for t in query) + 1 if query else 0)
    if seq_pieces > cfg.max_pieces:
        raise SchemaError(
            f"line {lineno}: document {doc.id!r} has {seq_pieces} pieces, cap is {cfg.max_pieces}"
        )
    return doc


def load_jsonl(path: str | Path, schema: IngestConfig) -> DatasetSplit:
    """Read one JSONL split. The vocabulary is built from the split itself unless
    the schema carries a frozen one."""
    path = Path(path)
    documents = []
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            documents.append(_parse_line(line, lineno, schema))
    vocab = schema.vocabulary or Vocabulary.from_documents(documents)
    return DatasetSplit(
        name=schema.split_name,
        documents=tuple(documents),
        num_classes=schema.num_classes,
        vocabulary=vocab,
    )


def _gold_to_spans(gold: frozenset[int]) -> list[list[int]]:
    spans = []
    for i in sorted(gold):
        if spans and spans[-1][1] == i:
            spans[-1][1] = i + 1
        else:
            spans.append([i, i + 1])
    return spans


def document_to_record(doc: Document) -> dict:
    record: dict = {"id": doc.id, "text": " ".join(t.surface for t in doc.tokens),
                    "label": doc.label}
    if doc.query:
        record["query"] = " ".join(t.surface for t in doc.query)
    if doc.gold_rationale is not None:
        record["rationale_spans"] = _gold_to_spans(doc.gold_rationale)
    return record


def serialize_jsonl(split: DatasetSplit, path: str | Path) -> None:
    """Write a split back to JSONL (token-unit rationale spans)."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for doc in split.documents:
            handle.write(json.dumps(document_to_record(doc), sort_keys=True) + "\n")


@dataclass(frozen=True)
class SyntheticConfig:
    """Planted-rationale generator settings.

    Each document carries one contiguous span of class-signal words that
    determines its label; everything outside the span is drawn from a shared
    neutral word pool. Half the vocabulary is split evenly into per-class
    signal pools, the rest is neutral. Labels are flipped with probability
    ``noise_rate`` after the span is planted, so the span remains the gold
    rationale even on noisy documents.
    """

    docs_per_split: tuple[int, int, int] = (200, 50, 50)
    doc_len_range: tuple[int, int] = (20, 40)
    vocab_size: int = 200
    num_classes: int = 2
    planted_ratio: float = 0.2
    noise_rate: float = 0.0
    max_piece_len: int = DEFAULT_MAX_PIECE_LEN

    def __post_init__(self):
        if not 0.0 < self.planted_ratio < 1.0:
            raise ConfigError(f"planted_ratio must lie in (0, 1), got {self.planted_ratio}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError(f"noise_rate must lie in [0, 1), got {self.noise_rate}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.doc_len_range[0] < 1 or self.doc_len_range[0] > self.doc_len_range[1]:
            raise ConfigError(f"bad doc_len_range {self.doc_len_range}")
        if self.signal_words_per_class < 1 or self.num_neutral_words < 1:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small for {self.num_classes} classes"
            )

    @property
    def signal_words_per_class(self) -> int:
        return self.vocab_size // (2 * self.num_classes)

    @property
    def num_neutral_words(self) -> int:
        return self.vocab_size - self.num_classes * self.signal_words_per_class


def _word_for_index(index: int) -> str:
    # Deterministic 4-letter word: base-26 over 'a'..'z', zero-padded.
    letters = []
    for _ in range(4):
        letters.append(chr(ord("a") + index % 26))
        index //= 26
    return "".join(reversed(letters))


def synthetic_words(cfg: SyntheticConfig) -> tuple[list[list[str]], list[str]]:
    """The generator's word pools: one signal list per class, then the neutral list."""
    words = [_word_for_index(i) for i in range(cfg.vocab_size)]
    per_class = cfg.signal_words_per_class
    signal = [words[c * per_class : (c + 1) * per_class] for c in range(cfg.num_classes)]
    neutral = words[cfg.num_classes * per_class :]
    return signal, neutral


def planted_span_length(cfg: SyntheticConfig, doc_len: int) -> int:
    return max(1, int(np.floor(cfg.planted_ratio * doc_len + 0.5)))


def _generate_document(cfg: SyntheticConfig, rng: np.random.Generator, doc_id: str,
                       signal: list[list[str]], neutral: list[str]) -> Document:
    lo, hi = cfg.doc_len_range
    length = int(rng.integers(lo, hi + 1))
    span_len = planted_span_length(cfg, length)
    start = int(rng.integers(0, length - span_len + 1))
    true_class = int(rng.integers(0, cfg.num_classes))
    words = []
    for pos in range(length):
        if start <= pos < start + span_len:
            pool = signal[true_class]
        else:
            pool = neutral
        words.append(pool[int(rng.integers(0, len(pool)))])
    label = true_class
    if cfg.noise_rate > 0 and rng.random() < cfg.noise_rate:
        label = int((true_class + 1 + rng.integers(0, cfg.num_classes - 1)) % cfg.num_classes)
    return Document(
        id=doc_id,
        tokens=tuple(tokenize(" ".join(words), cfg.max_piece_len)),
        label=label,
        gold_rationale=frozenset(range(start, start + span_len)),
    )


def make_synthetic(cfg: SyntheticConfig, seed: int) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Generate train/dev/test splits; a pure function of (cfg, seed)."""
    rng = np.random.default_rng(seed)
    signal, neutral = synthetic_words(cfg)
    raw_splits = []
    for split_name, count in zip(SPLIT_NAMES, cfg.docs_per_split):
        docs = [
            _generate_document(cfg, rng, f"{split_name}-{i:05d}", signal, neutral)
            for i in range(count)
        ]
        raw_splits.append((split_name, docs))
    vocab = Vocabulary.from_documents(raw_splits[0][1])
    return tuple(
        DatasetSplit(name=name, documents=tuple(docs), num_classes=cfg.num_classes,
                     vocabulary=vocab)
        for name, docs in raw_splits
    )


def planted_lookup_label(cfg: SyntheticConfig, doc: Document) -> int:
    """Recover the pre-noise label from the planted span via the generator's word pools."""
    if doc.gold_rationale is None:
        raise ConfigError(f"document {doc.id!r} has no planted span")
    signal, _ = synthetic_words(cfg)
    membership = {w: c for c, pool in enumerate(signal) for w in pool}
    votes = [0] * cfg.num_classes
    for i in sorted(doc.gold_rationale):
        cls = membership.get(doc.tokens[i].surface)
        if cls is not None:
            votes[cls] += 1
    return int(np.argmax(votes))


def stats(split: DatasetSplit) -> CorpusStats:
    """Corpus summary: size, length and rationale-ratio moments, label distribution."""
    if len(split.documents) == 0:
        raise ConfigError(f"split {split.name!r} is empty")
    doc_lens = [len(d) for d in split.documents]
    query_lens = [len(d.query) for d in split.documents if d.query]
    ratios = [
        len(d.gold_rationale) / len(d)
        for d in split.documents
        if d.gold_rationale is not None
    ]
    counts = [0] * split.num_classes
    for d in split.documents:
        counts[d.label] += 1
    total = len(split.documents)
    return CorpusStats(
        num_documents=total,
        doc_len_mean=float(np.mean(doc_lens)),
        doc_len_max=int(max(doc_lens)),
        query_len_mean=float(np.mean(query_lens)) if query_lens else None,
        query_len_max=int(max(query_lens)) if query_lens else None,
        rationale_ratio_mean=float(np.mean(ratios)) if ratios else None,
        rationale_ratio_max=float(max(ratios)) if ratios else None,
        label_distribution=tuple(c / total for c in counts),
    )
