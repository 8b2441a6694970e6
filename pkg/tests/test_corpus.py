"""Tests for tokenization, ingestion, synthetic generation, and stats."""

import json

import numpy as np
import pytest

from rationales.corpus import (
    CorpusStats,
    DatasetSplit,
    Document,
    IngestConfig,
    SyntheticConfig,
    Token,
    Vocabulary,
    document_to_record,
    load_jsonl,
    make_synthetic,
    planted_lookup_label,
    planted_span_length,
    serialize_jsonl,
    stats,
    synthetic_words,
    tokenize,
)
from rationales.errors import (
    ConfigError,
    EmptyDocumentError,
    ParseError,
    SchemaError,
)


def test_tokenize_lowercases_and_chunks():
    tokens = tokenize("The QUICK brown")
    assert [t.surface for t in tokens] == ["the", "quick", "brown"]
    assert tokens[1].pieces == ("quic", "k")
    assert tokens[0].pieces == ("the",)


def test_tokenize_piece_len_boundaries():
    (tok,) = tokenize("abcdefgh", max_piece_len=3)
    assert tok.pieces == ("abc", "def", "gh")
    (tok,) = tokenize("abcdefgh", max_piece_len=8)
    assert tok.pieces == ("abcdefgh",)
    (tok,) = tokenize("ab", max_piece_len=1)
    assert tok.pieces == ("a", "b")


def test_tokenize_rejects_empty():
    with pytest.raises(EmptyDocumentError):
        tokenize("   \t\n ")
    with pytest.raises(EmptyDocumentError):
        tokenize("")


def test_tokenize_rejects_bad_piece_len():
    with pytest.raises(ConfigError):
        tokenize("abc", max_piece_len=0)


def test_pieces_concatenate_to_surface():
    rng = np.random.default_rng(0)
    letters = "abcdefghijklmnopqrstuvwxyz"
    for _ in range(100):
        n = int(rng.integers(1, 15))
        word = "".join(letters[int(rng.integers(0, 26))] for _ in range(n))
        for width in (1, 2, 3, 4, 7):
            (tok,) = tokenize(word, max_piece_len=width)
            assert "".join(tok.pieces) == word
            assert all(1 <= len(p) <= width for p in tok.pieces)


def test_token_rejects_mismatched_pieces():
    with pytest.raises(SchemaError):
        Token(surface="abc", pieces=("ab", "d"))


def test_document_validates_rationale_indices():
    tokens = tuple(tokenize("a b c"))
    with pytest.raises(SchemaError):
        Document(id="x", tokens=tokens, label=0, gold_rationale=frozenset({3}))
    doc = Document(id="x", tokens=tokens, label=0, gold_rationale=frozenset({0, 2}))
    assert len(doc) == 3
    assert doc.num_pieces == 3


def test_vocabulary_specials_and_order():
    vocab = Vocabulary({"zz", "aa", "mm"})
    assert vocab.pad_id == 0
    assert vocab.unk_id == 1
    assert vocab.sep_id == 2
    assert vocab.id_of("aa") == 3
    assert vocab.id_of("mm") == 4
    assert vocab.id_of("zz") == 5
    assert vocab.id_of("absent") == vocab.unk_id
    assert len(vocab) == 6


def test_vocabulary_roundtrip(tmp_path):
    vocab = Vocabulary({"beta", "alpha", "gamma"})
    path = tmp_path / "vocab.tsv"
    vocab.save(path)
    assert Vocabulary.load(path) == vocab
    # Canonical format: piece\tid per line.
    lines = path.read_text().splitlines()
    assert f"alpha\t3" in lines


def test_vocabulary_load_rejects_garbage(tmp_path):
    path = tmp_path / "vocab.tsv"
    path.write_text("alpha\tnotanint\n")
    with pytest.raises(ParseError):
        Vocabulary.load(path)
    path.write_text("alpha\t7\n")
    with pytest.raises(ParseError):
        Vocabulary.load(path)


def _write_jsonl(path, records):
    with path.open("w") as handle:
        for rec in records:
            handle.write(json.dumps(rec) + "\n")


def test_load_jsonl_basic(tmp_path):
    path = tmp_path / "train.jsonl"
    _write_jsonl(path, [
        {"id": "d0", "text": "Good movie overall", "label": 1,
         "rationale_spans": [[0, 1]]},
        {"id": "d1", "text": "bad plot", "label": 0},
    ])
    split = load_jsonl(path, IngestConfig(split_name="train", num_classes=2))
    assert split.name == "train"
    assert len(split) == 2
    d0, d1 = split.documents
    assert d0.gold_rationale == frozenset({0})
    assert d1.gold_rationale is None
    assert d0.tokens[0].surface == "good"
    assert "good" in split.vocabulary


def test_load_jsonl_query_and_char_spans(tmp_path):
    path = tmp_path / "train.jsonl"
    # "alpha beta gamma": beta occupies chars [6, 10).
    _write_jsonl(path, [
        {"id": "q0", "text": "alpha beta gamma", "query": "what is beta",
         "label": 0, "rationale_spans": [[6, 10]]},
    ])
    cfg = IngestConfig(split_name="train", num_classes=2, span_unit="char")
    split = load_jsonl(path, cfg)
    doc = split.documents[0]
    assert doc.query is not None and [t.surface for t in doc.query] == ["what", "is", "beta"]
    assert doc.gold_rationale == frozenset({1})


def test_load_jsonl_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "d0", "text": "ok fine", "label": 0}\n{not json\n')
    with pytest.raises(ParseError, match="line 2"):
        load_jsonl(path, IngestConfig(split_name="train", num_classes=2))

    _write_jsonl(path, [{"id": "d0", "text": "ok", "label": 5}])
    with pytest.raises(SchemaError, match="line 1"):
        load_jsonl(path, IngestConfig(split_name="train", num_classes=2))

    _write_jsonl(path, [{"id": "d0", "label": 0}])
    with pytest.raises(SchemaError, match="text"):
        load_jsonl(path, IngestConfig(split_name="train", num_classes=2))

    _write_jsonl(path, [{"id": "d0", "text": "a b", "label": 0,
                         "rationale_spans": [[1, 9]]}])
    with pytest.raises(SchemaError, match="span"):
        load_jsonl(path, IngestConfig(split_name="train", num_classes=2))


def test_load_jsonl_rejects_bool_and_float_labels(tmp_path):
    path = tmp_path / "bad.jsonl"
    _write_jsonl(path, [{"id": "d0", "text": "a", "label": True}])
    with pytest.raises(SchemaError):
        load_jsonl(path, IngestConfig(split_name="train", num_classes=2))
    _write_jsonl(path, [{"id": "d0", "text": "a", "label": 0.0}])
    with pytest.raises(SchemaError):
        load_jsonl(path, IngestConfig(split_name="train", num_classes=2))


def test_load_jsonl_piece_cap(tmp_path):
    path = tmp_path / "long.jsonl"
    _write_jsonl(path, [{"id": "d0", "text": "word " * 40, "label": 0}])
    cfg = IngestConfig(split_name="train", num_classes=2, max_pieces=10)
    with pytest.raises(SchemaError, match="cap"):
        load_jsonl(path, cfg)


def test_frozen_vocabulary_is_reused(tmp_path):
    train_path = tmp_path / "train.jsonl"
    dev_path = tmp_path / "dev.jsonl"
    _write_jsonl(train_path, [{"id": "t0", "text": "alpha beta", "label": 0}])
    _write_jsonl(dev_path, [{"id": "v0", "text": "alpha newword", "label": 1}])
    train = load_jsonl(train_path, IngestConfig(split_name="train", num_classes=2))
    dev = load_jsonl(dev_path, IngestConfig(split_name="dev", num_classes=2,
                                            vocabulary=train.vocabulary))
    assert dev.vocabulary is train.vocabulary
    assert dev.vocabulary.id_of("newword") == dev.vocabulary.unk_id


def test_serialize_roundtrip(tmp_path):
    cfg = SyntheticConfig(docs_per_split=(12, 4, 4))
    train, dev, test = make_synthetic(cfg, seed=7)
    path = tmp_path / "train.jsonl"
    serialize_jsonl(train, path)
    reloaded = load_jsonl(path, IngestConfig(split_name="train", num_classes=2,
                                             vocabulary=train.vocabulary))
    assert len(reloaded) == len(train)
    for a, b in zip(train.documents, reloaded.documents):
        assert a.id == b.id
        assert a.label == b.label
        assert [t.surface for t in a.tokens] == [t.surface for t in b.tokens]
        assert a.gold_rationale == b.gold_rationale


def test_document_to_record_merges_adjacent_indices():
    tokens = tuple(tokenize("a b c d e"))
    doc = Document(id="x", tokens=tokens, label=0,
                   gold_rationale=frozenset({0, 1, 3}))
    rec = document_to_record(doc)
    assert rec["rationale_spans"] == [[0, 2], [3, 4]]


def test_synthetic_is_deterministic():
    cfg = SyntheticConfig(docs_per_split=(10, 3, 3), noise_rate=0.1)
    a = make_synthetic(cfg, seed=5)
    b = make_synthetic(cfg, seed=5)
    for sa, sb in zip(a, b):
        for da, db in zip(sa.documents, sb.documents):
            assert da.id == db.id
            assert da.label == db.label
            assert [t.surface for t in da.tokens] == [t.surface for t in db.tokens]
            assert da.gold_rationale == db.gold_rationale
    c = make_synthetic(cfg, seed=6)
    assert any(
        [t.surface for t in da.tokens] != [t.surface for t in dc.tokens]
        for da, dc in zip(a[0].documents, c[0].documents)
    )


def test_synthetic_shapes_and_ids():
    cfg = SyntheticConfig(docs_per_split=(10, 4, 6), doc_len_range=(15, 25))
    train, dev, test = make_synthetic(cfg, seed=3)
    assert (len(train), len(dev), len(test)) == (10, 4, 6)
    assert train.documents[0].id == "train-00000"
    assert dev.documents[3].id == "dev-00003"
    assert test.documents[5].id == "test-00005"
    for split in (train, dev, test):
        assert split.vocabulary is train.vocabulary
        for doc in split.documents:
            assert 15 <= len(doc) <= 25


def test_synthetic_planted_span_properties():
    cfg = SyntheticConfig(docs_per_split=(50, 10, 10), planted_ratio=0.2,
                          doc_len_range=(20, 40))
    train, _, _ = make_synthetic(cfg, seed=11)
    signal, neutral = synthetic_words(cfg)
    signal_sets = [set(pool) for pool in signal]
    neutral_set = set(neutral)
    for doc in train.documents:
        gold = sorted(doc.gold_rationale)
        # Contiguous, correct length.
        assert gold == list(range(gold[0], gold[-1] + 1))
        assert len(gold) == planted_span_length(cfg, len(doc))
        # In-span words come from exactly one class pool, off-span words are neutral.
        span_words = {doc.tokens[i].surface for i in gold}
        owners = {c for c, pool in enumerate(signal_sets) if span_words & pool}
        assert len(owners) == 1
        off_words = {t.surface for i, t in enumerate(doc.tokens) if i not in doc.gold_rationale}
        assert off_words <= neutral_set


def test_planted_span_length_rounds_half_up():
    cfg = SyntheticConfig(planted_ratio=0.25)
    assert planted_span_length(cfg, 2) == 1  # 0.5 rounds up
    assert planted_span_length(cfg, 4) == 1
    assert planted_span_length(cfg, 6) == 2  # 1.5 rounds up
    assert planted_span_length(cfg, 1) == 1  # floor of 1


def test_synthetic_noise_flips_label_not_span():
    cfg = SyntheticConfig(docs_per_split=(300, 10, 10), noise_rate=0.3)
    train, _, _ = make_synthetic(cfg, seed=19)
    flips = sum(
        1 for doc in train.documents if planted_lookup_label(cfg, doc) != doc.label
    )
    # 300 draws at p=0.3: expect ~90, allow wide slack.
    assert 50 <= flips <= 130


def test_planted_lookup_label_matches_labels_when_noiseless():
    cfg = SyntheticConfig(docs_per_split=(60, 10, 10), noise_rate=0.0, num_classes=3,
                          vocab_size=300)
    train, dev, test = make_synthetic(cfg, seed=23)
    for split in (train, dev, test):
        for doc in split.documents:
            assert planted_lookup_label(cfg, doc) == doc.label


def test_synthetic_vocab_small_enough_for_pieces():
    cfg = SyntheticConfig(vocab_size=100)
    signal, neutral = synthetic_words(cfg)
    words = [w for pool in signal for w in pool] + neutral
    assert len(words) == 100
    assert len(set(words)) == 100
    assert all(len(w) == 4 for w in words)
    # Single piece per word at the default piece width.
    (tok,) = tokenize(words[0])
    assert tok.piece_count == 1


def test_synthetic_config_validation():
    with pytest.raises(ConfigError):
        SyntheticConfig(planted_ratio=0.0)
    with pytest.raises(ConfigError):
        SyntheticConfig(noise_rate=1.0)
    with pytest.raises(ConfigError):
        SyntheticConfig(num_classes=1)
    with pytest.raises(ConfigError):
        SyntheticConfig(vocab_size=3, num_classes=2)
    with pytest.raises(ConfigError):
        SyntheticConfig(doc_len_range=(5, 2))


def test_stats_values():
    cfg = SyntheticConfig(docs_per_split=(40, 10, 10))
    train, _, _ = make_synthetic(cfg, seed=2)
    st = stats(train)
    assert isinstance(st, CorpusStats)
    assert st.num_documents == 40
    doc_lens = [len(d) for d in train.documents]
    assert st.doc_len_max == max(doc_lens)
    assert st.doc_len_mean == pytest.approx(sum(doc_lens) / 40)
    assert st.query_len_mean is None and st.query_len_max is None
    assert st.rationale_ratio_max <= 0.5
    assert abs(sum(st.label_distribution) - 1.0) < 1e-12
    assert all(p >= 0 for p in st.label_distribution)


def test_stats_label_distribution_exact():
    tokens = tuple(tokenize("w x"))
    docs = tuple(
        Document(id=f"d{i}", tokens=tokens, label=lab)
        for i, lab in enumerate([0, 0, 1, 2])
    )
    split = DatasetSplit(name="train", documents=docs, num_classes=3,
                         vocabulary=Vocabulary.from_documents(docs))
    st = stats(split)
    assert st.label_distribution == (0.5, 0.25, 0.25)


def test_split_validates_labels_and_name():
    tokens = tuple(tokenize("w"))
    doc = Document(id="d", tokens=tokens, label=2)
    vocab = Vocabulary.from_documents([doc])
    with pytest.raises(SchemaError):
        DatasetSplit(name="train", documents=(doc,), num_classes=2, vocabulary=vocab)
    with pytest.raises(ConfigError):
        DatasetSplit(name="eval", documents=(doc,), num_classes=3, vocabulary=vocab)
