"""Token importance scores from a trained classifier.

Two scorers over the full (unmasked) document:

- attention: run the forward pass, average attention weights across heads,
  drop query and separator positions, and sum piece weights per token. The
  result is not renormalized, so with a query the token scores sum to less
  than one.
- gradient: take the gradient of the predicted-class logit w.r.t. each input
  piece embedding, score each piece by its L2 norm, and sum per token.

Scores are importance rankings only; nothing downstream ever reuses the
scoring model's predictions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Document, Vocabulary
from .errors import ParseError, SchemaError, ScoringError
from .model import EncodedDoc, ModelConfig, ModelParams, encode_document, forward, input_gradient

SCORER_NAMES = ("attention", "gradient")


@dataclass(frozen=True)
class ScoreVector:
    """Per-token importance scores for one document."""

    doc_id: str
    scores: np.ndarray
    scorer: str

    def __post_init__(self):
        if not self.scorer:
            raise ScoringError("scorer tag must be a nonempty string")
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.ndim != 1 or scores.shape[0] == 0:
            raise ScoringError(f"document {self.doc_id!r}: scores must be a nonempty vector")
        if not np.all(np.isfinite(scores)):
            raise ScoringError(f"document {self.doc_id!r}: scores contain non-finite values")
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.scores)


def _pool_to_tokens(per_piece: np.ndarray, encoded: EncodedDoc, num_tokens: int) -> np.ndarray:
    doc_positions = encoded.token_owner >= 0
    return np.bincount(
        encoded.token_owner[doc_positions],
        weights=per_piece[doc_positions],
        minlength=num_tokens,
    )


def attention_scores(
    params: ModelParams,
    cfg: ModelConfig,
    doc: Document,
    vocab: Vocabulary,
) -> ScoreVector:
    """Head-averaged attention mass per document token."""
    encoded = encode_document(doc, vocab)
    trace = forward(params, cfg, encoded.piece_ids)
    per_piece = trace.att_weights.mean(axis=0)
    return ScoreVector(
        doc_id=doc.id,
        scores=_pool_to_tokens(per_piece, encoded, len(doc.tokens)),
        scorer="attention",
    )


def gradient_scores(
    params: ModelParams,
    cfg: ModelConfig,
    doc: Document,
    vocab: Vocabulary,
) -> ScoreVector:
    """L2 norm of the predicted-class logit gradient, pooled per token."""
    encoded = encode_document(doc, vocab)
    predicted = int(np.argmax(forward(params, cfg, encoded.piece_ids).logits))
    dx = input_gradient(params, cfg, encoded.piece_ids, predicted)
    per_piece = np.sqrt(np.sum(dx * dx, axis=1))
    return ScoreVector(
        doc_id=doc.id,
        scores=_pool_to_tokens(per_piece, encoded, len(doc.tokens)),
        scorer="gradient",
    )


def score_corpus(
    params: ModelParams,
    cfg: ModelConfig,
    documents: Sequence[Document],
    vocab: Vocabulary,
    scorer: str,
) -> list[ScoreVector]:
    if scorer == "attention":
        fn = attention_scores
    elif scorer == "gradient":
        fn = gradient_scores
    else:
        raise ScoringError(f"unknown scorer {scorer!r}; expected one of {SCORER_NAMES}")
    return [fn(params, cfg, doc, vocab) for doc in documents]


def save_scores(scores: Sequence[ScoreVector], path: str | Path) -> None:
    """One JSON object per line: id, score list, scorer tag."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for sv in scores:
            record = {"id": sv.doc_id, "scores": sv.scores.tolist(), "scorer": sv.scorer}
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def load_scores(path: str | Path) -> list[ScoreVector]:
    result = []
    with Path(path).open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("id", "scores", "scorer"):
                if key not in record:
                    raise SchemaError(f"line {lineno}: missing field {key!r}")
            try:
                sv = ScoreVector(
                    doc_id=str(record["id"]),
                    scores=np.asarray(record["scores"], dtype=np.float64),
                    scorer=record["scorer"],
                )
            except (ScoringError, TypeError, ValueError) as exc:
                raise SchemaError(f"line {lineno}: {exc}") from exc
            result.append(sv)
    return result


def align_scores(documents: Sequence[Document], scores: Sequence[ScoreVector]) -> list[ScoreVector]:
    """Match score vectors to documents by id and validate lengths."""
    by_id = {sv.doc_id: sv for sv in scores}
    if len(by_id) != len(scores):
        raise SchemaError("duplicate document ids in score file")
    aligned = []
    for doc in documents:
        sv = by_id.get(doc.id)
        if sv is None:
            raise SchemaError(f"no scores for document {doc.id!r}")
        if len(sv) != len(doc.tokens):
            raise SchemaError(
                f"document {doc.id!r}: {len(sv)} scores for {len(doc.tokens)} tokens"
            )
        aligned.append(sv)
    return aligned
