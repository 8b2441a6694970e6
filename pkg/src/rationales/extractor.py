"""Trainable token tagger: learns to imitate discretized score masks, optionally
mixed with human rationale supervision, then decodes budgeted masks.

The tagger scores each token with a logistic head over three features: the
token's piece-embedding mean, the mean token embedding of a +/-2 window, and
the token's position ratio. The embedding table is trained jointly with the
head. The same architecture doubles as the Bernoulli mask generator of the
end-to-end baseline.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import DatasetSplit, Document, Vocabulary
from .discretize import BudgetSpec, RationaleMask, best_span, mask_by_id, resolve_k, topk_instance
from .errors import ConfigError, ParseError, SchemaError, TrainingError
from .model import TrainConfig, save_checkpoint, load_checkpoint
from .optim import clip_by_global_norm, init_adam, adam_step

TARGET_SOURCES = ("pseudo", "human")


@dataclass(frozen=True)
class TokenTargets:
    """Binary training targets over one document's tokens."""

    doc_id: str
    labels: np.ndarray
    source: str

    def __post_init__(self):
        if self.source not in TARGET_SOURCES:
            raise SchemaError(f"target source must be one of {TARGET_SOURCES}, got {self.source!r}")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] == 0:
            raise SchemaError(f"targets for {self.doc_id!r} must be a nonempty vector")
        if not np.all((labels == 0) | (labels == 1)):
            raise SchemaError(f"targets for {self.doc_id!r} must be binary")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class TaggerConfig:
    vocab_size: int
    embed_dim: int = 16
    window: int = 2

    def __post_init__(self):
        if self.vocab_size < 1 or self.embed_dim < 1 or self.window < 0:
            raise ConfigError("vocab_size and embed_dim must be >= 1, window >= 0")


@dataclass
class TaggerParams:
    """Embedding table plus the logistic head weights.

    ``w_position`` and ``bias`` are zero-dimensional arrays so the whole set
    travels through the shared optimizer as one dict."""

    embedding: np.ndarray
    w_token: np.ndarray
    w_context: np.ndarray
    w_position: np.ndarray
    bias: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "embedding": self.embedding,
            "w_token": self.w_token,
            "w_context": self.w_context,
            "w_position": self.w_position,
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, tensors: dict[str, np.ndarray]) -> "TaggerParams":
        return cls(**{k: np.asarray(tensors[k], dtype=np.float64) for k in
                      ("embedding", "w_token", "w_context", "w_position", "bias")})

    def copy(self) -> "TaggerParams":
        return TaggerParams.from_dict({k: v.copy() for k, v in self.as_dict().items()})


def init_tagger(cfg: TaggerConfig, rng: np.random.Generator) -> TaggerParams:
    e = cfg.embed_dim
    return TaggerParams(
        embedding=rng.normal(0.0, 0.1, size=(cfg.vocab_size, e)),
        w_token=rng.normal(0.0, 1.0 / np.sqrt(e), size=e),
        w_context=rng.normal(0.0, 1.0 / np.sqrt(e), size=e),
        w_position=np.zeros(()),
        bias=np.zeros(()),
    )


@dataclass(frozen=True)
class FeatureTrace:
    """Cached per-document features for the backward pass."""

    piece_ids: tuple[np.ndarray, ...]
    token_emb: np.ndarray  # (T, E)
    context_emb: np.ndarray  # (T, E)
    position: np.ndarray  # (T,)
    window_bounds: tuple[tuple[int, int], ...]


def document_features(params: TaggerParams, cfg: TaggerConfig, doc: Document,
                      vocab: Vocabulary) -> FeatureTrace:
    piece_ids = tuple(
        np.asarray(vocab.encode(tok.pieces), dtype=np.int64) for tok in doc.tokens
    )
    token_emb = np.stack([params.embedding[ids].mean(axis=0) for ids in piece_ids])
    n = len(piece_ids)
    bounds = tuple((max(0, t - cfg.window), min(n, t + cfg.window + 1)) for t in range(n))
    context_emb = np.stack([token_emb[lo:hi].mean(axis=0) for lo, hi in bounds])
    position = np.arange(n, dtype=np.float64) / max(1, n - 1)
    return FeatureTrace(piece_ids=piece_ids, token_emb=token_emb,
                        context_emb=context_emb, position=position,
                        window_bounds=bounds)


def feature_logits(params: TaggerParams, trace: FeatureTrace) -> np.ndarray:
    return (
        trace.token_emb @ params.w_token
        + trace.context_emb @ params.w_context
        + float(params.w_position) * trace.position
        + float(params.bias)
    )


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def token_probabilities(params: TaggerParams, cfg: TaggerConfig, doc: Document,
                        vocab: Vocabulary) -> np.ndarray:
    """Per-token selection probabilities in document order."""
    return sigmoid(feature_logits(params, document_features(params, cfg, doc, vocab)))


def backward_through_features(
    params: TaggerParams,
    trace: FeatureTrace,
    dlogits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Map a gradient at the token logits back to all tagger parameters."""
    d_token_emb = np.outer(dlogits, params.w_token)
    for t, (lo, hi) in enumerate(trace.window_bounds):
        d_token_emb[lo:hi] += dlogits[t] * params.w_context[None, :] / (hi - lo)
    d_embedding = np.zeros_like(params.embedding)
    for t, ids in enumerate(trace.piece_ids):
        np.add.at(d_embedding, ids, d_token_emb[t] / len(ids))
    return {
        "embedding": d_embedding,
        "w_token": trace.token_emb.T @ dlogits,
        "w_context": trace.context_emb.T @ dlogits,
        "w_position": np.asarray(trace.position @ dlogits),
        "bias": np.asarray(np.sum(dlogits)),
    }


def _bce_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    # Stable elementwise binary cross-entropy; mean over tokens.
    per_token = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    return float(np.mean(per_token))


def tagger_loss_and_grads(
    params: TaggerParams,
    cfg: TaggerConfig,
    doc: Document,
    vocab: Vocabulary,
    labels: np.ndarray,
    l2: float = 0.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean token BCE for one document plus an l2 penalty over all parameters."""
    trace = document_features(params, cfg, doc, vocab)
    logits = feature_logits(params, trace)
    loss = _bce_from_logits(logits, labels)
    dlogits = (sigmoid(logits) - labels) / len(labels)
    grads = backward_through_features(params, trace, dlogits)
    if l2 > 0.0:
        for k, p in params.as_dict().items():
            loss += l2 * float(np.sum(p * p))
            grads[k] = grads[k] + 2.0 * l2 * p
    return loss, grads


def make_pseudo_targets(masks: Sequence[RationaleMask], split: DatasetSplit) -> list[TokenTargets]:
    """Binary targets from discretized masks: 1 iff the token was selected."""
    by_id = mask_by_id(masks)
    targets = []
    for doc in split.documents:
        mask = by_id.get(doc.id)
        if mask is None:
            raise SchemaError(f"no mask for document {doc.id!r}")
        if max(mask.selected) >= len(doc.tokens):
            raise SchemaError(f"mask for {doc.id!r} exceeds document length")
        labels = np.zeros(len(doc.tokens), dtype=np.int64)
        labels[sorted(mask.selected)] = 1
        targets.append(TokenTargets(doc_id=doc.id, labels=labels, source="pseudo"))
    return targets


def gold_targets(doc: Document) -> TokenTargets:
    if doc.gold_rationale is None:
        raise ConfigError(f"document {doc.id!r} has no gold rationale")
    labels = np.zeros(len(doc.tokens), dtype=np.int64)
    labels[sorted(doc.gold_rationale)] = 1
    return TokenTargets(doc_id=doc.id, labels=labels, source="human")


def supervised_subset(split: DatasetSplit, fraction: float, seed: int) -> set[str]:
    """The deterministic seed-derived sample of gold-bearing document ids that
    receives direct supervision; shared by the tagger and the end-to-end
    baseline so both see the same subset."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"supervision fraction must lie in [0, 1], got {fraction}")
    if fraction == 0.0:
        return set()
    gold_ids = [doc.id for doc in split.documents if doc.gold_rationale is not None]
    if not gold_ids:
        raise ConfigError("supervision requested but no document carries a gold rationale")
    count = int(np.ceil(fraction * len(gold_ids)))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(gold_ids), size=count, replace=False)
    return {gold_ids[i] for i in chosen}


def mix_supervision(
    pseudo: Sequence[TokenTargets],
    split: DatasetSplit,
    fraction: float,
    seed: int,
) -> list[TokenTargets]:
    """Replace the targets of a deterministic sample of gold-bearing documents
    with their gold rationales; everything else passes through untouched."""
    if len(pseudo) != len(split.documents):
        raise SchemaError("targets are not aligned with the split")
    chosen = supervised_subset(split, fraction, seed)
    docs_by_id = {doc.id: doc for doc in split.documents}
    out = []
    for targets in pseudo:
        if targets.doc_id in chosen:
            out.append(gold_targets(docs_by_id[targets.doc_id]))
        else:
            out.append(targets)
    return out


@dataclass(frozen=True)
class TaggerResult:
    params: TaggerParams
    config: TaggerConfig
    history: tuple[float, ...]  # mean train loss per epoch


def train_tagger(
    split: DatasetSplit,
    targets: Sequence[TokenTargets],
    tcfg: TrainConfig,
    cfg: TaggerConfig | None = None,
) -> TaggerResult:
    """Mini-batch Adam over per-document BCE with global-norm clipping.

    Deterministic given the seed; raises on numeric divergence."""
    if len(targets) != len(split.documents):
        raise SchemaError("targets are not aligned with the split")
    for doc, tgt in zip(split.documents, targets):
        if doc.id != tgt.doc_id or len(tgt) != len(doc.tokens):
            raise SchemaError(f"targets misaligned at document {doc.id!r}")
    if cfg is None:
        cfg = TaggerConfig(vocab_size=len(split.vocabulary))
    rng = np.random.default_rng(tcfg.seed)
    params = init_tagger(cfg, rng)
    state = init_adam(params.as_dict())
    n = len(split.documents)
    history = []
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, tcfg.batch_size):
            batch = order[start : start + tcfg.batch_size]
            acc = {k: np.zeros_like(p) for k, p in params.as_dict().items()}
            batch_loss = 0.0
            for i in batch:
                doc = split.documents[i]
                loss, grads = tagger_loss_and_grads(
                    params, cfg, doc, split.vocabulary, targets[i].labels, l2=0.0
                )
                batch_loss += loss
                for k in acc:
                    acc[k] += grads[k]
            batch_loss /= len(batch)
            for k in acc:
                acc[k] /= len(batch)
            if tcfg.l2 > 0.0:
                for k, p in params.as_dict().items():
                    batch_loss += tcfg.l2 * float(np.sum(p * p))
                    acc[k] += 2.0 * tcfg.l2 * p
            if not np.isfinite(batch_loss):
                raise TrainingError(f"tagger loss diverged at epoch {epoch}")
            acc, _ = clip_by_global_norm(acc, tcfg.clip_norm)
            params = TaggerParams.from_dict(adam_step(state, params.as_dict(), acc, tcfg.lr))
            epoch_loss += batch_loss * len(batch)
        history.append(epoch_loss / n)
    return TaggerResult(params=params, config=cfg, history=tuple(history))


def tag_and_decode(
    params: TaggerParams,
    cfg: TaggerConfig,
    doc: Document,
    vocab: Vocabulary,
    spec: BudgetSpec,
) -> RationaleMask:
    """Score tokens with the tagger and decode a budgeted mask."""
    if spec.scope != "instance":
        raise ConfigError("tagger decoding is instance-scoped")
    from .saliency import ScoreVector

    probs = token_probabilities(params, cfg, doc, vocab)
    sv = ScoreVector(doc_id=doc.id, scores=probs, scorer="tagger")
    k = resolve_k(len(doc.tokens), spec.ratio)
    if spec.strategy == "top-k":
        return topk_instance(sv, k, ratio=spec.ratio)
    return best_span(sv, k, ratio=spec.ratio)


@dataclass(frozen=True)
class AgreementScore:
    precision: float
    recall: float
    f1: float


def rationale_agreement(pred: RationaleMask, gold: frozenset[int] | set[int] | None) -> AgreementScore | None:
    """Token-level overlap between a predicted mask and a gold rationale.

    Returns None when the gold set is empty or missing (undefined, skipped)."""
    if not gold:
        return None
    overlap = len(pred.selected & set(gold))
    precision = overlap / len(pred.selected)
    recall = overlap / len(gold)
    f1 = 0.0
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return AgreementScore(precision=precision, recall=recall, f1=f1)


def save_targets(targets: Sequence[TokenTargets], path: str | Path) -> None:
    """Mask-format JSONL with a source field; all-zero targets are legal here."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for tgt in targets:
            selected = [int(i) for i in np.flatnonzero(tgt.labels)]
            record = {
                "id": tgt.doc_id,
                "selected": selected,
                "contiguous": False,
                "k": len(selected),
                "source": tgt.source,
            }
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def load_targets(path: str | Path, split: DatasetSplit) -> list[TokenTargets]:
    by_id = {}
    with Path(path).open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("id", "selected", "source"):
                if key not in record:
                    raise SchemaError(f"line {lineno}: missing field {key!r}")
            by_id[str(record["id"])] = (lineno, record)
    targets = []
    for doc in split.documents:
        if doc.id not in by_id:
            raise SchemaError(f"no targets for document {doc.id!r}")
        lineno, record = by_id[doc.id]
        labels = np.zeros(len(doc.tokens), dtype=np.int64)
        for i in record["selected"]:
            if not 0 <= int(i) < len(doc.tokens):
                raise SchemaError(f"line {lineno}: index {i} out of range for {doc.id!r}")
            labels[int(i)] = 1
        try:
            targets.append(TokenTargets(doc_id=doc.id, labels=labels,
                                        source=record["source"]))
        except SchemaError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from exc
    return targets


def save_tagger(path: str | Path, params: TaggerParams, cfg: TaggerConfig) -> None:
    save_checkpoint(path, "tagger", asdict(cfg), params.as_dict())


def load_tagger(path: str | Path) -> tuple[TaggerParams, TaggerConfig]:
    _, config, tensors = load_checkpoint(path, expected_kind="tagger")
    try:
        cfg = TaggerConfig(**config)
    except TypeError as exc:
        raise SchemaError(f"checkpoint {path}: bad tagger config {config!r}") from exc
    params = TaggerParams.from_dict(tensors)
    if params.embedding.shape != (cfg.vocab_size, cfg.embed_dim):
        raise SchemaError(f"checkpoint {path}: embedding shape mismatch")
    return params, cfg
