"""Compact attention classifier over piece sequences, with exact analytic gradients.

Architecture: an embedding table feeds H attention heads, each with a learned
query vector and a key projection. Head h attends over all pieces and pools the
key vectors themselves (keys double as values); the concatenated head contexts
go through a linear output layer. Everything runs in float64 and the backward
pass is derived by hand so it can be checked against finite differences.

Sequence layout: when a document has a query, the encoded sequence is
query pieces, one separator piece, then the pieces of the (possibly masked)
document tokens. Without a query there is no separator. Masked-out tokens are
physically absent from the sequence, so classifying a masked document is
exactly classifying the shorter document.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Document, Vocabulary
from .errors import ConfigError, EmptyDocumentError, ParseError, SchemaError
from .optim import clip_by_global_norm, init_adam, adam_step

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_classes: int
    embed_dim: int = 32
    num_heads: int = 4

    def __post_init__(self):
        if self.vocab_size < 1 or self.num_classes < 2:
            raise ConfigError("vocab_size must be >= 1 and num_classes >= 2")
        if self.num_heads < 1 or self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must be a positive multiple of "
                f"num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class ModelParams:
    """All trainable tensors. Shapes: embedding (V, E), queries (H, D),
    key_projs (H, E, D), out_weight (E, C), out_bias (C,)."""

    embedding: np.ndarray
    queries: np.ndarray
    key_projs: np.ndarray
    out_weight: np.ndarray
    out_bias: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "embedding": self.embedding,
            "queries": self.queries,
            "key_projs": self.key_projs,
            "out_weight": self.out_weight,
            "out_bias": self.out_bias,
        }

    @classmethod
    def from_dict(cls, tensors: dict[str, np.ndarray]) -> "ModelParams":
        return cls(**{k: np.asarray(tensors[k], dtype=np.float64) for k in
                      ("embedding", "queries", "key_projs", "out_weight", "out_bias")})

    def copy(self) -> "ModelParams":
        return ModelParams.from_dict({k: v.copy() for k, v in self.as_dict().items()})


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Scaled gaussian init; draws happen in a fixed field order for determinism."""
    e, h, d, c = cfg.embed_dim, cfg.num_heads, cfg.head_dim, cfg.num_classes
    return ModelParams(
        embedding=rng.normal(0.0, 0.1, size=(cfg.vocab_size, e)),
        queries=rng.normal(0.0, 1.0 / np.sqrt(d), size=(h, d)),
        key_projs=rng.normal(0.0, 1.0 / np.sqrt(e), size=(h, e, d)),
        out_weight=rng.normal(0.0, 1.0 / np.sqrt(e), size=(e, c)),
        out_bias=np.zeros(c),
    )


@dataclass(frozen=True)
class EncodedDoc:
    """A piece-id sequence ready for the model, with token ownership bookkeeping.

    ``token_owner[j]`` is the document-token index that piece j belongs to, or
    -1 for query and separator pieces.
    """

    doc_id: str
    piece_ids: np.ndarray
    token_owner: np.ndarray
    label: int


def encode_document(
    doc: Document,
    vocab: Vocabulary,
    selected: Iterable[int] | None = None,
) -> EncodedDoc:
    """Flatten a document (optionally restricted to ``selected`` token indices)
    into the model's input sequence."""
    keep = None if selected is None else set(selected)
    ids: list[int] = []
    owner: list[int] = []
    if doc.query:
        for tok in doc.query:
            ids.extend(vocab.encode(tok.pieces))
            owner.extend([-1] * tok.piece_count)
        ids.append(vocab.sep_id)
        owner.append(-1)
    kept_any = False
    for t, tok in enumerate(doc.tokens):
        if keep is not None and t not in keep:
            continue
        kept_any = True
        ids.extend(vocab.encode(tok.pieces))
        owner.extend([t] * tok.piece_count)
    if not kept_any:
        raise EmptyDocumentError(f"document {doc.id!r}: selection keeps no tokens")
    return EncodedDoc(
        doc_id=doc.id,
        piece_ids=np.asarray(ids, dtype=np.int64),
        token_owner=np.asarray(owner, dtype=np.int64),
        label=doc.label,
    )


@dataclass(frozen=True)
class ForwardTrace:
    """Intermediate activations kept for the backward pass and for saliency."""

    embeddings: np.ndarray  # (T, E)
    keys: np.ndarray  # (H, T, D)
    att_logits: np.ndarray  # (H, T)
    att_weights: np.ndarray  # (H, T)
    context: np.ndarray  # (E,)
    logits: np.ndarray  # (C,)
    probs: np.ndarray  # (C,)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x)
    return shifted - np.log(np.sum(np.exp(shifted)))


def forward_from_embeddings(params: ModelParams, cfg: ModelConfig, x: np.ndarray) -> ForwardTrace:
    """Run the model on an explicit (T, E) embedding matrix."""
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] != cfg.embed_dim:
        raise ConfigError(f"expected a (T, {cfg.embed_dim}) embedding matrix, got {x.shape}")
    keys = np.einsum("te,hed->htd", x, params.key_projs)
    att_logits = np.einsum("htd,hd->ht", keys, params.queries)
    att_weights = softmax(att_logits, axis=1)
    context = np.einsum("ht,htd->hd", att_weights, keys).reshape(cfg.embed_dim)
    logits = context @ params.out_weight + params.out_bias
    return ForwardTrace(
        embeddings=x,
        keys=keys,
        att_logits=att_logits,
        att_weights=att_weights,
        context=context,
        logits=logits,
        probs=softmax(logits),
    )


def forward(params: ModelParams, cfg: ModelConfig, piece_ids: np.ndarray) -> ForwardTrace:
    if len(piece_ids) == 0:
        raise EmptyDocumentError("cannot run the model on an empty sequence")
    return forward_from_embeddings(params, cfg, params.embedding[piece_ids])


def backward_from_logits(
    params: ModelParams,
    cfg: ModelConfig,
    trace: ForwardTrace,
    dlogits: np.ndarray,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backpropagate an arbitrary gradient at the logits.

    Returns parameter gradients (without any regularizer contribution) plus the
    gradient w.r.t. the input embedding matrix.
    """
    h, d = cfg.num_heads, cfg.head_dim
    x = trace.embeddings
    d_out_weight = np.outer(trace.context, dlogits)
    d_out_bias = dlogits.copy()
    dcontext = (params.out_weight @ dlogits).reshape(h, d)
    # Value path: context_h = sum_t att_ht * keys_htd.
    dkeys = np.einsum("ht,hd->htd", trace.att_weights, dcontext)
    datt = np.einsum("htd,hd->ht", trace.keys, dcontext)
    # Softmax jacobian per head.
    ds = trace.att_weights * (datt - np.sum(datt * trace.att_weights, axis=1, keepdims=True))
    d_queries = np.einsum("ht,htd->hd", ds, trace.keys)
    # Score path: s_ht = keys_htd . q_hd.
    dkeys += np.einsum("ht,hd->htd", ds, params.queries)
    d_key_projs = np.einsum("te,htd->hed", x, dkeys)
    dx = np.einsum("htd,hed->te", dkeys, params.key_projs)
    grads = {
        "embedding": np.zeros_like(params.embedding),
        "queries": d_queries,
        "key_projs": d_key_projs,
        "out_weight": d_out_weight,
        "out_bias": d_out_bias,
    }
    return grads, dx


def input_gradient(
    params: ModelParams,
    cfg: ModelConfig,
    piece_ids: np.ndarray,
    class_index: int,
) -> np.ndarray:
    """Gradient of one class logit w.r.t. each input piece embedding, shape (T, E)."""
    trace = forward(params, cfg, piece_ids)
    dlogits = np.zeros(cfg.num_classes)
    dlogits[class_index] = 1.0
    _, dx = backward_from_logits(params, cfg, trace, dlogits)
    return dx


def l2_penalty(params: ModelParams, l2: float) -> float:
    return l2 * sum(float(np.sum(p * p)) for p in params.as_dict().values())


def loss_and_grads(
    params: ModelParams,
    cfg: ModelConfig,
    piece_ids: np.ndarray,
    label: int,
    l2: float = 0.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Negative log likelihood of ``label`` plus an l2 penalty over all
    parameters, with exact gradients."""
    trace = forward(params, cfg, piece_ids)
    log_probs = log_softmax(trace.logits)
    loss = -float(log_probs[label])
    dlogits = trace.probs.copy()
    dlogits[label] -= 1.0
    grads, dx = backward_from_logits(params, cfg, trace, dlogits)
    np.add.at(grads["embedding"], piece_ids, dx)
    if l2 > 0.0:
        loss += l2_penalty(params, l2)
        for k, p in params.as_dict().items():
            grads[k] = grads[k] + 2.0 * l2 * p
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-3
    epochs: int = 20
    batch_size: int = 32
    l2: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr must be > 0, epochs and batch_size >= 1")
        if self.l2 < 0 or self.clip_norm <= 0:
            raise ConfigError("l2 must be >= 0 and clip_norm > 0")


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    per_class_f1: tuple[float, ...]
    num_examples: int


def macro_f1(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> tuple[float, tuple[float, ...]]:
    """Unweighted mean of per-class F1. A class with no predictions and no gold
    occurrences contributes 0."""
    per_class = []
    for c in range(num_classes):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class.append(f1)
    return float(np.mean(per_class)), tuple(per_class)


def predict(params: ModelParams, cfg: ModelConfig, piece_ids: np.ndarray) -> int:
    return int(np.argmax(forward(params, cfg, piece_ids).logits))


def evaluate(params: ModelParams, cfg: ModelConfig, examples: Sequence[EncodedDoc]) -> Metrics:
    if not examples:
        raise ConfigError("cannot evaluate on an empty example list")
    y_true = [ex.label for ex in examples]
    y_pred = [predict(params, cfg, ex.piece_ids) for ex in examples]
    accuracy = float(np.mean([t == p for t, p in zip(y_true, y_pred)]))
    macro, per_class = macro_f1(y_true, y_pred, cfg.num_classes)
    return Metrics(accuracy=accuracy, macro_f1=macro, per_class_f1=per_class,
                   num_examples=len(examples))


def batch_loss_and_grads(
    params: ModelParams,
    cfg: ModelConfig,
    batch: Sequence[EncodedDoc],
    l2: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean data loss over the batch plus one l2 penalty."""
    total = 0.0
    acc = {k: np.zeros_like(p) for k, p in params.as_dict().items()}
    for ex in batch:
        loss, grads = loss_and_grads(params, cfg, ex.piece_ids, ex.label, l2=0.0)
        total += loss
        for k in acc:
            acc[k] += grads[k]
    n = len(batch)
    for k in acc:
        acc[k] /= n
    loss = total / n
    if l2 > 0.0:
        loss += l2_penalty(params, l2)
        for k, p in params.as_dict().items():
            acc[k] += 2.0 * l2 * p
    return loss, acc


@dataclass(frozen=True)
class TrainEpoch:
    epoch: int
    train_loss: float
    dev_accuracy: float
    dev_macro_f1: float


@dataclass(frozen=True)
class TrainResult:
    params: ModelParams
    history: tuple[TrainEpoch, ...]
    best_epoch: int
    best_dev_macro_f1: float


def train(
    cfg: ModelConfig,
    train_examples: Sequence[EncodedDoc],
    dev_examples: Sequence[EncodedDoc],
    tcfg: TrainConfig,
) -> TrainResult:
    """Mini-batch Adam with global-norm clipping and best-dev-macro-F1 selection.

    All randomness (init, shuffling) flows from ``tcfg.seed``; reruns with the
    same inputs reproduce the same parameters bit for bit. Ties on dev macro-F1
    keep the earlier epoch.
    """
    if not train_examples:
        raise ConfigError("train split is empty")
    rng = np.random.default_rng(tcfg.seed)
    params = init_params(cfg, rng)
    state = init_adam(params.as_dict())
    best = params.copy()
    best_f1 = -1.0
    best_epoch = 0
    history = []
    n = len(train_examples)
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, tcfg.batch_size):
            batch = [train_examples[i] for i in order[start : start + tcfg.batch_size]]
            loss, grads = batch_loss_and_grads(params, cfg, batch, tcfg.l2)
            grads, _ = clip_by_global_norm(grads, tcfg.clip_norm)
            new_values = adam_step(state, params.as_dict(), grads, tcfg.lr)
            params = ModelParams.from_dict(new_values)
            epoch_loss += loss * len(batch)
        if dev_examples:
            dev_metrics = evaluate(params, cfg, dev_examples)
            dev_acc, dev_f1 = dev_metrics.accuracy, dev_metrics.macro_f1
        else:
            dev_acc, dev_f1 = float("nan"), float("nan")
        history.append(TrainEpoch(epoch=epoch, train_loss=epoch_loss / n,
                                  dev_accuracy=dev_acc, dev_macro_f1=dev_f1))
        if dev_examples and dev_f1 > best_f1:
            best = params.copy()
            best_f1 = dev_f1
            best_epoch = epoch
    if not dev_examples:
        best, best_f1, best_epoch = params, float("nan"), tcfg.epochs
    return TrainResult(params=best, history=tuple(history), best_epoch=best_epoch,
                       best_dev_macro_f1=best_f1)


def save_checkpoint(path: str | Path, kind: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Versioned JSON tensor container shared by every trainable component."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "tensors": {k: np.asarray(v, dtype=np.float64).tolist() for k, v in tensors.items()},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path, expected_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint {path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(payload, dict):
        raise SchemaError(f"checkpoint {path}: expected a JSON object")
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise SchemaError(
            f"checkpoint {path}: format_version {version!r}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    for key in ("kind", "config", "tensors"):
        if key not in payload:
            raise SchemaError(f"checkpoint {path}: missing field {key!r}")
    kind = payload["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise SchemaError(f"checkpoint {path}: kind {kind!r}, expected {expected_kind!r}")
    tensors = {k: np.asarray(v, dtype=np.float64) for k, v in payload["tensors"].items()}
    return kind, payload["config"], tensors


def save_model(path: str | Path, params: ModelParams, cfg: ModelConfig) -> None:
    save_checkpoint(path, "classifier", asdict(cfg), params.as_dict())


def load_model(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    _, config, tensors = load_checkpoint(path, expected_kind="classifier")
    try:
        cfg = ModelConfig(**config)
    except TypeError as exc:
        raise SchemaError(f"checkpoint {path}: bad model config {config!r}") from exc
    params = ModelParams.from_dict(tensors)
    if params.embedding.shape != (cfg.vocab_size, cfg.embed_dim):
        raise SchemaError(
            f"checkpoint {path}: embedding shape {params.embedding.shape} does not "
            f"match config {(cfg.vocab_size, cfg.embed_dim)}"
        )
    return params, cfg
