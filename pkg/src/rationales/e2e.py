"""End-to-end rationalization baseline: a Bernoulli mask generator and a
classifier trained jointly with a score-function (REINFORCE) estimator.

The generator reuses the tagger architecture to produce per-token selection
probabilities. Each step samples hard masks, classifies the mask-reduced
document (token-removal semantics), and adds a sparsity/contiguity
regularizer. The classifier receives exact gradients; the generator receives
(sample loss - moving baseline) * grad log-probability. An exponential moving
average of sample losses is the variance-reducing baseline. At inference the
thresholded mask is truncated to a fixed budget, which guards against the
all-or-nothing degeneration this estimator is prone to.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import DatasetSplit, Document, Vocabulary
from .discretize import RationaleMask, resolve_k
from .errors import ConfigError, TrainingError
from .extractor import (
    TaggerConfig,
    TaggerParams,
    backward_through_features,
    document_features,
    feature_logits,
    gold_targets,
    init_tagger,
    sigmoid,
    supervised_subset,
)
from .model import (
    ModelConfig,
    ModelParams,
    TrainConfig,
    encode_document,
    forward,
    init_params,
    loss_and_grads,
    macro_f1,
)
from .optim import AdamState, clip_by_global_norm, init_adam, adam_step

GeneratorParams = TaggerParams
GeneratorConfig = TaggerConfig


@dataclass(frozen=True)
class RegularizerConfig:
    """Sparsity/contiguity penalty weights and the free rationale length ratio."""

    lambda1: float = 0.5
    lambda2: float = 0.5
    desired_ratio: float = 0.2

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("regularizer weights must be nonnegative")
        if not 0.0 < self.desired_ratio <= 1.0:
            raise ConfigError(f"desired_ratio must lie in (0, 1], got {self.desired_ratio}")


@dataclass(frozen=True)
class E2EConfig:
    regularizer: RegularizerConfig = RegularizerConfig()
    samples: int = 1
    baseline_momentum: float = 0.9
    train: TrainConfig = TrainConfig()
    truncation_ratio: float = 0.2
    enc_embed_dim: int = 32
    enc_heads: int = 4
    gen_embed_dim: int = 16
    gen_window: int = 2

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigError("samples per instance must be >= 1")
        if not 0.0 <= self.baseline_momentum < 1.0:
            raise ConfigError("baseline momentum must lie in [0, 1)")
        if not 0.0 < self.truncation_ratio <= 1.0:
            raise ConfigError("truncation_ratio must lie in (0, 1]")


def omega(z: np.ndarray, length: int, rcfg: RegularizerConfig) -> float:
    """Rationale shape penalty: selected fraction beyond the free ratio plus
    normalized count of selection transitions."""
    if length < 2:
        raise ConfigError(f"regularizer needs length >= 2, got {length}")
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (length,):
        raise ConfigError(f"mask shape {z.shape} does not match length {length}")
    conciseness = max(0.0, float(np.sum(z)) / length - rcfg.desired_ratio)
    transitions = float(np.sum(np.abs(np.diff(z)))) / (length - 1)
    return rcfg.lambda1 * conciseness + rcfg.lambda2 * transitions


def sample_mask(
    probs: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """Independent Bernoulli draw per token; returns the mask and its joint
    log-probability under ``probs``."""
    z = (rng.random(len(probs)) < probs).astype(np.int64)
    return z, mask_log_prob(z, probs)


def mask_log_prob(z: np.ndarray, probs: np.ndarray) -> float:
    tiny = np.finfo(np.float64).tiny
    per_token = np.where(z == 1, np.log(np.maximum(probs, tiny)),
                         np.log(np.maximum(1.0 - probs, tiny)))
    return float(np.sum(per_token))


def score_function_dlogits(loss: float, baseline: float, z: np.ndarray,
                           probs: np.ndarray) -> np.ndarray:
    """Gradient of (loss - baseline) * log p(z) at the generator logits:
    the per-token factor is z_t - p_t."""
    return (loss - baseline) * (z - probs)


def truncate_rationale(
    z: np.ndarray,
    probs: np.ndarray,
    k: int,
    doc_id: str,
) -> RationaleMask:
    """Force the mask to exactly min(k, length) tokens: drop the lowest-probability
    selected tokens when too long, add the highest-probability unselected tokens
    when too short. Ties prefer the lower index."""
    if k < 1:
        raise ConfigError(f"truncation budget must be >= 1, got {k}")
    length = len(z)
    target = min(k, length)
    selected = [i for i in range(length) if z[i] == 1]
    if len(selected) > target:
        selected.sort(key=lambda i: (-probs[i], i))
        chosen = set(selected[:target])
    else:
        chosen = set(selected)
        rest = sorted((i for i in range(length) if z[i] == 0),
                      key=lambda i: (-probs[i], i))
        for i in rest:
            if len(chosen) >= target:
                break
            chosen.add(i)
    return RationaleMask(doc_id=doc_id, selected=frozenset(chosen), contiguous=False,
                         k=target, source="e2e")


@dataclass
class E2EState:
    """Everything the joint training loop mutates."""

    gen_params: GeneratorParams
    enc_params: ModelParams
    gen_cfg: GeneratorConfig
    enc_cfg: ModelConfig
    gen_opt: AdamState
    enc_opt: AdamState
    baseline: float = 0.0


def init_e2e(vocab_size: int, num_classes: int, cfg: E2EConfig,
             rng: np.random.Generator) -> E2EState:
    """Fixed init order (generator first) keeps runs reproducible."""
    gen_cfg = GeneratorConfig(vocab_size=vocab_size, embed_dim=cfg.gen_embed_dim,
                              window=cfg.gen_window)
    enc_cfg = ModelConfig(vocab_size=vocab_size, num_classes=num_classes,
                          embed_dim=cfg.enc_embed_dim, num_heads=cfg.enc_heads)
    gen_params = init_tagger(gen_cfg, rng)
    enc_params = init_params(enc_cfg, rng)
    return E2EState(
        gen_params=gen_params,
        enc_params=enc_params,
        gen_cfg=gen_cfg,
        enc_cfg=enc_cfg,
        gen_opt=init_adam(gen_params.as_dict()),
        enc_opt=init_adam(enc_params.as_dict()),
    )


@dataclass(frozen=True)
class StepStats:
    total_loss: float
    encoder_loss: float
    regularizer: float
    selected_frac: float
    baseline: float


def e2e_step(
    state: E2EState,
    docs: Sequence[Document],
    vocab: Vocabulary,
    cfg: E2EConfig,
    rng: np.random.Generator,
    supervised: dict[str, np.ndarray] | None = None,
) -> StepStats:
    """One joint update on a batch of documents. Mutates ``state`` in place.

    An all-zero sampled mask is repaired by promoting the highest-probability
    token (its log-probability is recomputed for the repaired mask).
    """
    gen_acc = {k: np.zeros_like(p) for k, p in state.gen_params.as_dict().items()}
    enc_acc = {k: np.zeros_like(p) for k, p in state.enc_params.as_dict().items()}
    sum_enc_loss = 0.0
    sum_reg = 0.0
    sum_frac = 0.0
    n_samples = len(docs) * cfg.samples
    for doc in docs:
        trace = document_features(state.gen_params, state.gen_cfg, doc, vocab)
        logits = feature_logits(state.gen_params, trace)
        probs = sigmoid(logits)
        gen_dlogits = np.zeros_like(probs)
        for _ in range(cfg.samples):
            z, _ = sample_mask(probs, rng)
            if z.sum() == 0:
                z = z.copy()
                z[int(np.argmax(probs))] = 1
            enc_input = encode_document(doc, vocab, selected=np.flatnonzero(z))
            enc_loss, enc_grads = loss_and_grads(
                state.enc_params, state.enc_cfg, enc_input.piece_ids, doc.label, l2=0.0
            )
            reg = omega(z, len(doc.tokens), cfg.regularizer)
            sample_loss = enc_loss + reg
            gen_dlogits += score_function_dlogits(sample_loss, state.baseline, z, probs)
            state.baseline = (
                cfg.baseline_momentum * state.baseline
                + (1.0 - cfg.baseline_momentum) * sample_loss
            )
            for k in enc_acc:
                enc_acc[k] += enc_grads[k] / n_samples
            sum_enc_loss += enc_loss
            sum_reg += reg
            sum_frac += float(np.sum(z)) / len(doc.tokens)
        gen_dlogits /= n_samples
        if supervised and doc.id in supervised:
            labels = supervised[doc.id]
            gen_dlogits += (probs - labels) / (len(labels) * len(docs))
        doc_grads = backward_through_features(state.gen_params, trace, gen_dlogits)
        for k in gen_acc:
            gen_acc[k] += doc_grads[k]
    l2 = cfg.train.l2
    if l2 > 0.0:
        for k, p in state.gen_params.as_dict().items():
            gen_acc[k] += 2.0 * l2 * p
        for k, p in state.enc_params.as_dict().items():
            enc_acc[k] += 2.0 * l2 * p
    mean_total = (sum_enc_loss + sum_reg) / n_samples
    if not np.isfinite(mean_total):
        raise TrainingError("joint loss diverged")
    gen_acc, _ = clip_by_global_norm(gen_acc, cfg.train.clip_norm)
    enc_acc, _ = clip_by_global_norm(enc_acc, cfg.train.clip_norm)
    state.gen_params = GeneratorParams.from_dict(
        adam_step(state.gen_opt, state.gen_params.as_dict(), gen_acc, cfg.train.lr)
    )
    state.enc_params = ModelParams.from_dict(
        adam_step(state.enc_opt, state.enc_params.as_dict(), enc_acc, cfg.train.lr)
    )
    return StepStats(
        total_loss=mean_total,
        encoder_loss=sum_enc_loss / n_samples,
        regularizer=sum_reg / n_samples,
        selected_frac=sum_frac / n_samples,
        baseline=state.baseline,
    )


def generator_probabilities(state: E2EState, doc: Document, vocab: Vocabulary) -> np.ndarray:
    trace = document_features(state.gen_params, state.gen_cfg, doc, vocab)
    return sigmoid(feature_logits(state.gen_params, trace))


def predict_with_rationale(
    state: E2EState,
    doc: Document,
    vocab: Vocabulary,
    cfg: E2EConfig,
) -> tuple[int, RationaleMask]:
    """Deterministic inference: threshold the generator at 0.5, truncate to the
    configured budget, classify the reduced document."""
    probs = generator_probabilities(state, doc, vocab)
    z = (probs >= 0.5).astype(np.int64)
    k = resolve_k(len(doc.tokens), cfg.truncation_ratio)
    mask = truncate_rationale(z, probs, k, doc.id)
    enc_input = encode_document(doc, vocab, selected=mask.selected)
    label = int(np.argmax(forward(state.enc_params, state.enc_cfg,
                                  enc_input.piece_ids).logits))
    return label, mask


@dataclass(frozen=True)
class E2EEpoch:
    epoch: int
    train_loss: float
    selected_frac: float
    dev_accuracy: float
    dev_macro_f1: float


@dataclass(frozen=True)
class E2EResult:
    state: E2EState
    config: E2EConfig
    history: tuple[E2EEpoch, ...]
    best_epoch: int
    best_dev_macro_f1: float


def _dev_metrics(state: E2EState, dev: DatasetSplit, cfg: E2EConfig) -> tuple[float, float]:
    y_true, y_pred = [], []
    for doc in dev.documents:
        label, _ = predict_with_rationale(state, doc, dev.vocabulary, cfg)
        y_true.append(doc.label)
        y_pred.append(label)
    accuracy = float(np.mean([t == p for t, p in zip(y_true, y_pred)]))
    macro, _ = macro_f1(y_true, y_pred, dev.num_classes)
    return accuracy, macro


def train_e2e(
    train_split: DatasetSplit,
    dev_split: DatasetSplit,
    cfg: E2EConfig,
    supervision_fraction: float = 0.0,
    seed: int = 0,
) -> E2EResult:
    """Joint REINFORCE training with dev-macro-F1 model selection on truncated
    rationales. Fully deterministic given the seed."""
    rng = np.random.default_rng(seed)
    state = init_e2e(len(train_split.vocabulary), train_split.num_classes, cfg, rng)
    supervised: dict[str, np.ndarray] = {}
    if supervision_fraction > 0.0:
        chosen = supervised_subset(train_split, supervision_fraction, seed)
        by_id = {doc.id: doc for doc in train_split.documents}
        supervised = {
            doc_id: gold_targets(by_id[doc_id]).labels.astype(np.float64)
            for doc_id in chosen
        }
    docs = train_split.documents
    n = len(docs)
    history = []
    best_state = None
    best_f1 = -1.0
    best_epoch = 0
    for epoch in range(1, cfg.train.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        epoch_frac = 0.0
        batches = 0
        for start in range(0, n, cfg.train.batch_size):
            batch = [docs[i] for i in order[start : start + cfg.train.batch_size]]
            try:
                stats = e2e_step(state, batch, train_split.vocabulary, cfg, rng, supervised)
            except TrainingError as exc:
                raise TrainingError(f"{exc} (epoch {epoch})") from exc
            epoch_loss += stats.total_loss * len(batch)
            epoch_frac += stats.selected_frac * len(batch)
            batches += 1
        dev_acc, dev_f1 = _dev_metrics(state, dev_split, cfg)
        history.append(E2EEpoch(epoch=epoch, train_loss=epoch_loss / n,
                                selected_frac=epoch_frac / n,
                                dev_accuracy=dev_acc, dev_macro_f1=dev_f1))
        if dev_f1 > best_f1:
            best_f1 = dev_f1
            best_epoch = epoch
            best_state = E2EState(
                gen_params=state.gen_params.copy(),
                enc_params=state.enc_params.copy(),
                gen_cfg=state.gen_cfg,
                enc_cfg=state.enc_cfg,
                gen_opt=state.gen_opt,
                enc_opt=state.enc_opt,
                baseline=state.baseline,
            )
    assert best_state is not None
    return E2EResult(state=best_state, config=cfg, history=tuple(history),
                     best_epoch=best_epoch, best_dev_macro_f1=best_f1)
