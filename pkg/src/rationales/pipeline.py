"""The decomposed rationale pipeline: support scorer, extractor, classifier.

Stages run strictly in order: train a support model on full text, convert its
importance scores into discrete masks (directly, or through a trained tagger),
reduce every split to rationale-only documents, then train and evaluate a
fresh classifier exclusively on those reductions. The classifier never sees an
unselected token, which is what makes the extracted rationales faithful; the
audit at the end re-derives every input sequence independently and counts
mismatches.

Per-stage seeds are derived from the run seed by a fixed scheme:
support = seed, tagger = seed + 1, classifier = seed + 2.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .corpus import DatasetSplit, Document
from .discretize import (
    BudgetSpec,
    RationaleMask,
    apply_rationale,
    mask_by_id,
    select_masks,
)
from .errors import ConfigError, FaithfulnessError, RationalesError
from .extractor import (
    TaggerConfig,
    TaggerResult,
    make_pseudo_targets,
    mix_supervision,
    rationale_agreement,
    tag_and_decode,
    train_tagger,
)
from .model import (
    EncodedDoc,
    Metrics,
    ModelConfig,
    ModelParams,
    TrainConfig,
    encode_document,
    evaluate,
    train,
)
from .saliency import SCORER_NAMES, ScoreVector, score_corpus

EXTRACTOR_MODES = ("heuristic", "tagger")
SPLIT_ORDER = ("train", "dev", "test")


@dataclass(frozen=True)
class FreshConfig:
    """Everything a decomposed run needs besides the data itself."""

    scorer: str = "attention"
    budget: BudgetSpec = BudgetSpec(ratio=0.2)
    extractor_mode: str = "heuristic"
    supervision_fraction: float = 0.0
    embed_dim: int = 32
    num_heads: int = 4
    tagger_embed_dim: int = 16
    support_train: TrainConfig = TrainConfig()
    classifier_train: TrainConfig = TrainConfig()
    tagger_train: TrainConfig = TrainConfig()
    seed: int = 13

    def __post_init__(self):
        if self.scorer not in SCORER_NAMES:
            raise ConfigError(f"scorer must be one of {SCORER_NAMES}, got {self.scorer!r}")
        if self.extractor_mode not in EXTRACTOR_MODES:
            raise ConfigError(
                f"extractor_mode must be one of {EXTRACTOR_MODES}, got {self.extractor_mode!r}"
            )
        if not 0.0 <= self.supervision_fraction <= 1.0:
            raise ConfigError("supervision_fraction must lie in [0, 1]")
        if self.supervision_fraction > 0.0 and self.extractor_mode != "tagger":
            raise ConfigError("rationale supervision requires the tagger extractor")
        if self.extractor_mode == "tagger" and self.budget.scope != "instance":
            raise ConfigError("the tagger extractor decodes instance-scoped budgets only")


@dataclass(frozen=True)
class AgreementSummary:
    """Mean mask/gold overlap over documents that carry a gold rationale."""

    mean_precision: float
    mean_recall: float
    mean_f1: float
    evaluated: int
    skipped: int


@dataclass(frozen=True)
class FaithfulnessAudit:
    """Re-derived input-sequence check over every document the classifier saw."""

    total_documents: int
    violations: int
    violating_ids: tuple[str, ...]
    length_histogram: dict[int, int]


@dataclass(frozen=True)
class FreshResult:
    support_params: ModelParams
    support_cfg: ModelConfig
    support_metrics: dict[str, Metrics]
    tagger: TaggerResult | None
    masks: dict[str, list[RationaleMask]]
    reduced: dict[str, DatasetSplit]
    classifier_params: ModelParams
    classifier_cfg: ModelConfig
    classifier_metrics: dict[str, Metrics]
    agreement: AgreementSummary | None
    audit: FaithfulnessAudit
    config: FreshConfig


@contextmanager
def _stage(name: str):
    try:
        yield
    except RationalesError as exc:
        raise type(exc)(f"stage {name}: {exc}") from exc


def _encode_split(split: DatasetSplit) -> list[EncodedDoc]:
    return [encode_document(doc, split.vocabulary) for doc in split.documents]


def support_seed(seed: int) -> int:
    return seed


def tagger_seed(seed: int) -> int:
    return seed + 1


def classifier_seed(seed: int) -> int:
    return seed + 2


def train_support(
    train_split: DatasetSplit,
    dev_split: DatasetSplit,
    cfg: FreshConfig,
) -> tuple[ModelParams, ModelConfig]:
    """Stage 1: the full-text support model whose scores drive extraction."""
    mcfg = ModelConfig(
        vocab_size=len(train_split.vocabulary),
        num_classes=train_split.num_classes,
        embed_dim=cfg.embed_dim,
        num_heads=cfg.num_heads,
    )
    tcfg = replace(cfg.support_train, seed=support_seed(cfg.seed))
    result = train(mcfg, _encode_split(train_split), _encode_split(dev_split), tcfg)
    return result.params, mcfg


def extract_masks(
    splits: dict[str, DatasetSplit],
    support_params: ModelParams,
    support_cfg: ModelConfig,
    cfg: FreshConfig,
) -> tuple[dict[str, list[RationaleMask]], TaggerResult | None]:
    """Stages 2-3: score every split, then discretize (optionally through a
    tagger trained on the train split's pseudo-targets)."""
    scores = {
        name: score_corpus(support_params, support_cfg, split.documents,
                           split.vocabulary, cfg.scorer)
        for name, split in splits.items()
    }
    if cfg.extractor_mode == "heuristic":
        return {name: select_masks(scores[name], cfg.budget) for name in splits}, None

    train_split = splits["train"]
    pseudo_masks = select_masks(scores["train"], cfg.budget)
    targets = make_pseudo_targets(pseudo_masks, train_split)
    targets = mix_supervision(targets, train_split, cfg.supervision_fraction,
                              tagger_seed(cfg.seed))
    tagger = train_tagger(
        train_split,
        targets,
        replace(cfg.tagger_train, seed=tagger_seed(cfg.seed)),
        TaggerConfig(vocab_size=len(train_split.vocabulary), embed_dim=cfg.tagger_embed_dim),
    )
    masks = {
        name: [
            tag_and_decode(tagger.params, tagger.config, doc, split.vocabulary, cfg.budget)
            for doc in split.documents
        ]
        for name, split in splits.items()
    }
    return masks, tagger


def build_rationale_split(split: DatasetSplit, masks: Sequence[RationaleMask]) -> DatasetSplit:
    """Reduce every document to its mask; unselected tokens are gone for good."""
    by_id = mask_by_id(masks)
    reduced = []
    for doc in split.documents:
        mask = by_id.get(doc.id)
        if mask is None:
            raise ConfigError(f"no mask for document {doc.id!r}")
        reduced.append(apply_rationale(doc, mask))
    return DatasetSplit(name=split.name, documents=tuple(reduced),
                        num_classes=split.num_classes, vocabulary=split.vocabulary)


def train_classifier_on_masks(
    splits: dict[str, DatasetSplit],
    masks: dict[str, list[RationaleMask]],
    cfg: FreshConfig,
) -> tuple[ModelParams, ModelConfig, dict[str, DatasetSplit]]:
    """Stages 4-5: build rationale-only splits and train the final classifier
    on them. Depends on the masks alone, never on the support model."""
    reduced = {name: build_rationale_split(split, masks[name])
               for name, split in splits.items()}
    mcfg = ModelConfig(
        vocab_size=len(splits["train"].vocabulary),
        num_classes=splits["train"].num_classes,
        embed_dim=cfg.embed_dim,
        num_heads=cfg.num_heads,
    )
    tcfg = replace(cfg.classifier_train, seed=classifier_seed(cfg.seed))
    result = train(mcfg, _encode_split(reduced["train"]), _encode_split(reduced["dev"]), tcfg)
    return result.params, mcfg, reduced


def _expected_sequence(doc: Document, split: DatasetSplit, mask: RationaleMask) -> list[int]:
    # Independent reconstruction of what the classifier must have seen:
    # query pieces, separator (only with a query), then selected-token pieces.
    vocab = split.vocabulary
    ids: list[int] = []
    if doc.query:
        for tok in doc.query:
            ids.extend(vocab.encode(tok.pieces))
        ids.append(vocab.sep_id)
    for index in sorted(mask.selected):
        ids.extend(vocab.encode(doc.tokens[index].pieces))
    return ids


def verify_faithfulness(
    splits: dict[str, DatasetSplit],
    masks: dict[str, list[RationaleMask]],
    reduced: dict[str, DatasetSplit],
    strict: bool = True,
) -> FaithfulnessAudit:
    """Compare the classifier's actual input sequences against sequences
    re-derived from the original documents and masks. Any mismatch is a
    faithfulness violation; strict mode raises on the first nonzero count."""
    total = 0
    violating: list[str] = []
    histogram: dict[int, int] = {}
    for name, split in splits.items():
        by_id = mask_by_id(masks[name])
        reduced_docs = {doc.id: doc for doc in reduced[name].documents}
        for doc in split.documents:
            mask = by_id.get(doc.id)
            red = reduced_docs.get(doc.id)
            if mask is None or red is None:
                violating.append(doc.id)
                continue
            total += 1
            histogram[mask.k] = histogram.get(mask.k, 0) + 1
            expected = _expected_sequence(doc, split, mask)
            seen = encode_document(red, split.vocabulary).piece_ids.tolist()
            if expected != seen:
                violating.append(doc.id)
    audit = FaithfulnessAudit(
        total_documents=total,
        violations=len(violating),
        violating_ids=tuple(violating),
        length_histogram=histogram,
    )
    if strict and audit.violations:
        raise FaithfulnessError(
            f"{audit.violations} faithfulness violations: {sorted(violating)[:10]}"
        )
    return audit


def run_fresh(
    train_split: DatasetSplit,
    dev_split: DatasetSplit,
    test_split: DatasetSplit,
    cfg: FreshConfig,
) -> FreshResult:
    """Execute the full decomposed pipeline. Deterministic given cfg.seed."""
    splits = {"train": train_split, "dev": dev_split, "test": test_split}
    with _stage("support"):
        support_params, support_cfg = train_support(train_split, dev_split, cfg)
        support_metrics = {
            "dev": evaluate(support_params, support_cfg, _encode_split(dev_split)),
            "test": evaluate(support_params, support_cfg, _encode_split(test_split)),
        }
    with _stage("extract"):
        masks, tagger = extract_masks(splits, support_params, support_cfg, cfg)
    with _stage("classify"):
        clas_params, clas_cfg, reduced = train_classifier_on_masks(splits, masks, cfg)
        classifier_metrics = {
            "dev": evaluate(clas_params, clas_cfg, _encode_split(reduced["dev"])),
            "test": evaluate(clas_params, clas_cfg, _encode_split(reduced["test"])),
        }
    with _stage("audit"):
        audit = verify_faithfulness(splits, masks, reduced, strict=True)
    agreement = summarize_agreement(test_split.documents, masks["test"])
    return FreshResult(
        support_params=support_params,
        support_cfg=support_cfg,
        support_metrics=support_metrics,
        tagger=tagger,
        masks=masks,
        reduced=reduced,
        classifier_params=clas_params,
        classifier_cfg=clas_cfg,
        classifier_metrics=classifier_metrics,
        agreement=agreement,
        audit=audit,
        config=cfg,
    )


def summarize_agreement(
    documents: Sequence[Document],
    masks: Sequence[RationaleMask],
) -> AgreementSummary | None:
    """Aggregate mask/gold token overlap; None when no document has gold."""
    by_id = mask_by_id(masks)
    precisions, recalls, f1s = [], [], []
    skipped = 0
    for doc in documents:
        mask = by_id.get(doc.id)
        if mask is None:
            skipped += 1
            continue
        score = rationale_agreement(mask, doc.gold_rationale)
        if score is None:
            skipped += 1
            continue
        precisions.append(score.precision)
        recalls.append(score.recall)
        f1s.append(score.f1)
    if not f1s:
        return None
    return AgreementSummary(
        mean_precision=float(np.mean(precisions)),
        mean_recall=float(np.mean(recalls)),
        mean_f1=float(np.mean(f1s)),
        evaluated=len(f1s),
        skipped=skipped,
    )
