"""Faithful rationale extraction for text classification.

The decomposed pipeline trains a support model on full text, turns its token
saliency scores into discrete budgeted rationales, and trains a classifier
that only ever sees those rationales; a REINFORCE-style end-to-end baseline
and an experiment harness round out the package. The most commonly used entry
points are re-exported here; each module remains importable on its own.
"""

from .corpus import (
    Document,
    DatasetSplit,
    SyntheticConfig,
    Vocabulary,
    load_jsonl,
    make_synthetic,
    serialize_jsonl,
)
from .discretize import (
    BudgetSpec,
    RationaleMask,
    apply_rationale,
    best_span,
    global_contig,
    global_topk,
    resolve_k,
    select_masks,
    topk_instance,
)
from .e2e import E2EConfig, RegularizerConfig, predict_with_rationale, train_e2e
from .extractor import TaggerConfig, mix_supervision, tag_and_decode, train_tagger
from .harness import (
    DEFAULT_SEEDS,
    ExperimentConfig,
    expected_best,
    hyperparameter_sweep,
    run_experiment,
)
from .model import ModelConfig, TrainConfig, evaluate, train
from .pipeline import FreshConfig, run_fresh, verify_faithfulness
from .saliency import ScoreVector, attention_scores, gradient_scores, score_corpus

__version__ = "0.1.0"

__all__ = [
    "BudgetSpec",
    "DEFAULT_SEEDS",
    "DatasetSplit",
    "Document",
    "E2EConfig",
    "ExperimentConfig",
    "FreshConfig",
    "ModelConfig",
    "RationaleMask",
    "RegularizerConfig",
    "ScoreVector",
    "SyntheticConfig",
    "TaggerConfig",
    "TrainConfig",
    "Vocabulary",
    "apply_rationale",
    "attention_scores",
    "best_span",
    "evaluate",
    "expected_best",
    "global_contig",
    "global_topk",
    "gradient_scores",
    "hyperparameter_sweep",
    "load_jsonl",
    "make_synthetic",
    "mix_supervision",
    "predict_with_rationale",
    "resolve_k",
    "run_experiment",
    "run_fresh",
    "score_corpus",
    "select_masks",
    "serialize_jsonl",
    "tag_and_decode",
    "topk_instance",
    "train",
    "train_e2e",
    "train_tagger",
    "verify_faithfulness",
]
