"""Experiment harness: seed/ratio/fraction sweeps over the three methods,
hyperparameter search for the end-to-end baseline, and report emission.

Rows carry everything needed to replay one cell (config hash, seed, replay
command). Cells are cached by content hash when a cache directory is given, so
rerunning an identical experiment recomputes nothing and emits byte-identical
metric CSVs. Wall-clock time is kept in rows and JSON reports but deliberately
left out of the CSVs so reruns diff clean.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import (
    DatasetSplit,
    IngestConfig,
    SyntheticConfig,
    load_jsonl,
    make_synthetic,
)
from .discretize import BudgetSpec
from .e2e import (
    E2EConfig,
    RegularizerConfig,
    generator_probabilities,
    predict_with_rationale,
    train_e2e,
)
from .errors import ConfigError, ParseError, RationalesError, SchemaError
from .model import (
    ModelConfig,
    TrainConfig,
    encode_document,
    evaluate,
    macro_f1,
    train,
)
from .pipeline import FreshConfig, run_fresh

DEFAULT_SEEDS = (13, 17, 29, 42, 71)
FALLBACK_SEEDS = (101, 103, 107, 109, 113)
METHODS = ("full_text", "fresh", "e2e_baseline")

CSV_COLUMNS = (
    "method", "scorer", "strategy", "scope", "p", "f", "seed",
    "dev_macro_f1", "test_macro_f1", "test_accuracy", "mean_rationale_ratio",
    "degenerate", "status", "replay",
)
AGGREGATE_COLUMNS = (
    "method", "scorer", "strategy", "scope", "p", "f", "n",
    "mean_test_macro_f1", "min_test_macro_f1", "max_test_macro_f1",
    "std_test_macro_f1", "mean_dev_macro_f1", "mean_rationale_ratio",
)
_FLOAT_COLUMNS = {
    "p", "f", "dev_macro_f1", "test_macro_f1", "test_accuracy",
    "mean_rationale_ratio", "mean_test_macro_f1", "min_test_macro_f1",
    "max_test_macro_f1", "std_test_macro_f1", "mean_dev_macro_f1",
}
_INT_COLUMNS = {"seed", "n"}


@dataclass(frozen=True)
class DatasetSource:
    """Either a synthetic corpus recipe or three JSONL paths."""

    synthetic: SyntheticConfig | None = None
    data_seed: int = 0
    train_path: str | None = None
    dev_path: str | None = None
    test_path: str | None = None
    num_classes: int = 2
    span_unit: str = "token"
    max_piece_len: int = 4

    def __post_init__(self):
        paths = (self.train_path, self.dev_path, self.test_path)
        if self.synthetic is None and any(p is None for p in paths):
            raise ConfigError("dataset needs either a synthetic recipe or all three JSONL paths")
        if self.synthetic is not None and any(p is not None for p in paths):
            raise ConfigError("dataset cannot be both synthetic and JSONL-backed")


def load_dataset(source: DatasetSource) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    if source.synthetic is not None:
        return make_synthetic(source.synthetic, seed=source.data_seed)
    train_split = load_jsonl(source.train_path, IngestConfig(
        split_name="train", num_classes=source.num_classes,
        span_unit=source.span_unit, max_piece_len=source.max_piece_len))
    shared = dict(num_classes=source.num_classes, span_unit=source.span_unit,
                  max_piece_len=source.max_piece_len, vocabulary=train_split.vocabulary)
    dev_split = load_jsonl(source.dev_path, IngestConfig(split_name="dev", **shared))
    test_split = load_jsonl(source.test_path, IngestConfig(split_name="test", **shared))
    return train_split, dev_split, test_split


def synthetic_config_from_dict(payload: dict) -> SyntheticConfig:
    data = dict(payload)
    for key in ("docs_per_split", "doc_len_range"):
        if key in data:
            data[key] = tuple(data[key])
    try:
        return SyntheticConfig(**data)
    except TypeError as exc:
        raise SchemaError(f"synthetic dataset config: {exc}") from exc


def dataset_source_from_dict(payload: dict) -> DatasetSource:
    data = dict(payload)
    if data.get("synthetic") is not None:
        data["synthetic"] = synthetic_config_from_dict(data["synthetic"])
    try:
        return DatasetSource(**data)
    except TypeError as exc:
        raise SchemaError(f"dataset config: {exc}") from exc


def train_config_from_dict(payload: dict) -> TrainConfig:
    try:
        return TrainConfig(**payload)
    except TypeError as exc:
        raise SchemaError(f"train config: {exc}") from exc


def fresh_config_from_dict(payload: dict) -> FreshConfig:
    data = dict(payload)
    if "budget" in data:
        try:
            data["budget"] = BudgetSpec(**data["budget"])
        except TypeError as exc:
            raise SchemaError(f"budget config: {exc}") from exc
    for key in ("support_train", "classifier_train", "tagger_train"):
        if key in data:
            data[key] = train_config_from_dict(data[key])
    try:
        return FreshConfig(**data)
    except TypeError as exc:
        raise SchemaError(f"pipeline config: {exc}") from exc


def e2e_config_from_dict(payload: dict) -> E2EConfig:
    data = dict(payload)
    if "regularizer" in data:
        try:
            data["regularizer"] = RegularizerConfig(**data["regularizer"])
        except TypeError as exc:
            raise SchemaError(f"regularizer config: {exc}") from exc
    if "train" in data:
        data["train"] = train_config_from_dict(data["train"])
    try:
        return E2EConfig(**data)
    except TypeError as exc:
        raise SchemaError(f"e2e config: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep: dataset x method x (seeds x ratios x fractions)."""

    dataset: DatasetSource
    method: str
    fresh: FreshConfig = FreshConfig()
    e2e: E2EConfig = E2EConfig()
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    ratios: tuple[float, ...] = (0.2,)
    fractions: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if len(self.seeds) == 0:
            raise ConfigError("seeds must be nonempty")
        if len(self.ratios) == 0 or len(self.fractions) == 0:
            raise ConfigError("ratios and fractions must be nonempty")


@dataclass(frozen=True)
class ReportRow:
    method: str
    scorer: str
    strategy: str
    scope: str
    p: float
    f: float
    seed: int
    dev_macro_f1: float
    test_macro_f1: float
    test_accuracy: float
    mean_rationale_ratio: float
    wall_time: float
    degenerate: str = ""
    status: str = "ok"
    replay: str = ""


@dataclass(frozen=True)
class AggregateRow:
    method: str
    scorer: str
    strategy: str
    scope: str
    p: float
    f: float
    n: int
    mean_test_macro_f1: float
    min_test_macro_f1: float
    max_test_macro_f1: float
    std_test_macro_f1: float
    mean_dev_macro_f1: float
    mean_rationale_ratio: float


@dataclass(frozen=True)
class ExperimentReport:
    rows: tuple[ReportRow, ...]
    aggregates: tuple[AggregateRow, ...]


def compute_aggregates(rows: Sequence[ReportRow]) -> tuple[AggregateRow, ...]:
    """Group ok rows by configuration; std is the sample standard deviation
    across seeds (0 for a single seed)."""
    groups: dict[tuple, list[ReportRow]] = {}
    order: list[tuple] = []
    for row in rows:
        if row.status != "ok":
            continue
        key = (row.method, row.scorer, row.strategy, row.scope, row.p, row.f)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(row)
    aggregates = []
    for key in order:
        members = groups[key]
        test_scores = np.array([r.test_macro_f1 for r in members])
        aggregates.append(AggregateRow(
            method=key[0], scorer=key[1], strategy=key[2], scope=key[3],
            p=key[4], f=key[5], n=len(members),
            mean_test_macro_f1=float(test_scores.mean()),
            min_test_macro_f1=float(test_scores.min()),
            max_test_macro_f1=float(test_scores.max()),
            std_test_macro_f1=float(test_scores.std(ddof=1)) if len(members) > 1 else 0.0,
            mean_dev_macro_f1=float(np.mean([r.dev_macro_f1 for r in members])),
            mean_rationale_ratio=float(np.mean([r.mean_rationale_ratio for r in members])),
        ))
    return tuple(aggregates)


def _mean_mask_ratio(masks, documents) -> float:
    return float(np.mean([m.k / len(d) for m, d in zip(masks, documents)]))


def run_full_text_cell(data, cfg: ExperimentConfig, seed: int) -> dict:
    train_split, dev_split, test_split = data
    mcfg = ModelConfig(vocab_size=len(train_split.vocabulary),
                       num_classes=train_split.num_classes,
                       embed_dim=cfg.fresh.embed_dim, num_heads=cfg.fresh.num_heads)
    tcfg = replace(cfg.fresh.support_train, seed=seed)

    def enc(split):
        return [encode_document(d, split.vocabulary) for d in split.documents]

    result = train(mcfg, enc(train_split), enc(dev_split), tcfg)
    dev = evaluate(result.params, mcfg, enc(dev_split))
    test = evaluate(result.params, mcfg, enc(test_split))
    return {
        "dev_macro_f1": dev.macro_f1,
        "test_macro_f1": test.macro_f1,
        "test_accuracy": test.accuracy,
        "mean_rationale_ratio": 1.0,
    }


def run_fresh_cell(data, fresh_cfg: FreshConfig) -> dict:
    train_split, dev_split, test_split = data
    result = run_fresh(train_split, dev_split, test_split, fresh_cfg)
    return {
        "dev_macro_f1": result.classifier_metrics["dev"].macro_f1,
        "test_macro_f1": result.classifier_metrics["test"].macro_f1,
        "test_accuracy": result.classifier_metrics["test"].accuracy,
        "mean_rationale_ratio": _mean_mask_ratio(result.masks["test"],
                                                 test_split.documents),
    }


def run_e2e_cell(data, e2e_cfg: E2EConfig, fraction: float, seed: int) -> dict:
    train_split, dev_split, test_split = data
    result = train_e2e(train_split, dev_split, e2e_cfg,
                       supervision_fraction=fraction, seed=seed)
    y_true, y_pred = [], []
    fracs = []
    for doc in test_split.documents:
        label, _ = predict_with_rationale(result.state, doc, test_split.vocabulary,
                                          e2e_cfg)
        y_true.append(doc.label)
        y_pred.append(label)
        probs = generator_probabilities(result.state, doc, test_split.vocabulary)
        fracs.append(float(np.mean(probs >= 0.5)))
    macro, _ = macro_f1(y_true, y_pred, test_split.num_classes)
    accuracy = float(np.mean([t == p for t, p in zip(y_true, y_pred)]))
    return {
        "dev_macro_f1": result.best_dev_macro_f1,
        "test_macro_f1": macro,
        "test_accuracy": accuracy,
        "mean_rationale_ratio": float(np.mean(fracs)),
    }


def _cell_fresh_config(cfg: ExperimentConfig, seed: int, p: float, f: float) -> FreshConfig:
    return replace(
        cfg.fresh,
        budget=replace(cfg.fresh.budget, ratio=p),
        supervision_fraction=f,
        seed=seed,
    )


def _cell_e2e_config(cfg: ExperimentConfig, p: float) -> E2EConfig:
    return replace(
        cfg.e2e,
        truncation_ratio=p,
        regularizer=replace(cfg.e2e.regularizer, desired_ratio=p),
    )


def cell_config_dict(cfg: ExperimentConfig, seed: int, p: float, f: float) -> dict:
    """The CLI-consumable config that reproduces one cell in isolation."""
    return {
        "config_version": 1,
        "dataset": asdict(cfg.dataset),
        "method": cfg.method,
        "fresh": asdict(cfg.fresh),
        "e2e": asdict(cfg.e2e),
        "seed": seed,
        "ratio": p,
        "fraction": f,
    }


def _cell_key(cfg: ExperimentConfig, seed: int, p: float, f: float) -> str:
    blob = json.dumps(cell_config_dict(cfg, seed, p, f), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _replay_command(cfg: ExperimentConfig, key: str, seed: int) -> str:
    command = {"full_text": "train-support", "fresh": "run-fresh",
               "e2e_baseline": "run-e2e"}[cfg.method]
    return f"rationales {command} --config cell-{key}.json --seed {seed}"


def run_experiment(
    cfg: ExperimentConfig,
    cache_dir: str | Path | None = None,
    data: tuple[DatasetSplit, DatasetSplit, DatasetSplit] | None = None,
) -> ExperimentReport:
    """Execute the full Cartesian product of seeds x ratios x fractions.

    A failing cell records an error row and the sweep continues. With a cache
    directory, finished cells are loaded back by content hash instead of being
    recomputed."""
    if data is None:
        data = load_dataset(cfg.dataset)
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in cfg.seeds:
        for p in cfg.ratios:
            for f in cfg.fractions:
                key = _cell_key(cfg, seed, p, f)
                cache_file = cache / f"row-{key}.json" if cache is not None else None
                if cache_file is not None and cache_file.exists():
                    rows.append(ReportRow(**json.loads(cache_file.read_text())))
                    continue
                replay = _replay_command(cfg, key, seed)
                start = time.perf_counter()
                try:
                    if cfg.method == "full_text":
                        metrics = run_full_text_cell(data, cfg, seed)
                    elif cfg.method == "fresh":
                        metrics = run_fresh_cell(data, _cell_fresh_config(cfg, seed, p, f))
                    else:
                        metrics = run_e2e_cell(data, _cell_e2e_config(cfg, p), f, seed)
                    status = "ok"
                except RationalesError as exc:
                    metrics = {"dev_macro_f1": float("nan"),
                               "test_macro_f1": float("nan"),
                               "test_accuracy": float("nan"),
                               "mean_rationale_ratio": float("nan")}
                    status = f"error: {exc}"
                row = ReportRow(
                    method=cfg.method,
                    scorer=cfg.fresh.scorer if cfg.method == "fresh" else "",
                    strategy=cfg.fresh.budget.strategy if cfg.method == "fresh" else "",
                    scope=cfg.fresh.budget.scope if cfg.method == "fresh" else "",
                    p=p, f=f, seed=seed,
                    wall_time=time.perf_counter() - start,
                    status=status,
                    replay=replay,
                    **metrics,
                )
                rows.append(row)
                if cache_file is not None:
                    config_file = cache / f"cell-{key}.json"
                    config_file.write_text(
                        json.dumps(cell_config_dict(cfg, seed, p, f), sort_keys=True,
                                   indent=2) + "\n")
                    cache_file.write_text(json.dumps(asdict(row), sort_keys=True))
    return ExperimentReport(rows=tuple(rows), aggregates=compute_aggregates(rows))


def expected_best(dev_scores: Sequence[float], n: int) -> float:
    """Expected maximum of n uniform-with-replacement draws from the observed
    scores: sum over ascending order statistics v_(i) of
    v_(i) * ((i/N)^n - ((i-1)/N)^n)."""
    if len(dev_scores) == 0:
        raise ConfigError("expected_best needs at least one score")
    if n < 1:
        raise ConfigError(f"draw budget must be >= 1, got {n}")
    ordered = np.sort(np.asarray(dev_scores, dtype=np.float64))
    big_n = len(ordered)
    ranks = np.arange(1, big_n + 1, dtype=np.float64)
    weights = (ranks / big_n) ** n - ((ranks - 1) / big_n) ** n
    return float(np.sum(ordered * weights))


@dataclass(frozen=True)
class SweepGrid:
    """Regularizer search space: log-uniform lambda1, categorical lambda2."""

    lambda1_low: float = 1e-2
    lambda1_high: float = 1.0
    lambda2_choices: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    trials: int = 20

    def __post_init__(self):
        if not 0 < self.lambda1_low <= self.lambda1_high:
            raise ConfigError("lambda1 range must satisfy 0 < low <= high")
        if len(self.lambda2_choices) == 0 or self.trials < 1:
            raise ConfigError("lambda2_choices must be nonempty and trials >= 1")


def sweep_grid_from_dict(payload: dict) -> SweepGrid:
    try:
        return SweepGrid(
            lambda1_low=float(payload["lambda1"]["low"]),
            lambda1_high=float(payload["lambda1"]["high"]),
            lambda2_choices=tuple(float(v) for v in payload["lambda2"]["choices"]),
            trials=int(payload["trials"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"sweep grid: {exc!r}") from exc


def load_sweep_grid(path: str | Path) -> SweepGrid:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"sweep grid {path}: invalid JSON ({exc.msg})") from exc
    return sweep_grid_from_dict(payload)


def draw_trials(grid: SweepGrid, seed: int) -> list[tuple[float, float]]:
    """The deterministic (lambda1, lambda2) draw sequence for a sweep seed."""
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(grid.trials):
        log1 = rng.uniform(np.log(grid.lambda1_low), np.log(grid.lambda1_high))
        lam2 = grid.lambda2_choices[int(rng.integers(0, len(grid.lambda2_choices)))]
        draws.append((float(np.exp(log1)), float(lam2)))
    return draws


@dataclass(frozen=True)
class SweepResult:
    report: ExperimentReport
    scatter: tuple[tuple[float, float], ...]  # (mean rationale fraction, test F1)
    degenerate_fraction: float


def hyperparameter_sweep(
    base: E2EConfig,
    grid: SweepGrid,
    seed: int,
    data: tuple[DatasetSplit, DatasetSplit, DatasetSplit],
    fraction: float = 0.0,
) -> SweepResult:
    """Random search over the regularizer grid. Trial t trains with seed
    seed + t; degenerate trials select almost nothing or almost everything
    (mean selected fraction < 0.02 or > 0.98)."""
    rows = []
    scatter = []
    degenerate_flags = []
    for trial, (lam1, lam2) in enumerate(draw_trials(grid, seed)):
        cfg = replace(base, regularizer=replace(base.regularizer,
                                                lambda1=lam1, lambda2=lam2))
        trial_seed = seed + trial
        replay = (f"rationales run-e2e --seed {trial_seed} "
                  f"--lambda1 {lam1:.6g} --lambda2 {lam2:.6g}")
        start = time.perf_counter()
        try:
            metrics = run_e2e_cell(data, cfg, fraction, trial_seed)
            status = "ok"
            ratio = metrics["mean_rationale_ratio"]
            degenerate = ratio < 0.02 or ratio > 0.98
            scatter.append((ratio, metrics["test_macro_f1"]))
            degenerate_flags.append(degenerate)
        except RationalesError as exc:
            metrics = {"dev_macro_f1": float("nan"), "test_macro_f1": float("nan"),
                       "test_accuracy": float("nan"),
                       "mean_rationale_ratio": float("nan")}
            status = f"error: {exc}"
            degenerate = False
        rows.append(ReportRow(
            method="e2e_baseline", scorer="", strategy="", scope="",
            p=base.truncation_ratio, f=fraction, seed=trial_seed,
            wall_time=time.perf_counter() - start,
            degenerate=str(degenerate).lower(),
            status=status, replay=replay, **metrics,
        ))
    fraction_degenerate = (
        float(np.mean(degenerate_flags)) if degenerate_flags else 0.0
    )
    report = ExperimentReport(rows=tuple(rows), aggregates=compute_aggregates(rows))
    return SweepResult(report=report, scatter=tuple(scatter),
                       degenerate_fraction=fraction_degenerate)


def _format_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def emit(report: ExperimentReport, fmt: str, path: str | Path) -> list[Path]:
    """Write the report. CSV mode writes <path> (rows, fixed column order,
    wall time omitted) plus a sibling aggregates CSV; JSON mode writes one file
    with rows (including wall time) and aggregates."""
    path = Path(path)
    if fmt == "csv":
        with path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in report.rows:
                record = asdict(row)
                writer.writerow([_format_value(record[c]) for c in CSV_COLUMNS])
        agg_path = path.with_name(path.stem + "_aggregates.csv")
        with agg_path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(AGGREGATE_COLUMNS)
            for agg in report.aggregates:
                record = asdict(agg)
                writer.writerow([_format_value(record[c]) for c in AGGREGATE_COLUMNS])
        return [path, agg_path]
    if fmt == "json":
        payload = {
            "rows": [asdict(row) for row in report.rows],
            "aggregates": [asdict(agg) for agg in report.aggregates],
        }
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                        encoding="utf-8")
        return [path]
    raise ConfigError(f"format must be 'csv' or 'json', got {fmt!r}")


def _typed(column: str, raw: str):
    if column in _FLOAT_COLUMNS:
        return float(raw)
    if column in _INT_COLUMNS:
        return int(raw)
    return raw


def parse_report_csv(path: str | Path) -> list[dict]:
    with Path(path).open(encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise SchemaError(f"unexpected CSV header {header}")
        return [
            {c: _typed(c, v) for c, v in zip(header, record)}
            for record in reader
        ]


def parse_report_json(path: str | Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"report {path}: invalid JSON ({exc.msg})") from exc
