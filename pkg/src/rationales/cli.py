"""Command line entry point.

One subcommand per pipeline stage (synth/ingest/train-support/score/extract/
train-extractor) plus end-to-end drivers (run-fresh/run-e2e/sweep/report).
Options resolve in three layers: explicit flags beat the --config file, which
beats built-in defaults. Config files are versioned JSON and parsed in two
phases (version gate, then key audit) so stale or misspelled configs fail
loudly. Success prints a JSON summary on stdout and exits 0; any expected
failure prints a machine-readable error object on stderr and exits 1.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .corpus import (
    IngestConfig,
    SyntheticConfig,
    load_jsonl,
    make_synthetic,
    serialize_jsonl,
)
from .discretize import BudgetSpec, save_masks, load_masks, select_masks
from .e2e import (
    E2EConfig,
    generator_probabilities,
    predict_with_rationale,
    train_e2e,
)
from .errors import ConfigError, ParseError, RationalesError, SchemaError
from .extractor import (
    TaggerConfig,
    make_pseudo_targets,
    mix_supervision,
    save_tagger,
    tag_and_decode,
    train_tagger,
)
from .harness import (
    DatasetSource,
    ExperimentReport,
    ReportRow,
    compute_aggregates,
    dataset_source_from_dict,
    e2e_config_from_dict,
    emit,
    fresh_config_from_dict,
    load_dataset,
    load_sweep_grid,
    hyperparameter_sweep,
    parse_report_json,
    sweep_grid_from_dict,
    synthetic_config_from_dict,
)
from .model import encode_document, evaluate, load_model, macro_f1, save_model
from .pipeline import (
    FreshConfig,
    run_fresh,
    tagger_seed,
    train_support,
)
from .saliency import align_scores, load_scores, save_scores, score_corpus

CONFIG_VERSION = 1
_KNOWN_CONFIG_KEYS = {
    "config_version", "dataset", "method", "seed", "ratio", "fraction",
    "scorer", "strategy", "scope", "extractor_mode", "fresh", "e2e", "grid",
}


class _Parser(argparse.ArgumentParser):
    """Route argparse's own failures through the JSON error channel."""

    def error(self, message):
        raise ConfigError(message)


def load_cli_config(path: str | Path) -> dict:
    """Two-phase config read: JSON + version gate first, key audit second."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"config {path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(payload, dict):
        raise SchemaError(f"config {path}: expected a JSON object")
    version = payload.get("config_version")
    if version != CONFIG_VERSION:
        raise SchemaError(
            f"config {path}: config_version must be {CONFIG_VERSION}, got {version!r}")
    unknown = sorted(set(payload) - _KNOWN_CONFIG_KEYS)
    if unknown:
        raise SchemaError(f"config {path}: unknown keys {unknown}")
    return payload


def _resolve(flag_value, config: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def _seed(args, config: dict) -> int:
    return int(_resolve(args.seed, config, "seed", 13))


def _dataset_source(args, config: dict) -> DatasetSource:
    data_dir = getattr(args, "data_dir", None)
    if data_dir is not None:
        root = Path(data_dir)
        return DatasetSource(
            train_path=str(root / "train.jsonl"),
            dev_path=str(root / "dev.jsonl"),
            test_path=str(root / "test.jsonl"),
            num_classes=args.classes,
            span_unit=args.span_unit,
        )
    if "dataset" in config:
        return dataset_source_from_dict(config["dataset"])
    raise ConfigError("no dataset: pass --data-dir or a config with a 'dataset' section")


def _fresh_config(args, config: dict, force_tagger: bool = False) -> FreshConfig:
    base = fresh_config_from_dict(config["fresh"]) if "fresh" in config else FreshConfig()
    budget = replace(
        base.budget,
        ratio=float(_resolve(getattr(args, "ratio", None), config, "ratio",
                             base.budget.ratio)),
        strategy=_resolve(getattr(args, "strategy", None), config, "strategy",
                          base.budget.strategy),
        scope=_resolve(getattr(args, "scope", None), config, "scope",
                       base.budget.scope),
    )
    mode = _resolve(getattr(args, "extractor", None), config,
                    "extractor_mode", base.extractor_mode)
    return replace(
        base,
        scorer=_resolve(getattr(args, "scorer", None), config, "scorer", base.scorer),
        budget=budget,
        extractor_mode="tagger" if force_tagger else mode,
        supervision_fraction=float(_resolve(getattr(args, "fraction", None), config,
                                            "fraction", base.supervision_fraction)),
        seed=_seed(args, config),
    )


def _e2e_config(args, config: dict) -> E2EConfig:
    base = e2e_config_from_dict(config["e2e"]) if "e2e" in config else E2EConfig()
    ratio = float(_resolve(getattr(args, "ratio", None), config, "ratio",
                           base.truncation_ratio))
    regularizer = replace(base.regularizer, desired_ratio=ratio)
    lam1 = getattr(args, "lambda1", None)
    lam2 = getattr(args, "lambda2", None)
    if lam1 is not None:
        regularizer = replace(regularizer, lambda1=lam1)
    if lam2 is not None:
        regularizer = replace(regularizer, lambda2=lam2)
    return replace(base, truncation_ratio=ratio, regularizer=regularizer)


def _int_tuple(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from exc


def _encode_split(split):
    return [encode_document(doc, split.vocabulary) for doc in split.documents]


def _single_row_report(row: ReportRow) -> ExperimentReport:
    return ExperimentReport(rows=(row,), aggregates=compute_aggregates([row]))


def _emit_metrics(report: ExperimentReport, fmt: str, out_dir: Path) -> list[str]:
    return [str(p) for p in emit(report, fmt, out_dir / f"metrics.{fmt}")]


def _cmd_synth(args, config: dict, out_dir: Path) -> dict:
    dataset_cfg = config.get("dataset", {})
    if dataset_cfg.get("synthetic"):
        syn = synthetic_config_from_dict(dataset_cfg["synthetic"])
    else:
        docs = _int_tuple(args.docs)
        if len(docs) != 3:
            raise ConfigError("--docs needs three comma-separated counts")
        lens = _int_tuple(args.len)
        if len(lens) != 2:
            raise ConfigError("--len needs two comma-separated bounds")
        syn = SyntheticConfig(
            docs_per_split=docs,
            doc_len_range=lens,
            vocab_size=args.vocab,
            num_classes=args.classes,
            planted_ratio=args.planted_ratio,
            noise_rate=args.noise,
        )
    data_seed = args.data_seed
    if data_seed is None:
        data_seed = dataset_cfg.get("data_seed", _seed(args, config))
    splits = make_synthetic(syn, seed=data_seed)
    outputs = []
    for split in splits:
        path = out_dir / f"{split.name}.jsonl"
        serialize_jsonl(split, path)
        outputs.append(str(path))
    vocab_path = out_dir / "vocab.tsv"
    splits[0].vocabulary.save(vocab_path)
    outputs.append(str(vocab_path))
    return {
        "command": "synth",
        "outputs": outputs,
        "documents": {split.name: len(split.documents) for split in splits},
        "data_seed": data_seed,
    }


def _cmd_ingest(args, config: dict, out_dir: Path) -> dict:
    paths = {"train": args.train, "dev": args.dev, "test": args.test}
    missing = [name for name, path in paths.items() if path is None]
    if missing:
        raise ConfigError(f"ingest needs --train/--dev/--test, missing {missing}")
    shared = dict(num_classes=args.classes, span_unit=args.span_unit)
    train_split = load_jsonl(paths["train"], IngestConfig(split_name="train", **shared))
    vocab = train_split.vocabulary
    splits = [train_split]
    for name in ("dev", "test"):
        splits.append(load_jsonl(paths[name], IngestConfig(
            split_name=name, vocabulary=vocab, **shared)))
    outputs = []
    for split in splits:
        path = out_dir / f"{split.name}.jsonl"
        serialize_jsonl(split, path)
        outputs.append(str(path))
    vocab_path = out_dir / "vocab.tsv"
    vocab.save(vocab_path)
    outputs.append(str(vocab_path))
    return {
        "command": "ingest",
        "outputs": outputs,
        "documents": {split.name: len(split.documents) for split in splits},
        "vocabulary": len(vocab),
    }


def _cmd_train_support(args, config: dict, out_dir: Path) -> dict:
    data = load_dataset(_dataset_source(args, config))
    train_split, dev_split, test_split = data
    cfg = _fresh_config(args, config)
    start = time.perf_counter()
    params, mcfg = train_support(train_split, dev_split, cfg)
    wall = time.perf_counter() - start
    dev = evaluate(params, mcfg, _encode_split(dev_split))
    test = evaluate(params, mcfg, _encode_split(test_split))
    model_path = out_dir / "support.json"
    save_model(model_path, params, mcfg)
    row = ReportRow(
        method="full_text", scorer="", strategy="", scope="",
        p=float(config.get("ratio", 1.0)), f=0.0, seed=cfg.seed,
        dev_macro_f1=dev.macro_f1, test_macro_f1=test.macro_f1,
        test_accuracy=test.accuracy, mean_rationale_ratio=1.0,
        wall_time=wall, replay=_replay(args, "train-support", cfg.seed),
    )
    outputs = [str(model_path)] + _emit_metrics(_single_row_report(row),
                                                args.format, out_dir)
    return {
        "command": "train-support",
        "outputs": outputs,
        "dev_macro_f1": dev.macro_f1,
        "test_macro_f1": test.macro_f1,
    }


def _cmd_score(args, config: dict, out_dir: Path) -> dict:
    data = load_dataset(_dataset_source(args, config))
    params, mcfg = load_model(args.model)
    scorer = _resolve(args.scorer, config, "scorer", "attention")
    outputs = []
    for split in data:
        scores = score_corpus(params, mcfg, split.documents, split.vocabulary, scorer)
        path = out_dir / f"scores_{split.name}.jsonl"
        save_scores(scores, path)
        outputs.append(str(path))
    return {"command": "score", "scorer": scorer, "outputs": outputs}


def _budget(args, config: dict) -> BudgetSpec:
    if "fresh" in config:
        base = fresh_config_from_dict(config["fresh"]).budget
    else:
        base = BudgetSpec(ratio=0.2)
    floor = args.floor_ratio if args.floor_ratio is not None else base.floor_ratio
    span = args.min_span_len if args.min_span_len is not None else base.min_span_len
    return replace(
        base,
        ratio=float(_resolve(args.ratio, config, "ratio", base.ratio)),
        scope=_resolve(args.scope, config, "scope", base.scope),
        strategy=_resolve(args.strategy, config, "strategy", base.strategy),
        floor_ratio=floor,
        min_span_len=span,
    )


def _cmd_extract(args, config: dict, out_dir: Path) -> dict:
    data = load_dataset(_dataset_source(args, config))
    budget = _budget(args, config)
    scores_dir = Path(args.scores_dir)
    outputs = []
    selected = 0
    for split in data:
        scores = load_scores(scores_dir / f"scores_{split.name}.jsonl")
        aligned = align_scores(split.documents, scores)
        masks = select_masks(aligned, budget)
        selected += sum(mask.k for mask in masks)
        path = out_dir / f"masks_{split.name}.jsonl"
        save_masks(masks, path)
        outputs.append(str(path))
    return {"command": "extract", "outputs": outputs, "selected_tokens": selected}


def _cmd_train_extractor(args, config: dict, out_dir: Path) -> dict:
    data = load_dataset(_dataset_source(args, config))
    train_split = data[0]
    cfg = _fresh_config(args, config, force_tagger=True)
    budget = _budget(args, config)
    targets = make_pseudo_targets(load_masks(args.masks), train_split)
    targets = mix_supervision(targets, train_split, cfg.supervision_fraction,
                              tagger_seed(cfg.seed))
    tagger = train_tagger(
        train_split,
        targets,
        replace(cfg.tagger_train, seed=tagger_seed(cfg.seed)),
        TaggerConfig(vocab_size=len(train_split.vocabulary),
                     embed_dim=cfg.tagger_embed_dim),
    )
    tagger_path = out_dir / "tagger.json"
    save_tagger(tagger_path, tagger.params, tagger.config)
    outputs = [str(tagger_path)]
    for split in data:
        masks = [tag_and_decode(tagger.params, tagger.config, doc,
                                split.vocabulary, budget)
                 for doc in split.documents]
        path = out_dir / f"masks_{split.name}.jsonl"
        save_masks(masks, path)
        outputs.append(str(path))
    return {
        "command": "train-extractor",
        "outputs": outputs,
        "final_loss": tagger.history[-1] if tagger.history else None,
    }


def _replay(args, command: str, seed: int) -> str:
    parts = [f"rationales {command}"]
    if args.config is not None:
        parts.append(f"--config {args.config}")
    if getattr(args, "data_dir", None) is not None:
        parts.append(f"--data-dir {args.data_dir}")
    parts.append(f"--seed {seed}")
    return " ".join(parts)


def _cmd_run_fresh(args, config: dict, out_dir: Path) -> dict:
    data = load_dataset(_dataset_source(args, config))
    train_split, dev_split, test_split = data
    cfg = _fresh_config(args, config)
    start = time.perf_counter()
    result = run_fresh(train_split, dev_split, test_split, cfg)
    wall = time.perf_counter() - start
    outputs = []
    support_path = out_dir / "support.json"
    save_model(support_path, result.support_params, result.support_cfg)
    outputs.append(str(support_path))
    classifier_path = out_dir / "classifier.json"
    save_model(classifier_path, result.classifier_params, result.classifier_cfg)
    outputs.append(str(classifier_path))
    if result.tagger is not None:
        tagger_path = out_dir / "tagger.json"
        save_tagger(tagger_path, result.tagger.params, result.tagger.config)
        outputs.append(str(tagger_path))
    for name, masks in result.masks.items():
        path = out_dir / f"masks_{name}.jsonl"
        save_masks(masks, path)
        outputs.append(str(path))
    audit_path = out_dir / "audit.json"
    audit_path.write_text(json.dumps({
        "total_documents": result.audit.total_documents,
        "violations": result.audit.violations,
        "violating_ids": list(result.audit.violating_ids),
        "length_histogram": {str(k): v for k, v in
                             sorted(result.audit.length_histogram.items())},
    }, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    outputs.append(str(audit_path))
    test_masks = result.masks["test"]
    mean_ratio = float(np.mean([m.k / len(d.tokens) for m, d in
                                zip(test_masks, test_split.documents)]))
    row = ReportRow(
        method="fresh", scorer=cfg.scorer, strategy=cfg.budget.strategy,
        scope=cfg.budget.scope, p=cfg.budget.ratio, f=cfg.supervision_fraction,
        seed=cfg.seed,
        dev_macro_f1=result.classifier_metrics["dev"].macro_f1,
        test_macro_f1=result.classifier_metrics["test"].macro_f1,
        test_accuracy=result.classifier_metrics["test"].accuracy,
        mean_rationale_ratio=mean_ratio,
        wall_time=wall, replay=_replay(args, "run-fresh", cfg.seed),
    )
    outputs.extend(_emit_metrics(_single_row_report(row), args.format, out_dir))
    payload = {
        "command": "run-fresh",
        "outputs": outputs,
        "support_test_macro_f1": result.support_metrics["test"].macro_f1,
        "classifier_test_macro_f1": result.classifier_metrics["test"].macro_f1,
        "faithfulness_violations": result.audit.violations,
    }
    if result.agreement is not None:
        payload["gold_agreement_f1"] = result.agreement.mean_f1
    return payload


def _cmd_run_e2e(args, config: dict, out_dir: Path) -> dict:
    data = load_dataset(_dataset_source(args, config))
    train_split, dev_split, test_split = data
    cfg = _e2e_config(args, config)
    seed = _seed(args, config)
    fraction = float(_resolve(args.fraction, config, "fraction", 0.0))
    start = time.perf_counter()
    result = train_e2e(train_split, dev_split, cfg,
                       supervision_fraction=fraction, seed=seed)
    wall = time.perf_counter() - start
    y_true, y_pred, fracs = [], [], []
    masks = []
    for doc in test_split.documents:
        label, mask = predict_with_rationale(result.state, doc,
                                             test_split.vocabulary, cfg)
        y_true.append(doc.label)
        y_pred.append(label)
        masks.append(mask)
        probs = generator_probabilities(result.state, doc, test_split.vocabulary)
        fracs.append(float(np.mean(probs >= 0.5)))
    macro, _ = macro_f1(y_true, y_pred, test_split.num_classes)
    accuracy = float(np.mean([t == p for t, p in zip(y_true, y_pred)]))
    outputs = []
    generator_path = out_dir / "generator.json"
    save_tagger(generator_path, result.state.gen_params, result.state.gen_cfg)
    outputs.append(str(generator_path))
    encoder_path = out_dir / "encoder.json"
    save_model(encoder_path, result.state.enc_params, result.state.enc_cfg)
    outputs.append(str(encoder_path))
    masks_path = out_dir / "masks_test.jsonl"
    save_masks(masks, masks_path)
    outputs.append(str(masks_path))
    row = ReportRow(
        method="e2e_baseline", scorer="", strategy="", scope="",
        p=cfg.truncation_ratio, f=fraction, seed=seed,
        dev_macro_f1=result.best_dev_macro_f1, test_macro_f1=macro,
        test_accuracy=accuracy, mean_rationale_ratio=float(np.mean(fracs)),
        wall_time=wall, replay=_replay(args, "run-e2e", seed),
    )
    outputs.extend(_emit_metrics(_single_row_report(row), args.format, out_dir))
    return {
        "command": "run-e2e",
        "outputs": outputs,
        "best_epoch": result.best_epoch,
        "dev_macro_f1": result.best_dev_macro_f1,
        "test_macro_f1": macro,
    }


def _cmd_sweep(args, config: dict, out_dir: Path) -> dict:
    data = load_dataset(_dataset_source(args, config))
    if args.grid is not None:
        grid = load_sweep_grid(args.grid)
    elif "grid" in config:
        grid = sweep_grid_from_dict(config["grid"])
    else:
        raise ConfigError("no sweep grid: pass --grid or a config with a 'grid' section")
    cfg = _e2e_config(args, config)
    seed = _seed(args, config)
    fraction = float(_resolve(args.fraction, config, "fraction", 0.0))
    result = hyperparameter_sweep(cfg, grid, seed=seed, data=data, fraction=fraction)
    outputs = [str(p) for p in emit(result.report, args.format,
                                    out_dir / f"sweep.{args.format}")]
    scatter_path = out_dir / "scatter.csv"
    with scatter_path.open("w", encoding="utf-8") as handle:
        handle.write("mean_rationale_ratio,test_macro_f1\n")
        for ratio, score in result.scatter:
            handle.write(f"{ratio:.6g},{score:.6g}\n")
    outputs.append(str(scatter_path))
    summary_path = out_dir / "sweep_summary.json"
    summary = {
        "trials": grid.trials,
        "completed": len(result.scatter),
        "degenerate_fraction": result.degenerate_fraction,
    }
    summary_path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n",
                            encoding="utf-8")
    outputs.append(str(summary_path))
    return {"command": "sweep", "outputs": outputs, **summary}


def _cmd_report(args, config: dict, out_dir: Path) -> dict:
    if args.cells is not None:
        rows = []
        for path in sorted(Path(args.cells).glob("row-*.json")):
            rows.append(ReportRow(**json.loads(path.read_text(encoding="utf-8"))))
        rows.sort(key=lambda r: (r.method, r.scorer, r.strategy, r.scope,
                                 r.p, r.f, r.seed))
    elif args.input is not None:
        payload = parse_report_json(args.input)
        try:
            rows = [ReportRow(**record) for record in payload["rows"]]
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"report {args.input}: {exc!r}") from exc
    else:
        raise ConfigError("report needs --cells or --input")
    report = ExperimentReport(rows=tuple(rows), aggregates=compute_aggregates(rows))
    outputs = _emit_metrics(report, args.format, out_dir)
    return {"command": "report", "outputs": outputs, "rows": len(rows)}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="versioned JSON config file")
    common.add_argument("--seed", type=int, help="base seed (default 13)")
    common.add_argument("--out-dir", default="out", help="output directory")
    common.add_argument("--format", choices=("csv", "json"), default="csv",
                        help="report format")

    data = _Parser(add_help=False)
    data.add_argument("--data-dir", help="directory with train/dev/test.jsonl")
    data.add_argument("--classes", type=int, default=2)
    data.add_argument("--span-unit", choices=("token", "char"), default="token")

    budget = _Parser(add_help=False)
    budget.add_argument("--ratio", type=float, help="rationale length budget")
    budget.add_argument("--strategy", choices=("top-k", "contiguous"))
    budget.add_argument("--scope", choices=("instance", "global"))
    budget.add_argument("--floor-ratio", type=float)
    budget.add_argument("--min-span-len", type=int)

    parser = _Parser(prog="rationales",
                     description="Faithful rationale extraction pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a planted-rationale corpus")
    p.add_argument("--docs", default="200,50,50", help="train,dev,test counts")
    p.add_argument("--len", default="20,40", help="min,max document length")
    p.add_argument("--vocab", type=int, default=200)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--planted-ratio", type=float, default=0.2)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--data-seed", type=int)
    p.set_defaults(handler=_cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="validate and canonicalize JSONL splits")
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--test")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--span-unit", choices=("token", "char"), default="token")
    p.set_defaults(handler=_cmd_ingest)

    p = sub.add_parser("train-support", parents=[common, data],
                       help="train the full-text support model")
    p.set_defaults(handler=_cmd_train_support)

    p = sub.add_parser("score", parents=[common, data],
                       help="write per-token saliency scores")
    p.add_argument("--model", required=True, help="support model checkpoint")
    p.add_argument("--scorer", choices=("attention", "gradient"))
    p.set_defaults(handler=_cmd_score)

    p = sub.add_parser("extract", parents=[common, data, budget],
                       help="discretize saliency scores into masks")
    p.add_argument("--scores-dir", required=True)
    p.set_defaults(handler=_cmd_extract)

    p = sub.add_parser("train-extractor", parents=[common, data, budget],
                       help="train the tagger on pseudo-rationale targets")
    p.add_argument("--masks", required=True, help="train-split mask file")
    p.add_argument("--fraction", type=float, help="gold supervision fraction")
    p.set_defaults(handler=_cmd_train_extractor)

    p = sub.add_parser("run-fresh", parents=[common, data],
                       help="full pipeline: support, extract, classify, audit")
    p.add_argument("--scorer", choices=("attention", "gradient"))
    p.add_argument("--strategy", choices=("top-k", "contiguous"))
    p.add_argument("--scope", choices=("instance", "global"))
    p.add_argument("--ratio", type=float)
    p.add_argument("--fraction", type=float)
    p.add_argument("--extractor", choices=("heuristic", "tagger"))
    p.set_defaults(handler=_cmd_run_fresh)

    p = sub.add_parser("run-e2e", parents=[common, data],
                       help="train the joint rationalization baseline")
    p.add_argument("--ratio", type=float)
    p.add_argument("--fraction", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.set_defaults(handler=_cmd_run_e2e)

    p = sub.add_parser("sweep", parents=[common, data],
                       help="random search over the regularizer grid")
    p.add_argument("--grid", help="grid spec JSON file")
    p.add_argument("--ratio", type=float)
    p.add_argument("--fraction", type=float)
    p.set_defaults(handler=_cmd_sweep)

    p = sub.add_parser("report", parents=[common],
                       help="rebuild a metrics report from cached cells")
    p.add_argument("--cells", help="cache directory of row-*.json files")
    p.add_argument("--input", help="existing JSON report")
    p.set_defaults(handler=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_cli_config(args.config) if args.config is not None else {}
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = args.handler(args, config, out_dir)
        print(json.dumps(payload, sort_keys=True))
        return 0
    except RationalesError as exc:
        sys.stderr.write(json.dumps(
            {"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    except OSError as exc:
        sys.stderr.write(json.dumps(
            {"error": "OSError", "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
