"""Acceptance gate: ten numbered end-to-end checks.

Each test prints one ``[criterion NN] PASS/FAIL`` line directly to the
terminal (bypassing capture) so a plain ``pytest -v`` run doubles as the
acceptance checklist. Thresholds, tolerances, and runtime budgets are pinned
in the assertions. Training-heavy fixtures are session-scoped and shared by
the criteria that reuse the same runs.
"""

import itertools
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from rationales.cli import main as cli_main
from rationales.corpus import SyntheticConfig, make_synthetic
from rationales.discretize import (
    BudgetSpec,
    best_span,
    global_contig,
    global_topk,
    resolve_k,
)
from rationales.e2e import (
    E2EConfig,
    RegularizerConfig,
    predict_with_rationale,
    train_e2e,
)
from rationales.errors import ConfigError
from rationales.extractor import (
    TaggerConfig,
    make_pseudo_targets,
    mix_supervision,
    rationale_agreement,
    tag_and_decode,
    train_tagger,
)
from rationales.harness import (
    DEFAULT_SEEDS,
    FALLBACK_SEEDS,
    dataset_source_from_dict,
    expected_best,
    fresh_config_from_dict,
    ExperimentConfig,
    run_experiment,
)
from rationales.model import (
    ModelConfig,
    TrainConfig,
    init_params,
    loss_and_grads,
    macro_f1,
)
from rationales.pipeline import FreshConfig, run_fresh, verify_faithfulness
from rationales.saliency import ScoreVector

PLANTED_CORPUS = SyntheticConfig(
    docs_per_split=(2000, 500, 500),
    doc_len_range=(40, 40),
    vocab_size=200,
    num_classes=2,
    planted_ratio=0.2,
    noise_rate=0.05,
)
# Small embedding with one-dimensional heads and no weight decay keeps the
# attention distribution informative instead of letting the value pathway
# carry the label through near-uniform weights.
FRESH_CFG = FreshConfig(
    embed_dim=8,
    num_heads=8,
    budget=BudgetSpec(ratio=0.2, scope="instance", strategy="top-k"),
    support_train=TrainConfig(lr=5e-3, l2=0.0),
    classifier_train=TrainConfig(lr=5e-3, l2=0.0),
)
E2E_CFG = E2EConfig(
    regularizer=RegularizerConfig(lambda1=0.5, lambda2=0.5, desired_ratio=0.2),
    train=TrainConfig(lr=2e-3, epochs=20),
    truncation_ratio=0.2,
)


def _announce(capsys, number: int, passed: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[criterion {number:02d}] {'PASS' if passed else 'FAIL'} {detail}")


@pytest.fixture(scope="session")
def planted_runs():
    """One decomposed run per default seed on the planted corpus (noise 0.05).

    The support model doubles as the full-text baseline, so these five runs
    feed the recovery, recall, faithfulness, and variance criteria alike.
    """
    splits = make_synthetic(PLANTED_CORPUS, seed=0)
    start = time.monotonic()
    runs = {seed: run_fresh(*splits, replace(FRESH_CFG, seed=seed))
            for seed in DEFAULT_SEEDS}
    elapsed = time.monotonic() - start
    return {"splits": splits, "runs": runs, "elapsed": elapsed}


# --- criterion 1: analytic gradients vs central finite differences ---------


def _central_difference(params, cfg, ids, label, l2, name, index, h=1e-5):
    tensor = params.as_dict()[name]
    orig = tensor.flat[index]
    tensor.flat[index] = orig + h
    up, _ = loss_and_grads(params, cfg, ids, label, l2)
    tensor.flat[index] = orig - h
    down, _ = loss_and_grads(params, cfg, ids, label, l2)
    tensor.flat[index] = orig
    return (up - down) / (2 * h)


def test_criterion_01_gradients_match_finite_differences(capsys):
    rng = np.random.default_rng(4151)
    start = time.monotonic()
    triples = 0
    coords = 0
    worst = 0.0
    failures = []
    for _ in range(100):
        heads = int(rng.choice([1, 2, 4]))
        embed = heads * int(rng.choice([1, 2]))
        cfg = ModelConfig(
            vocab_size=int(rng.integers(4, 13)),
            num_classes=int(rng.integers(2, 5)),
            embed_dim=embed,
            num_heads=heads,
        )
        params = init_params(cfg, rng)
        ids = rng.integers(0, cfg.vocab_size, size=int(rng.integers(1, 11)))
        ids = ids.astype(np.int64)
        label = int(rng.integers(0, cfg.num_classes))
        l2 = float(rng.choice([0.0, 1e-3, 1e-2]))
        _, grads = loss_and_grads(params, cfg, ids, label, l2)
        triples += 1
        for name, tensor in params.as_dict().items():
            for index in range(tensor.size):
                fd = _central_difference(params, cfg, ids, label, l2, name, index)
                an = grads[name].flat[index]
                denom = max(abs(fd), abs(an))
                coords += 1
                if denom > 1e-4:
                    rel = abs(fd - an) / denom
                    worst = max(worst, rel)
                    if rel > 1e-4:
                        failures.append((name, index, fd, an))
                elif abs(fd - an) > 1e-8:
                    failures.append((name, index, fd, an))
    elapsed = time.monotonic() - start
    passed = not failures and triples >= 100 and elapsed <= 60.0
    _announce(capsys, 1, passed,
              f"gradcheck: {triples} triples, {coords} coordinates, "
              f"worst rel err {worst:.2e} (<= 1e-4), {elapsed:.1f}s (<= 60s)")
    assert passed, (failures[:5], elapsed)


# --- criterion 2: selectors match exhaustive search -------------------------


def _brute_window(scores: np.ndarray, k: int) -> tuple[int, float]:
    best_start, best_sum = 0, float(np.sum(scores[:k]))
    for start in range(1, len(scores) - k + 1):
        mass = float(np.sum(scores[start:start + k]))
        if mass > best_sum:
            best_sum, best_start = mass, start
    return best_start, best_sum


def _mask_mass(scores_by_doc, masks) -> float:
    return sum(float(np.sum(sv.scores[sorted(m.selected)]))
               for sv, m in zip(scores_by_doc, masks))


def _alloc_mass(per_doc_values, allocation) -> float:
    return sum(values[k] for values, k in zip(per_doc_values, allocation))


def _best_allocation_mass(per_doc_values, floors, lengths, budget) -> float:
    best = -np.inf
    ranges = [range(f, l + 1) for f, l in zip(floors, lengths)]
    for allocation in itertools.product(*ranges):
        if sum(allocation) != budget:
            continue
        best = max(best, _alloc_mass(per_doc_values, allocation))
    return best


def _best_subset_mass(flat_scores, doc_of, floors, budget) -> float:
    best = -np.inf
    for subset in itertools.combinations(range(len(flat_scores)), budget):
        counts = [0] * len(floors)
        for i in subset:
            counts[doc_of[i]] += 1
        if any(c < f for c, f in zip(counts, floors)):
            continue
        best = max(best, float(sum(flat_scores[i] for i in subset)))
    return best


def test_criterion_02_selectors_match_exhaustive_search(capsys):
    rng = np.random.default_rng(907)
    start = time.monotonic()

    span_checks = 0
    for _ in range(1000):
        length = int(rng.integers(1, 51))
        sv = ScoreVector("d", rng.normal(size=length), "unit")
        k = int(rng.integers(1, length + 1))
        brute_start, _ = _brute_window(sv.scores, k)
        mask = best_span(sv, k)
        assert mask.selected == frozenset(range(brute_start, brute_start + k))
        span_checks += 1

    global_checks = 0
    subset_checks = 0
    infeasible = 0
    ratios = (0.2, 0.45, 0.7, 1.0)
    for ndocs in (1, 2, 3):
        for lengths in itertools.product(range(1, 7), repeat=ndocs):
            corpus = [ScoreVector(f"d{i}", rng.normal(size=n), "unit")
                      for i, n in enumerate(lengths)]
            total = sum(lengths)
            topk_values = []
            contig_values = []
            for sv in corpus:
                ordered = np.sort(sv.scores)[::-1]
                topk_values.append(np.concatenate([[0.0], np.cumsum(ordered)]))
                contig_values.append(np.array(
                    [0.0] + [_brute_window(sv.scores, k)[1]
                             for k in range(1, len(sv) + 1)]))
            for ratio in ratios:
                budget = int(np.floor(ratio * total))
                for floor_ratio in (0.0, 0.3):
                    if floor_ratio >= ratio:
                        with pytest.raises(ConfigError):
                            global_topk(corpus, ratio, floor_ratio)
                        continue
                    floors = [resolve_k(n, floor_ratio) if floor_ratio > 0 else 1
                              for n in lengths]
                    if sum(floors) > budget:
                        with pytest.raises(ConfigError):
                            global_topk(corpus, ratio, floor_ratio)
                        infeasible += 1
                        continue
                    masks = global_topk(corpus, ratio, floor_ratio)
                    ks = [m.k for m in masks]
                    assert sum(ks) == budget
                    assert all(k >= f for k, f in zip(ks, floors))
                    oracle = _best_allocation_mass(
                        topk_values, floors, lengths, budget)
                    got = _mask_mass(corpus, masks)
                    assert got == pytest.approx(oracle, abs=1e-9)
                    global_checks += 1
                    if total <= 8:
                        flat = [s for sv in corpus for s in sv.scores]
                        doc_of = [i for i, n in enumerate(lengths)
                                  for _ in range(n)]
                        raw = _best_subset_mass(flat, doc_of, floors, budget)
                        assert got == pytest.approx(raw, abs=1e-9)
                        subset_checks += 1
                for min_span in (1, 3):
                    floors = [min(min_span, n) for n in lengths]
                    if sum(floors) > budget:
                        with pytest.raises(ConfigError):
                            global_contig(corpus, ratio, min_span)
                        infeasible += 1
                        continue
                    masks = global_contig(corpus, ratio, min_span)
                    ks = [m.k for m in masks]
                    assert sum(ks) == budget
                    assert all(k >= f for k, f in zip(ks, floors))
                    assert all(m.contiguous for m in masks)
                    oracle = _best_allocation_mass(
                        contig_values, floors, lengths, budget)
                    got = _mask_mass(corpus, masks)
                    assert got == pytest.approx(oracle, abs=1e-9)
                    global_checks += 1

    elapsed = time.monotonic() - start
    passed = elapsed <= 60.0
    _announce(capsys, 2, passed,
              f"selection: {span_checks} span windows, {global_checks} global "
              f"corpora vs exhaustive mass ({subset_checks} raw-subset double "
              f"checks, {infeasible} infeasible raise), {elapsed:.1f}s (<= 60s)")
    assert passed, elapsed


# --- criterion 3: regularizer worked examples -------------------------------


def test_criterion_03_regularizer_worked_examples(capsys):
    from rationales.e2e import omega

    unit = RegularizerConfig(lambda1=1.0, lambda2=1.0, desired_ratio=0.25)
    value = omega(np.array([0.0, 1.0, 1.0, 0.0]), 4, unit)
    expected = 0.25 + 2.0 / 3.0  # sparsity overshoot plus two transitions
    within_budget = omega(np.zeros(5), 5, unit)
    all_ones = omega(np.ones(4), 4,
                     RegularizerConfig(lambda1=2.0, lambda2=7.0, desired_ratio=0.25))
    full_free = omega(np.ones(6), 6,
                      RegularizerConfig(lambda1=3.0, lambda2=5.0, desired_ratio=1.0))
    passed = (abs(value - expected) <= 1e-9
              and within_budget == 0.0
              and abs(all_ones - 1.5) <= 1e-12
              and full_free == 0.0)
    _announce(capsys, 3, passed,
              f"omega([0,1,1,0], L=4, d=0.25) = {value:.10f} "
              f"(target {expected:.10f} +- 1e-9); boundary cases exact")
    assert passed, (value, within_budget, all_ones, full_free)


# --- criterion 4: faithfulness audit ----------------------------------------


def test_criterion_04_faithfulness_audit(capsys, planted_runs):
    splits = dict(zip(("train", "dev", "test"), planted_runs["splits"]))
    violations = {seed: run.audit.violations
                  for seed, run in planted_runs["runs"].items()}

    run = planted_runs["runs"][DEFAULT_SEEDS[0]]
    clean = verify_faithfulness(splits, run.masks, run.reduced, strict=False)
    corrupted_masks = {name: list(masks) for name, masks in run.masks.items()}
    victim = corrupted_masks["test"][0]
    doc_len = len(splits["test"].documents[0].tokens)
    shifted = frozenset((i + 3) % doc_len for i in victim.selected)
    corrupted_masks["test"][0] = replace(
        victim, selected=shifted, contiguous=False)
    control = verify_faithfulness(
        splits, corrupted_masks, run.reduced, strict=False)

    passed = (all(v == 0 for v in violations.values())
              and clean.violations == 0
              and control.violations >= 1)
    _announce(capsys, 4, passed,
              f"faithfulness: violations per seed {violations} (all 0 over "
              f"{clean.total_documents} documents); corrupted-mask control "
              f"flags {control.violations} (>= 1)")
    assert passed, (violations, control.violations)


# --- criterion 5: rationale-only classification recovers full text ----------


def test_criterion_05_fresh_recovers_full_text(capsys, planted_runs):
    runs = planted_runs["runs"]
    full_text = np.mean([r.support_metrics["test"].macro_f1
                         for r in runs.values()])
    fresh = np.mean([r.classifier_metrics["test"].macro_f1
                     for r in runs.values()])
    elapsed = planted_runs["elapsed"]
    passed = (full_text >= 0.90
              and fresh >= 0.90 * full_text
              and elapsed <= 600.0)
    _announce(capsys, 5, passed,
              f"mean full-text macro-F1 {full_text:.4f} (>= 0.90); mean "
              f"rationale-only macro-F1 {fresh:.4f} (>= {0.9 * full_text:.4f}); "
              f"5 runs in {elapsed:.0f}s (<= 600s)")
    assert passed, (full_text, fresh, elapsed)


# --- criterion 6: attention masks recover the planted rationale -------------


def test_criterion_06_planted_rationale_recall(capsys, planted_runs):
    test_docs = planted_runs["splits"][2].documents
    per_seed = {}
    for seed, run in planted_runs["runs"].items():
        recalls = []
        for doc, mask in zip(test_docs, run.masks["test"]):
            assert mask.doc_id == doc.id
            recalls.append(rationale_agreement(mask, doc.gold_rationale).recall)
        per_seed[seed] = float(np.mean(recalls))
    overall = float(np.mean(list(per_seed.values())))
    passed = overall >= 0.6
    shown = {seed: round(v, 3) for seed, v in per_seed.items()}
    _announce(capsys, 6, passed,
              f"mean planted-token recall {overall:.4f} (>= 0.6); per seed {shown}")
    assert passed, per_seed


# --- criterion 7: seed variance, decomposed vs REINFORCE --------------------


def _e2e_test_f1(splits, seed: int) -> float:
    train_split, dev_split, test_split = splits
    result = train_e2e(train_split, dev_split, E2E_CFG, seed=seed)
    labels, preds = [], []
    for doc in test_split.documents:
        pred, _ = predict_with_rationale(
            result.state, doc, test_split.vocabulary, E2E_CFG)
        labels.append(doc.label)
        preds.append(pred)
    return macro_f1(labels, preds, test_split.num_classes)[0]


def _variance_wins(seeds, planted_runs):
    """Per noise level, compare seed std of test macro-F1 between methods."""
    outcomes = {}
    for noise in (0.0, 0.05, 0.1):
        if noise == PLANTED_CORPUS.noise_rate:
            splits = planted_runs["splits"]
        else:
            splits = make_synthetic(replace(PLANTED_CORPUS, noise_rate=noise),
                                    seed=0)
        fresh_f1 = []
        for seed in seeds:
            if noise == PLANTED_CORPUS.noise_rate and seed in planted_runs["runs"]:
                run = planted_runs["runs"][seed]
            else:
                run = run_fresh(*splits, replace(FRESH_CFG, seed=seed))
            fresh_f1.append(run.classifier_metrics["test"].macro_f1)
        e2e_f1 = [_e2e_test_f1(splits, seed) for seed in seeds]
        fresh_std = float(np.std(fresh_f1, ddof=1))
        e2e_std = float(np.std(e2e_f1, ddof=1))
        outcomes[noise] = (fresh_std, e2e_std, fresh_std <= e2e_std)
    wins = sum(1 for _, _, won in outcomes.values() if won)
    return wins, outcomes


def test_criterion_07_variance_comparison(capsys, planted_runs):
    wins, outcomes = _variance_wins(DEFAULT_SEEDS, planted_runs)
    detail = "; ".join(
        f"noise {noise}: std {fs:.4f} vs {es:.4f} ({'<=' if won else '>'})"
        for noise, (fs, es, won) in outcomes.items())
    if wins >= 2:
        _announce(capsys, 7, True,
                  f"variance: decomposed <= REINFORCE in {wins}/3 noise "
                  f"configs on default seeds ({detail})")
        return
    fallback_wins, fallback = _variance_wins(FALLBACK_SEEDS, planted_runs)
    passed = fallback_wins >= 2
    _announce(capsys, 7, passed,
              f"variance: default seeds {wins}/3 ({detail}); fallback seeds "
              f"{fallback_wins}/3 "
              + "; ".join(f"noise {n}: std {fs:.4f} vs {es:.4f}"
                          for n, (fs, es, _) in fallback.items()))
    assert passed, (outcomes, fallback)


# --- criterion 8: gold supervision beats pseudo labels ----------------------


def test_criterion_08_supervision_mixing(capsys):
    corpus = SyntheticConfig(docs_per_split=(600, 200, 200),
                             doc_len_range=(40, 40), vocab_size=200,
                             num_classes=2, planted_ratio=0.2, noise_rate=0.05)
    train_split, dev_split, test_split = make_synthetic(corpus, seed=0)
    budget = BudgetSpec(ratio=0.2, scope="instance", strategy="top-k")
    # Default-width support model: its flatter attention yields imperfect
    # pseudo labels, which is exactly the regime supervision should improve.
    pipeline = run_fresh(train_split, dev_split, test_split,
                         FreshConfig(budget=budget, seed=13))
    pseudo = make_pseudo_targets(pipeline.masks["train"], train_split)
    tagger_cfg = TaggerConfig(vocab_size=len(train_split.vocabulary),
                              embed_dim=16)
    token_f1 = {}
    for fraction in (0.0, 1.0):
        targets = mix_supervision(pseudo, train_split, fraction, seed=14)
        tagger = train_tagger(train_split, targets,
                              TrainConfig(epochs=10, seed=14), tagger_cfg)
        scores = [rationale_agreement(
            tag_and_decode(tagger.params, tagger.config, doc,
                           test_split.vocabulary, budget),
            doc.gold_rationale).f1 for doc in test_split.documents]
        token_f1[fraction] = float(np.mean(scores))
    gap = token_f1[1.0] - token_f1[0.0]
    passed = gap >= 0.05
    _announce(capsys, 8, passed,
              f"extractor token-F1 vs gold: fully supervised {token_f1[1.0]:.4f} "
              f"vs pseudo-only {token_f1[0.0]:.4f}, gap {gap:.4f} (>= 0.05)")
    assert passed, token_f1


# --- criterion 9: expected-best estimator -----------------------------------


def test_criterion_09_expected_best(capsys):
    exact = expected_best([0.0, 1.0], 2)
    rng = np.random.default_rng(6007)
    monotone = True
    bounded = True
    for _ in range(100):
        scores = rng.uniform(size=int(rng.integers(1, 21))).tolist()
        values = [expected_best(scores, n) for n in range(1, 13)]
        monotone &= all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
        bounded &= all(min(scores) - 1e-12 <= v <= max(scores) + 1e-12
                       for v in values)
    passed = exact == 0.75 and monotone and bounded
    _announce(capsys, 9, passed,
              f"expected_best([0,1], n=2) = {exact} (exactly 0.75); monotone "
              f"nondecreasing and bounded on 100 random score lists")
    assert passed, (exact, monotone, bounded)


# --- criterion 10: CLI reruns are byte-identical ----------------------------

CLI_DATASET = {
    "synthetic": {
        "docs_per_split": [24, 10, 10],
        "doc_len_range": [8, 14],
        "vocab_size": 60,
        "num_classes": 2,
        "planted_ratio": 0.25,
    },
    "data_seed": 5,
}
CLI_TRAIN = {"epochs": 3, "batch_size": 16, "lr": 5e-3}
CLI_FRESH = {
    "embed_dim": 16,
    "num_heads": 2,
    "tagger_embed_dim": 8,
    "budget": {"ratio": 0.25},
    "support_train": CLI_TRAIN,
    "classifier_train": CLI_TRAIN,
    "tagger_train": CLI_TRAIN,
}
CLI_E2E = {
    "train": CLI_TRAIN,
    "enc_embed_dim": 8,
    "enc_heads": 2,
    "gen_embed_dim": 8,
    "gen_window": 2,
}


def _cli(capsys, *argv: str) -> None:
    code = cli_main(list(argv))
    captured = capsys.readouterr()
    assert code == 0, captured.err


def _drive_cli(capsys, base: Path, config: str, grid: str, cells: str) -> None:
    data = str(base / "data")
    _cli(capsys, "synth", "--config", config, "--out-dir", data)
    _cli(capsys, "ingest",
         "--train", f"{data}/train.jsonl", "--dev", f"{data}/dev.jsonl",
         "--test", f"{data}/test.jsonl", "--out-dir", str(base / "ingest"))
    stages = str(base / "stages")
    _cli(capsys, "train-support", "--config", config, "--data-dir", data,
         "--seed", "13", "--out-dir", stages)
    _cli(capsys, "score", "--config", config, "--data-dir", data,
         "--model", f"{stages}/support.json", "--out-dir", stages)
    _cli(capsys, "extract", "--config", config, "--data-dir", data,
         "--scores-dir", stages, "--out-dir", stages)
    _cli(capsys, "train-extractor", "--config", config, "--data-dir", data,
         "--seed", "13", "--masks", f"{stages}/masks_train.jsonl",
         "--out-dir", str(base / "tagger"))
    _cli(capsys, "run-fresh", "--config", config, "--data-dir", data,
         "--seed", "13", "--out-dir", str(base / "fresh"))
    _cli(capsys, "run-e2e", "--config", config, "--data-dir", data,
         "--seed", "13", "--out-dir", str(base / "e2e"))
    _cli(capsys, "sweep", "--config", config, "--data-dir", data,
         "--seed", "3", "--grid", grid, "--out-dir", str(base / "sweep"))
    _cli(capsys, "report", "--cells", cells, "--out-dir", str(base / "report"))


def _artifact_bytes(base: Path) -> dict[str, bytes]:
    return {str(path.relative_to(base)): path.read_bytes()
            for path in sorted(base.rglob("*")) if path.is_file()}


def test_criterion_10_cli_reruns_byte_identical(tmp_path, capsys):
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps({
        "config_version": 1,
        "dataset": CLI_DATASET,
        "fresh": CLI_FRESH,
        "e2e": CLI_E2E,
    }))
    grid_path = tmp_path / "grid.json"
    grid_path.write_text(json.dumps({
        "lambda1": {"low": 0.01, "high": 1.0},
        "lambda2": {"choices": [0.0, 1.0]},
        "trials": 2,
    }))
    cells = tmp_path / "cells"
    run_experiment(
        ExperimentConfig(
            dataset=dataset_source_from_dict(CLI_DATASET),
            method="fresh",
            fresh=fresh_config_from_dict(CLI_FRESH),
            seeds=(3, 4),
            ratios=(0.25,),
        ),
        cache_dir=cells,
    )

    base = tmp_path / "work"
    _drive_cli(capsys, base, str(config_path), str(grid_path), str(cells))
    artifacts_a = _artifact_bytes(base)
    _drive_cli(capsys, base, str(config_path), str(grid_path), str(cells))
    artifacts_b = _artifact_bytes(base)
    assert set(artifacts_a) == set(artifacts_b)
    differing = sorted(rel for rel, blob in artifacts_a.items()
                       if artifacts_b[rel] != blob)
    csvs = sorted(rel for rel in artifacts_a if rel.endswith(".csv"))
    passed = not differing and len(csvs) >= 5
    _announce(capsys, 10, passed,
              f"all 10 commands rerun: {len(artifacts_a)} artifacts including "
              f"{len(csvs)} CSVs byte-identical"
              + (f"; differing: {differing}" if differing else ""))
    assert passed, differing
