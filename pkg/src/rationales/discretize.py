"""Turn continuous token scores into discrete rationale masks.

Instance-scope selectors pick top-k tokens or the best contiguous span within
one document. Global-scope selectors spread a corpus-wide token budget
B = floor(p * total tokens) across documents: top-k by global ranking with
per-document floors, or contiguous spans sized by an exact dynamic program
over the shared budget. All tie-breaks prefer the smaller index / smaller
document ordinal so equal inputs always give equal masks.

Budgets count document tokens only; query tokens are never selectable and
never consume budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Document
from .errors import ConfigError, ParseError, SchemaError
from .saliency import ScoreVector


@dataclass(frozen=True)
class RationaleMask:
    """A discrete rationale: which token indices of one document survive."""

    doc_id: str
    selected: frozenset[int]
    contiguous: bool
    k: int
    ratio: float | None = None
    source: str | None = None

    def __post_init__(self):
        if len(self.selected) == 0:
            raise SchemaError(f"mask for {self.doc_id!r} selects no tokens")
        if self.k != len(self.selected):
            raise SchemaError(
                f"mask for {self.doc_id!r}: k={self.k} but {len(self.selected)} indices selected"
            )
        if any(i < 0 for i in self.selected):
            raise SchemaError(f"mask for {self.doc_id!r} has negative indices")
        if self.contiguous:
            lo, hi = min(self.selected), max(self.selected)
            if hi - lo + 1 != len(self.selected):
                raise SchemaError(
                    f"mask for {self.doc_id!r} is flagged contiguous but has gaps"
                )

    @property
    def span(self) -> tuple[int, int]:
        """[start, end) bounds; only meaningful for contiguous masks."""
        return min(self.selected), max(self.selected) + 1


@dataclass(frozen=True)
class BudgetSpec:
    """Selection policy: ratio, instance vs global scope, top-k vs contiguous."""

    ratio: float
    scope: str = "instance"  # or "global"
    strategy: str = "top-k"  # or "contiguous"
    floor_ratio: float = 0.0  # global scope only
    min_span_len: int = 1  # global contiguous only

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.scope not in ("instance", "global"):
            raise ConfigError(f"scope must be 'instance' or 'global', got {self.scope!r}")
        if self.strategy not in ("top-k", "contiguous"):
            raise ConfigError(f"strategy must be 'top-k' or 'contiguous', got {self.strategy!r}")
        if not 0.0 <= self.floor_ratio < self.ratio:
            raise ConfigError(
                f"floor_ratio must lie in [0, ratio), got {self.floor_ratio} vs {self.ratio}"
            )
        if self.min_span_len < 1:
            raise ConfigError("min_span_len must be >= 1")


@dataclass
class GlobalBudget:
    """Corpus-wide token budget with per-document minimums and a consumption meter."""

    total: int
    floors: tuple[int, ...]
    consumed: int = 0

    def __post_init__(self):
        if any(f < 1 for f in self.floors):
            raise ConfigError("per-document minimum lengths must be >= 1")
        if sum(self.floors) > self.total:
            raise ConfigError(
                f"budget {self.total} cannot cover per-document minimums "
                f"totalling {sum(self.floors)}"
            )

    @property
    def remaining(self) -> int:
        return self.total - self.consumed

    def consume(self, n: int) -> None:
        if self.consumed + n > self.total:
            raise ConfigError(f"budget overrun: {self.consumed} + {n} > {self.total}")
        self.consumed += n


def resolve_k(length: int, ratio: float) -> int:
    """Per-document budget: round-half-up of ratio * length, floored at one token."""
    if length < 1:
        raise ConfigError(f"document length must be >= 1, got {length}")
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"ratio must lie in (0, 1], got {ratio}")
    return max(1, int(np.floor(ratio * length + 0.5)))


def _ranked_indices(scores: np.ndarray) -> list[int]:
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def _check_k(sv: ScoreVector, k: int) -> None:
    if not 1 <= k <= len(sv):
        raise ConfigError(f"k={k} out of range for {len(sv)} tokens ({sv.doc_id!r})")


def topk_instance(sv: ScoreVector, k: int, ratio: float | None = None) -> RationaleMask:
    """The k highest-scoring tokens, ties to the smaller index."""
    _check_k(sv, k)
    chosen = frozenset(_ranked_indices(sv.scores)[:k])
    return RationaleMask(doc_id=sv.doc_id, selected=chosen, contiguous=False, k=k,
                         ratio=ratio, source=sv.scorer)


def _best_window(scores: np.ndarray, k: int) -> tuple[int, float]:
    """Single-pass sliding window; ties keep the smaller start. Returns (start, sum)."""
    window = float(np.sum(scores[:k]))
    best_sum, best_start = window, 0
    for start in range(1, len(scores) - k + 1):
        window += float(scores[start + k - 1]) - float(scores[start - 1])
        if window > best_sum:
            best_sum, best_start = window, start
    return best_start, best_sum


def best_span(sv: ScoreVector, k: int, ratio: float | None = None) -> RationaleMask:
    """The contiguous length-k window with the highest score sum."""
    _check_k(sv, k)
    start, _ = _best_window(sv.scores, k)
    return RationaleMask(doc_id=sv.doc_id, selected=frozenset(range(start, start + k)),
                         contiguous=True, k=k, ratio=ratio, source=sv.scorer)


def _global_budget(corpus_scores: Sequence[ScoreVector], ratio: float,
                   floors: Sequence[int]) -> GlobalBudget:
    if not corpus_scores:
        raise ConfigError("global selection needs a nonempty corpus")
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"ratio must lie in (0, 1], got {ratio}")
    total = int(np.floor(ratio * sum(len(sv) for sv in corpus_scores)))
    return GlobalBudget(total=total, floors=tuple(floors))


def global_topk(
    corpus_scores: Sequence[ScoreVector],
    ratio: float,
    floor_ratio: float = 0.0,
) -> list[RationaleMask]:
    """Corpus-budgeted top-k. Every document first secures a floor (its top
    ``resolve_k(l, floor_ratio)`` tokens, or its single best token when the
    floor ratio is zero); the remaining budget goes to the globally
    highest-scoring unselected tokens."""
    if corpus_scores and not 0.0 <= floor_ratio < ratio:
        raise ConfigError(f"floor_ratio {floor_ratio} must lie in [0, ratio)")
    floors = [
        resolve_k(len(sv), floor_ratio) if floor_ratio > 0 else 1 for sv in corpus_scores
    ]
    budget = _global_budget(corpus_scores, ratio, floors)
    selected: list[set[int]] = []
    for sv, floor in zip(corpus_scores, floors):
        selected.append(set(_ranked_indices(sv.scores)[:floor]))
    budget.consume(sum(len(s) for s in selected))
    pool = [
        (-float(sv.scores[i]), ordinal, i)
        for ordinal, sv in enumerate(corpus_scores)
        for i in range(len(sv))
        if i not in selected[ordinal]
    ]
    pool.sort()
    for _, ordinal, i in pool:
        if budget.remaining == 0:
            break
        selected[ordinal].add(i)
        budget.consume(1)
    return [
        RationaleMask(doc_id=sv.doc_id, selected=frozenset(s), contiguous=False,
                      k=len(s), ratio=ratio, source=sv.scorer)
        for sv, s in zip(corpus_scores, selected)
    ]


def _best_window_per_length(scores: np.ndarray) -> np.ndarray:
    """best[k] = mass of the best length-k window, for k in 1..len(scores).
    Index 0 is unused. Same sliding scan as best_span, so tie handling and
    float accumulation agree exactly."""
    best = np.full(len(scores) + 1, -np.inf)
    for k in range(1, len(scores) + 1):
        best[k] = _best_window(scores, k)[1]
    return best


def global_contig(
    corpus_scores: Sequence[ScoreVector],
    ratio: float,
    min_span_len: int = 1,
) -> list[RationaleMask]:
    """Corpus-budgeted contiguous spans: the exact maximum-total-mass split of
    the shared budget into per-document span lengths (each at least the minimum
    and at most the document length), every document contributing its best
    window at its assigned length. Solved by dynamic programming over the
    budget; among equal-mass splits the smaller length at the later document
    wins, which keeps the result deterministic."""
    if min_span_len < 1:
        raise ConfigError(f"min_span_len must be >= 1, got {min_span_len}")
    floors = [min(min_span_len, len(sv)) for sv in corpus_scores]
    budget = _global_budget(corpus_scores, ratio, floors)
    budget.consume(sum(floors))
    total = budget.total
    mass = np.full(total + 1, -np.inf)
    mass[0] = 0.0
    choices = []
    for sv, floor in zip(corpus_scores, floors):
        best = _best_window_per_length(sv.scores)
        extended = np.full(total + 1, -np.inf)
        choice = np.zeros(total + 1, dtype=np.int64)
        for k in range(floor, min(len(sv), total) + 1):
            candidate = mass[: total + 1 - k] + best[k]
            improved = candidate > extended[k:]
            extended[k:][improved] = candidate[improved]
            choice[k:][improved] = k
        mass = extended
        choices.append(choice)
    if not np.isfinite(mass[total]):
        raise ConfigError(
            f"budget {total} cannot be split into feasible span lengths")
    ks = [0] * len(corpus_scores)
    remaining = total
    for ordinal in reversed(range(len(corpus_scores))):
        ks[ordinal] = int(choices[ordinal][remaining])
        remaining -= ks[ordinal]
    budget.consume(total - sum(floors))
    masks = []
    for sv, k in zip(corpus_scores, ks):
        start, _ = _best_window(sv.scores, k)
        masks.append(
            RationaleMask(doc_id=sv.doc_id, selected=frozenset(range(start, start + k)),
                          contiguous=True, k=k, ratio=ratio, source=sv.scorer)
        )
    return masks


def select_masks(
    corpus_scores: Sequence[ScoreVector],
    spec: BudgetSpec,
) -> list[RationaleMask]:
    """Dispatch a budget spec to the matching selector."""
    if spec.scope == "global":
        if spec.strategy == "top-k":
            return global_topk(corpus_scores, spec.ratio, spec.floor_ratio)
        return global_contig(corpus_scores, spec.ratio, spec.min_span_len)
    masks = []
    for sv in corpus_scores:
        k = resolve_k(len(sv), spec.ratio)
        if spec.strategy == "top-k":
            masks.append(topk_instance(sv, k, ratio=spec.ratio))
        else:
            masks.append(best_span(sv, k, ratio=spec.ratio))
    return masks


def apply_rationale(doc: Document, mask: RationaleMask) -> Document:
    """Reduce a document to its selected tokens, preserving order, query, and
    label. Gold rationale indices are remapped into the reduced index space."""
    if mask.doc_id != doc.id:
        raise SchemaError(f"mask for {mask.doc_id!r} applied to document {doc.id!r}")
    if max(mask.selected) >= len(doc.tokens):
        raise SchemaError(
            f"mask for {doc.id!r} selects index {max(mask.selected)} beyond "
            f"{len(doc.tokens)} tokens"
        )
    kept = sorted(mask.selected)
    remap = {old: new for new, old in enumerate(kept)}
    gold = doc.gold_rationale
    if gold is not None:
        gold = frozenset(remap[i] for i in gold if i in remap)
    return Document(
        id=doc.id,
        tokens=tuple(doc.tokens[i] for i in kept),
        label=doc.label,
        query=doc.query,
        gold_rationale=gold,
    )


def save_masks(masks: Sequence[RationaleMask], path: str | Path) -> None:
    """One JSON object per line: id, sorted index list, contiguous flag, k."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for mask in masks:
            record: dict = {
                "id": mask.doc_id,
                "selected": sorted(mask.selected),
                "contiguous": mask.contiguous,
                "k": mask.k,
            }
            if mask.ratio is not None:
                record["ratio"] = mask.ratio
            if mask.source is not None:
                record["source"] = mask.source
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def load_masks(path: str | Path) -> list[RationaleMask]:
    masks = []
    with Path(path).open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("id", "selected", "contiguous", "k"):
                if key not in record:
                    raise SchemaError(f"line {lineno}: missing field {key!r}")
            try:
                mask = RationaleMask(
                    doc_id=str(record["id"]),
                    selected=frozenset(int(i) for i in record["selected"]),
                    contiguous=bool(record["contiguous"]),
                    k=int(record["k"]),
                    ratio=record.get("ratio"),
                    source=record.get("source"),
                )
            except (SchemaError, TypeError, ValueError) as exc:
                raise SchemaError(f"line {lineno}: {exc}") from exc
            masks.append(mask)
    return masks


def mask_by_id(masks: Sequence[RationaleMask]) -> dict[str, RationaleMask]:
    by_id = {m.doc_id: m for m in masks}
    if len(by_id) != len(masks):
        raise SchemaError("duplicate document ids among masks")
    return by_id
