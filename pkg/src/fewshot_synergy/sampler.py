"""Stratified train/test splitting and nested, label-balanced k-shot subsets.

A plan fixes one test set per tissue and a chain of shot sets in which each
ladder entry extends the previous one, so larger-k runs reuse every example
already selected for smaller k.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import LadderTruncatedWarning, PlanInfeasibleError, SplitInfeasibleError
from .ingest import LabeledExample

DEFAULT_LADDER = (2, 4, 8, 16, 32, 64, 128)
GENERATOR_NAME = "numpy-pcg64"


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must be in (0, 1), got {self.test_fraction}")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def stratified_split(examples: Sequence[LabeledExample], spec: SplitSpec) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Split into train/test with per-label proportions matching the pool.

    The test side takes round(test_fraction * count) of each label, clamped so
    both sides keep at least one example of each label. Raises
    :class:`SplitInfeasibleError` when either label has fewer than two
    examples or the pool has fewer than five rows.
    """
    pos = [i for i, ex in enumerate(examples) if ex.label == 1]
    neg = [i for i, ex in enumerate(examples) if ex.label == 0]
    if len(examples) < 5 or len(pos) < 2 or len(neg) < 2:
        raise SplitInfeasibleError(
            f"need >=5 examples and >=2 of each label, got n={len(examples)} "
            f"positives={len(pos)} negatives={len(neg)}")
    rng = np.random.default_rng(spec.seed)
    test_idx: set[int] = set()
    for group in (neg, pos):
        n_test = _round_half_up(spec.test_fraction * len(group))
        n_test = min(max(n_test, 1), len(group) - 1)
        chosen = rng.choice(len(group), size=n_test, replace=False)
        test_idx.update(group[int(i)] for i in chosen)
    train = [ex for i, ex in enumerate(examples) if i not in test_idx]
    test = [ex for i, ex in enumerate(examples) if i in test_idx]
    return train, test


@dataclass
class KShotPlan:
    """Nested shot sets over a fixed train pool and test set.

    ``shots[k]`` holds exactly k examples, contains at least one of each
    label, is disjoint from the test set, and is a subset of every larger
    entry. ``ladder`` is the realized (possibly truncated) ladder.
    """

    tissue: str
    train_pool: list[LabeledExample]
    test_set: list[LabeledExample]
    shots: dict[int, list[LabeledExample]]
    seed: int
    ladder: tuple[int, ...]
    requested_ladder: tuple[int, ...]
    generator: str = GENERATOR_NAME
    truncated: bool = field(init=False)

    def __post_init__(self):
        self.truncated = self.ladder != self.requested_ladder


def positives_for_k(k: int, prevalence: float) -> int:
    """Positive count for a k-shot set: round half up, then clamp to [1, k-1]."""
    return int(min(max(_round_half_up(k * prevalence), 1), k - 1))


def build_kshot_plan(
    train: Sequence[LabeledExample],
    test: Sequence[LabeledExample],
    ladder: Sequence[int] = DEFAULT_LADDER,
    seed: int = 0,
    tissue: str = "",
) -> KShotPlan:
    """Build nested shot sets by drawing new examples without replacement.

    Each ladder step keeps all previously selected shots and adds only the
    difference, drawing per-label counts so positives track the train-pool
    prevalence with the [1, k-1] floor. Ladder entries the pool cannot
    support truncate the plan with a :class:`LadderTruncatedWarning`.
    """
    ladder = tuple(int(k) for k in ladder)
    if any(b <= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError(f"ladder must be strictly increasing, got {ladder}")
    if any(k < 2 for k in ladder):
        raise ValueError(f"ladder entries must be >= 2, got {ladder}")
    pos_pool = [ex for ex in train if ex.label == 1]
    neg_pool = [ex for ex in train if ex.label == 0]
    if not pos_pool or not neg_pool:
        raise PlanInfeasibleError(
            f"train pool needs both labels, got positives={len(pos_pool)} negatives={len(neg_pool)}")

    prevalence = len(pos_pool) / len(train)
    rng = np.random.default_rng(seed)
    # Draw order is fixed: shuffle each label pool once, then consume prefixes.
    pos_order = [pos_pool[int(i)] for i in rng.permutation(len(pos_pool))]
    neg_order = [neg_pool[int(i)] for i in rng.permutation(len(neg_pool))]

    shots: dict[int, list[LabeledExample]] = {}
    realized: list[int] = []
    current: list[LabeledExample] = []
    taken_pos = taken_neg = 0
    for k in ladder:
        want_pos = positives_for_k(k, prevalence)
        want_neg = k - want_pos
        if k > len(train) or want_pos > len(pos_order) or want_neg > len(neg_order):
            warnings.warn(
                f"ladder truncated before k={k}: train pool has {len(train)} rows "
                f"({len(pos_order)} positive, {len(neg_order)} negative)",
                LadderTruncatedWarning)
            break
        new = pos_order[taken_pos:want_pos] + neg_order[taken_neg:want_neg]
        taken_pos, taken_neg = want_pos, want_neg
        current = current + new
        shots[k] = list(current)
        realized.append(k)
    return KShotPlan(
        tissue=tissue,
        train_pool=list(train),
        test_set=list(test),
        shots=shots,
        seed=seed,
        ladder=tuple(realized),
        requested_ladder=ladder,
    )


def plan_manifest_text(plan: KShotPlan) -> str:
    """Render the plan as line-delimited json keyed by source row ids."""
    lines = [json.dumps({
        "type": "header",
        "tissue": plan.tissue,
        "seed": plan.seed,
        "generator": plan.generator,
        "ladder": list(plan.ladder),
        "requested_ladder": list(plan.requested_ladder),
        "truncated": plan.truncated,
    }, sort_keys=True)]
    lines.append(json.dumps({"type": "test", "row_ids": [ex.record.row_id for ex in plan.test_set]}))
    for k in plan.ladder:
        lines.append(json.dumps({"type": "shots", "k": k,
                                 "row_ids": [ex.record.row_id for ex in plan.shots[k]]}))
    return "\n".join(lines) + "\n"


def write_plan_manifest(plan: KShotPlan, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(plan_manifest_text(plan))
