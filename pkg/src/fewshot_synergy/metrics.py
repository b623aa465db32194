"""Tie-correct ranking metrics: AUROC and AUPRC (average precision).

AUROC is the Mann-Whitney statistic computed from midranks, so tied scores
contribute half a concordance each. AUPRC is the non-interpolated average
precision with tied scores processed as one block: the precision reached at
the end of a block applies to every positive inside it.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import MetricUndefinedError


def _validate(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores and labels must be equal-length 1-d, got {scores.shape} vs {labels.shape}")
    if scores.size == 0:
        raise MetricUndefinedError("empty score set")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    return scores, labels


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outranks a random negative, ties at 0.5.

    Equals (concordant pairs + 0.5 * tied pairs) / (P * N). Requires at least
    one example of each label.
    """
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(f"auroc needs both labels, got positives={n_pos} negatives={n_neg}")
    ranks = _midranks(scores)
    u = float(ranks[labels == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _midranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with tied scores sharing the mean rank of their group."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auprc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision over descending scores with tied-score blocks.

    Each distinct score value forms one block; the block contributes
    (positives in block / total positives) * (precision at block end).
    Constant scores therefore yield exactly the prevalence. Requires at least
    one positive.
    """
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefinedError("auprc needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    total = 0.0
    seen = 0
    true_pos = 0
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        block_pos = int(sorted_labels[i:j + 1].sum())
        seen = j + 1
        true_pos += block_pos
        if block_pos:
            total += (block_pos / n_pos) * (true_pos / seen)
        i = j + 1
    return total
