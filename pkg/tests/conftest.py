"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the library's own code paths: metric
oracles enumerate pairs / thresholds from scratch, and the gradient oracle
uses central finite differences on the forward pass only.
"""

import numpy as np
import pytest


def auroc_pair_counting(scores, labels) -> float:
    """O(P*N) oracle: (concordant + 0.5 * tied) / (P * N)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def auprc_curve_enumeration(scores, labels) -> float:
    """Oracle: walk the step-function PR curve over descending thresholds."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    area = 0.0
    previous_recall = 0.0
    for threshold in sorted(set(scores), reverse=True):
        predicted = scores >= threshold
        tp = int(labels[predicted].sum())
        precision = tp / int(predicted.sum())
        recall = tp / n_pos
        area += (recall - previous_recall) * precision
        previous_recall = recall
    return area


def central_difference(fn, array, index, h=1e-5) -> float:
    """d fn / d array[index] by central differences; restores the entry."""
    original = array[index]
    array[index] = original + h
    up = fn()
    array[index] = original - h
    down = fn()
    array[index] = original
    return (up - down) / (2.0 * h)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_scored_set(rng, n_max=50, tie_share=0.5):
    """Random scores/labels with deliberate tie injection and both labels."""
    n = int(rng.integers(4, n_max + 1))
    scores = rng.normal(size=n)
    ties = rng.random(n) < tie_share
    if ties.any():
        scores[ties] = rng.choice(np.round(rng.normal(size=3), 1), size=int(ties.sum()))
    labels = rng.integers(0, 2, size=n)
    if labels.sum() == 0:
        labels[int(rng.integers(n))] = 1
    if labels.sum() == n:
        labels[int(rng.integers(n))] = 0
    return scores, labels
