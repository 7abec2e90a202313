"""Evaluation metrics: accuracy, Recall@k, Median Rank, corpus BLEU."""

from __future__ import annotations

from collections import Counter

import numpy as np

from .errors import UsageError


def accuracy(predictions, golds) -> float:
    """Exact-match fraction."""
    if len(predictions) != len(golds):
        raise UsageError(
            f"{len(predictions)} predictions vs {len(golds)} ground truths"
        )
    if not predictions:
        return 0.0
    hits = sum(1 for p, g in zip(predictions, golds) if p == g)
    return hits / len(predictions)


def _scores_of(matrix) -> np.ndarray:
    scores = matrix.scores if hasattr(matrix, "scores") else np.asarray(matrix)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise UsageError(f"expected a square score matrix, got shape {scores.shape}")
    return scores


def gt_ranks(matrix) -> np.ndarray:
    """1-based rank of the diagonal entry per row.

    Rows are queries; candidates are ranked by descending score and ties
    resolve toward the lower candidate index.
    """
    scores = _scores_of(matrix)
    n = scores.shape[0]
    ranks = np.zeros(n, dtype=np.int64)
    for q in range(n):
        row = scores[q]
        better = int(np.sum(row > row[q]))
        tied_ahead = int(np.sum(row[:q] == row[q]))
        ranks[q] = 1 + better + tied_ahead
    return ranks


def recall_at_k(matrix, k: int) -> float:
    """Fraction of queries whose ground-truth rank is at most k."""
    if k < 1:
        raise UsageError(f"k must be at least 1, got {k}")
    ranks = gt_ranks(matrix)
    return float(np.mean(ranks <= k))


def median_rank(matrix) -> float:
    """Median ground-truth rank; even query counts take the lower middle."""
    ranks = np.sort(gt_ranks(matrix))
    return float(ranks[(len(ranks) - 1) // 2])


def _ngram_counts(tokens: list[str], order: int) -> Counter:
    return Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


def bleu(candidates: list[list[str]], references: list[list[list[str]]], n: int = 4) -> float:
    """Corpus-level BLEU-n: clipped modified precision, geometric mean over
    orders 1..n, brevity penalty, no smoothing (a zero precision zeroes
    the score)."""
    if not 1 <= n <= 4:
        raise UsageError(f"bleu order must be in 1..4, got {n}")
    if not candidates or len(candidates) != len(references):
        raise UsageError("bleu needs aligned non-empty candidate/reference corpora")
    for refs in references:
        if not refs or any(len(r) == 0 for r in refs):
            raise UsageError("bleu references must be non-empty")

    log_precision_sum = 0.0
    for order in range(1, n + 1):
        clipped = 0
        total = 0
        for cand, refs in zip(candidates, references):
            counts = _ngram_counts(cand, order)
            if not counts:
                continue
            max_ref: Counter = Counter()
            for ref in refs:
                for gram, count in _ngram_counts(ref, order).items():
                    max_ref[gram] = max(max_ref[gram], count)
            clipped += sum(min(c, max_ref[g]) for g, c in counts.items())
            total += sum(counts.values())
        if total == 0 or clipped == 0:
            return 0.0
        log_precision_sum += np.log(clipped / total)

    cand_len = sum(len(c) for c in candidates)
    if cand_len == 0:
        return 0.0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        ref_len += min((len(r) for r in refs), key=lambda L: (abs(L - len(cand)), L))
    brevity = 1.0 if cand_len > ref_len else float(np.exp(1.0 - ref_len / cand_len))
    return float(brevity * np.exp(log_precision_sum / n))
