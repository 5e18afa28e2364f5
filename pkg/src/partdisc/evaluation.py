"""Hungarian-matching clustering accuracy with All/Old/New breakdown."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class AccReport:
    all: float
    old: float
    new: float
    permutation: np.ndarray  # permutation[pred] = matched true class


def _optimal_cost(cost: np.ndarray) -> float:
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def hungarian_match(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching; among optima, the lexicographically smallest.

    Returns perm with perm[i] = column assigned to row i.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    C = cost.shape[0]
    best = _optimal_cost(cost)
    perm = np.empty(C, dtype=int)
    remaining = list(range(C))
    running = 0.0
    for row in range(C):
        for col in remaining:
            rest_cols = [c for c in remaining if c != col]
            sub = cost[np.ix_(range(row + 1, C), rest_cols)]
            rest = _optimal_cost(sub) if rest_cols else 0.0
            if running + cost[row, col] + rest <= best + 1e-9:
                perm[row] = col
                running += cost[row, col]
                remaining.remove(col)
                break
        else:
            raise RuntimeError("no feasible column found; inconsistent matching state")
    return perm


def clustering_acc(preds, labels, old_classes, C: int | None = None) -> AccReport:
    """Accuracy of predicted cluster ids against true labels on the unlabeled set.

    One global Hungarian match over all samples maps cluster ids to true
    classes, then accuracy is reported overall and split by old/new true label.
    """
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape[0]} predictions vs {labels.shape[0]} labels")
    if C is None:
        C = int(max(preds.max(), labels.max())) + 1
    counts = np.zeros((C, C))
    np.add.at(counts, (preds, labels), 1)
    perm = hungarian_match(-counts)
    mapped = perm[preds]
    correct = mapped == labels
    old_mask = np.isin(labels, list(old_classes))
    new_mask = ~old_mask
    acc_all = float(correct.mean()) if len(preds) else 0.0
    acc_old = float(correct[old_mask].mean()) if old_mask.any() else 0.0
    acc_new = float(correct[new_mask].mean()) if new_mask.any() else 0.0
    return AccReport(all=acc_all, old=acc_old, new=acc_new, permutation=perm)
