"""Per-class candidate selection via calibrated prototypes.

The pipeline is: balanced assignment of every sample to a class via
Sinkhorn-adjusted predictions, calibration of each class direction as the
assignment-weighted mean of its members' CLS features, then a fresh top-N_s
selection per new class from the calibrated cosine scores. Old classes always
take exactly their labeled samples.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .feature_store import DatasetMeta
from .numeric import l2_normalize_cols, softmax_rows


@dataclass
class Prototypes:
    W: np.ndarray  # (d, C), unit-norm columns

    def validate(self, tol: float = 1e-6):
        norms = np.linalg.norm(self.W, axis=0)
        if np.any(np.abs(norms - 1.0) > tol):
            raise ValueError("prototype columns must be unit-norm")

    @property
    def C(self) -> int:
        return self.W.shape[1]


@dataclass
class CandidateSet:
    by_class: dict[int, list[int]]  # class id -> sample ids
    N_s: int


def compute_ns(gamma: float, labeled_count: int, old_class_count: int) -> int:
    if old_class_count < 1:
        raise ValueError("old_class_count must be >= 1")
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    return max(1, math.floor(gamma * labeled_count / old_class_count))


def compute_assignments(Q: np.ndarray) -> np.ndarray:
    """Per-row argmax class; ties resolved toward the lowest class index."""
    return np.argmax(Q, axis=1)


def calibrate_prototypes(
    Q: np.ndarray,
    cls_features: np.ndarray,
    prototypes: Prototypes,
    fallback_count: int | None = None,
) -> Prototypes:
    """Recompute each class direction as the Q-weighted mean of its assigned CLS features.

    Classes with no assigned sample (early training) fall back to the top
    `fallback_count` samples of that class by adjusted prediction. Columns are
    re-normalized to unit norm.
    """
    n, C = Q.shape
    assignments = compute_assignments(Q)
    if fallback_count is None:
        fallback_count = max(1, n // C)
    W_tilde = np.empty_like(prototypes.W, dtype=np.float64)
    for c in range(C):
        members = np.flatnonzero(assignments == c)
        if members.size == 0:
            members = np.argsort(-Q[:, c], kind="stable")[:fallback_count]
        weights = Q[members, c]
        total = weights.sum()
        if total <= 0:
            raise NumericalError(f"class {c}: zero total assignment weight after fallback")
        W_tilde[:, c] = weights @ cls_features[members] / total
    return Prototypes(W=l2_normalize_cols(W_tilde))


def select_candidates(
    W_tilde: Prototypes,
    cls_features: np.ndarray,
    meta: DatasetMeta,
    N_s: int,
    sample_ids: np.ndarray,
    labels: np.ndarray,
) -> CandidateSet:
    """Top-N_s samples per new class by calibrated softmax score; labeled data for old classes.

    `sample_ids` and `labels` are row-aligned with `cls_features`; labels use
    -1 for unlabeled. A sample may land in several classes' candidate sets.
    Score ties break toward the lower sample id.
    """
    n = cls_features.shape[0]
    if N_s > n:
        warnings.warn(f"N_s={N_s} exceeds dataset size {n}; taking all samples")
        N_s = n
    scores = softmax_rows(cls_features @ W_tilde.W)  # no temperature here
    labeled_mask = np.isin(sample_ids, list(meta.labeled_ids))
    by_class: dict[int, list[int]] = {}
    for c in range(meta.C):
        if c in meta.old_classes:
            member_rows = np.flatnonzero(labeled_mask & (labels == c))
            by_class[c] = sorted(int(sample_ids[i]) for i in member_rows)
        else:
            order = np.lexsort((sample_ids, -scores[:, c]))
            by_class[c] = [int(sample_ids[i]) for i in order[:N_s]]
    return CandidateSet(by_class=by_class, N_s=N_s)


def candidate_purity(
    cands: CandidateSet,
    ground_truth_labels: dict[int, int],
    meta: DatasetMeta,
) -> tuple[dict[int, float], float]:
    """Fraction of each class's candidates whose true label matches the class.

    New-class indices are first aligned to true labels with a Hungarian match
    on the candidate/true-label contingency counts. Returns per-class purity
    and the mean over new classes.
    """
    from .evaluation import hungarian_match

    new_classes = sorted(set(range(meta.C)) - meta.old_classes)
    purity: dict[int, float] = {}
    for c in sorted(meta.old_classes):
        ids = cands.by_class.get(c, [])
        purity[c] = (
            sum(1 for i in ids if ground_truth_labels.get(i) == c) / len(ids) if ids else 0.0
        )
    if not new_classes:
        return purity, float("nan")
    idx = {c: k for k, c in enumerate(new_classes)}
    counts = np.zeros((len(new_classes), len(new_classes)))
    for c in new_classes:
        for i in cands.by_class.get(c, []):
            t = ground_truth_labels.get(i)
            if t in idx:
                counts[idx[c], idx[t]] += 1
    perm = hungarian_match(-counts)
    for c in new_classes:
        ids = cands.by_class.get(c, [])
        matched_label = new_classes[perm[idx[c]]]
        purity[c] = (
            sum(1 for i in ids if ground_truth_labels.get(i) == matched_label) / len(ids)
            if ids
            else 0.0
        )
    mean_new = float(np.mean([purity[c] for c in new_classes]))
    return purity, mean_new
