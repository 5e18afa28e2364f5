"""Attention-filtered patch pooling, per-class diagonal GMMs, part-count selection.

Each class's foreground patches are modeled as a K-component diagonal-covariance
mixture fitted by EM; patch-to-part posteriors of that mixture form the part
attention map that weights learnable patch features into part features.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .feature_store import Sample
from .numeric import logsumexp

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmConfig:
    max_em_iters: int = 100
    em_tol: float = 1e-4  # relative log-likelihood improvement
    var_floor: float = 1e-6
    seed: int = 0
    normalize: bool = False  # l2-normalize input patch features before fitting


@dataclass
class GmmParams:
    K: int
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d), diagonal covariance

    def validate(self, var_floor: float = 1e-6):
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValidationError("mixture weights must sum to 1")
        if np.any(self.variances < var_floor * (1 - 1e-12)):
            raise ValidationError("variances below floor")


@dataclass
class GmmFit:
    params: GmmParams
    log_likelihood: float
    ll_history: list[float] = field(default_factory=list)


@dataclass
class PartAttentionMap:
    M: np.ndarray  # (N_p, K), row-stochastic


def filter_patches(sample: Sample) -> np.ndarray:
    """Indices of patches whose attention reaches the sample's mean attention."""
    attn = sample.attention
    return np.flatnonzero(attn >= attn.mean())


def _component_log_densities(points: np.ndarray, params: GmmParams) -> np.ndarray:
    """(m, K) matrix of log pi_k + log N(x; mu_k, diag var_k)."""
    diff = points[:, None, :] - params.means[None, :, :]  # (m, K, d)
    quad = np.sum(diff * diff / params.variances[None], axis=-1)
    log_det = np.sum(np.log(params.variances), axis=-1)  # (K,)
    d = points.shape[1]
    log_norm = -0.5 * (d * LOG_2PI + log_det)
    return np.log(params.weights)[None, :] + log_norm[None, :] - 0.5 * quad


def kmeans_pp_init(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding over the input points."""
    m = points.shape[0]
    centers = np.empty((K, points.shape[1]))
    centers[0] = points[rng.integers(m)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:  # all points coincide with chosen centers
            centers[k] = points[rng.integers(m)]
            continue
        centers[k] = points[rng.choice(m, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[k]) ** 2, axis=1))
    return centers


def kmeans(points: np.ndarray, K: int, rng: np.random.Generator, max_iters: int = 100):
    """Lloyd iterations from k-means++ seeds; returns (centers, labels, inertia)."""
    centers = kmeans_pp_init(points, K, rng)
    labels = None
    for _ in range(max_iters):
        d2 = np.sum((points[:, None, :] - centers[None]) ** 2, axis=-1)
        new_labels = np.argmin(d2, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        nearest = d2[np.arange(len(points)), labels]
        for k in range(K):
            mask = labels == k
            if mask.any():
                centers[k] = points[mask].mean(axis=0)
            else:  # re-seed an empty cluster at the worst-served point
                centers[k] = points[np.argmax(nearest)]
    d2 = np.sum((points[:, None, :] - centers[None]) ** 2, axis=-1)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(points)), labels].sum())
    return centers, labels, inertia


def fit_gmm(points: np.ndarray, K: int, cfg: GmmConfig | None = None, init: GmmParams | None = None) -> GmmFit:
    """Diagonal-covariance EM initialized by k-means++ seeding.

    `init` warm-starts EM from an existing mixture (same K) instead of the
    k-means++ seeds; callers that refit the same class repeatedly use it to
    keep component identity stable across refits.

    A collapsed component (weight < 1e-8) is reinitialized once from the point
    farthest in Mahalanobis distance from every component; a second collapse
    is an error.
    """
    cfg = cfg or GmmConfig()
    points = np.asarray(points, dtype=np.float64)
    m, d = points.shape
    if m < K:
        raise NumericalError(f"need at least K={K} points, got {m}")
    if cfg.normalize:
        from .numeric import l2_normalize_rows

        points = l2_normalize_rows(points)
    rng = np.random.default_rng(cfg.seed)
    global_var = np.maximum(points.var(axis=0), cfg.var_floor)
    if init is not None and init.K == K:
        params = GmmParams(
            K=K,
            weights=init.weights.copy(),
            means=init.means.copy(),
            variances=np.maximum(init.variances.copy(), cfg.var_floor),
        )
    else:
        means = kmeans_pp_init(points, K, rng)
        variances = np.tile(global_var, (K, 1))
        weights = np.full(K, 1.0 / K)
        params = GmmParams(K=K, weights=weights, means=means, variances=variances)

    ll_history: list[float] = []
    reinitialized = False
    prev_ll = -np.inf
    for _ in range(cfg.max_em_iters):
        log_joint = _component_log_densities(points, params)
        log_norm = logsumexp(log_joint, axis=1, keepdims=True)
        ll = float(log_norm.sum())
        ll_history.append(ll)
        resp = np.exp(log_joint - log_norm)  # (m, K)

        nk = resp.sum(axis=0)
        collapsed = np.flatnonzero(nk / m < 1e-8)
        if collapsed.size:
            if reinitialized:
                raise NumericalError(f"components {collapsed.tolist()} collapsed twice")
            reinitialized = True
            maha = np.min(
                np.sum((points[:, None, :] - params.means[None]) ** 2 / params.variances[None], axis=-1),
                axis=1,
            )
            far = int(np.argmax(maha))
            for k in collapsed:
                params.means[k] = points[far]
                params.variances[k] = global_var
            nk = np.maximum(nk, 1e-8 * m)
        params.weights = nk / nk.sum()
        params.means = (resp.T @ points) / nk[:, None]
        diff2 = (points[:, None, :] - params.means[None]) ** 2
        params.variances = np.maximum(
            np.einsum("mk,mkd->kd", resp, diff2) / nk[:, None], cfg.var_floor
        )

        if np.isfinite(prev_ll) and abs(ll - prev_ll) < cfg.em_tol * abs(prev_ll):
            break
        prev_ll = ll
    final_ll = float(logsumexp(_component_log_densities(points, params), axis=1).sum())
    ll_history.append(final_ll)
    params.validate(cfg.var_floor)
    return GmmFit(params=params, log_likelihood=final_ll, ll_history=ll_history)


def silhouette_score(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over points, Euclidean metric; singleton clusters score 0."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    dist = np.sqrt(np.maximum(np.sum((points[:, None, :] - points[None]) ** 2, axis=-1), 0.0))
    scores = np.zeros(len(points))
    sizes = {c: int(np.sum(labels == c)) for c in clusters}
    for i in range(len(points)):
        own = labels[i]
        if sizes[own] == 1:
            scores[i] = 0.0
            continue
        mask_own = labels == own
        a = dist[i, mask_own].sum() / (sizes[own] - 1)
        b = min(dist[i, labels == c].mean() for c in clusters if c != own)
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def select_k(
    old_class_test_patchsets: list[np.ndarray],
    k_range: tuple[int, int] = (3, 8),
    seed: int = 0,
) -> int:
    """Part count maximizing the class-averaged silhouette of k-means clusterings.

    Each old class's filtered test patches are pooled per class; ties in the
    average score resolve toward the smaller k.
    """
    k_min, k_max = k_range
    usable = []
    for ci, pts in enumerate(old_class_test_patchsets):
        if len(pts) >= k_max + 1:
            usable.append((ci, np.asarray(pts, dtype=np.float64)))
        else:
            warnings.warn(f"class set {ci} has {len(pts)} points (< {k_max + 1}); skipped")
    if not usable:
        raise NumericalError("no class set large enough for part-count selection")
    best_k, best_score = None, -np.inf
    for k in range(k_min, k_max + 1):
        scores = []
        for ci, pts in usable:
            rng = np.random.default_rng([seed, k, ci])
            _, labels, _ = kmeans(pts, k, rng)
            scores.append(silhouette_score(pts, labels))
        avg = float(np.mean(scores))
        if avg > best_score:
            best_k, best_score = k, avg
    return best_k


def part_posteriors(sample: Sample, params: GmmParams) -> PartAttentionMap:
    """Row-stochastic patch-to-part posterior map computed from fixed patch features."""
    log_joint = _component_log_densities(sample.patches_fixed.astype(np.float64), params)
    norm = logsumexp(log_joint, axis=1, keepdims=True)
    underflow = ~np.isfinite(norm[:, 0])
    M = np.exp(log_joint - np.where(np.isfinite(norm), norm, 0.0))
    if underflow.any():
        warnings.warn(f"part_posteriors: {int(underflow.sum())} patches underflowed; using uniform rows")
        M[underflow] = 1.0 / params.K
    return PartAttentionMap(M=M)


def part_features(M: PartAttentionMap, patches_learnable: np.ndarray) -> np.ndarray:
    """K x d part features: posterior-weighted sums of learnable patch features."""
    return M.M.T @ patches_learnable


def _present_parts(M: PartAttentionMap, attention: np.ndarray) -> set[int]:
    # Presence rule (artifact choice): a part is present when some strictly
    # positive, above-mean-attention patch has it as argmax posterior.
    keep = np.flatnonzero((attention >= attention.mean()) & (attention > 0))
    if keep.size == 0:
        return set()
    return set(int(k) for k in np.argmax(M.M[keep], axis=1))


def shared_parts(
    M_view1: PartAttentionMap,
    M_view2: PartAttentionMap,
    attention_view1: np.ndarray,
    attention_view2: np.ndarray,
) -> set[int]:
    """Parts present in both views of the same sample (possibly empty)."""
    return _present_parts(M_view1, attention_view1) & _present_parts(M_view2, attention_view2)
