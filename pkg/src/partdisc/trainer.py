"""Desk-scale training loop: epoch-level part decomposition plus SGD on the objective.

Each epoch starts with a full-dataset forward pass, Sinkhorn adjustment,
prototype calibration, candidate selection, and per-class GMM fitting; batches
then optimize the multi-term objective with two augmented views per sample.
Randomness is split into independent streams (batch order, augmentation,
decomposition) so that runs with the part branch disabled consume exactly the
same draws as full runs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .candidates import (
    CandidateSet,
    Prototypes,
    calibrate_prototypes,
    candidate_purity,
    compute_assignments,
    compute_ns,
    select_candidates,
)
from .errors import NumericalError
from .evaluation import clustering_acc
from .feature_store import AugmentConfig, FeatureDataset, augment_view
from .numeric import l2_normalize_cols, l2_normalize_rows, softmax_rows
from .objectives import BatchViewPair, LossConfig, ModelParams, total_objective
from .part_gmm import GmmConfig, GmmParams, filter_patches, fit_gmm, part_features, part_posteriors, select_k, shared_parts
from .transport import sinkhorn_adjust

# stream tags for seed derivation; keeps rng consumption independent per purpose
_STREAM_INIT = 11
_STREAM_BATCH = 13
_STREAM_AUGMENT = 17
_STREAM_DECOMP = 19


@dataclass
class TrainConfig:
    epochs: int = 50
    warmup_epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    loss: LossConfig = field(default_factory=LossConfig)
    gamma: float = 1.0
    K: int | None = None  # None = silhouette-selected
    k_range: tuple[int, int] = (2, 6)
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    hidden: int | None = None
    d_proj: int | None = None
    use_part_base: bool = True
    use_pdr: bool = True
    baseline_only: bool = False  # train the plain global objective
    tau_t_start: float = 0.07
    tau_t_end: float = 0.04
    tau_t_epochs: int = 10
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-6
    gmm: GmmConfig = field(default_factory=GmmConfig)

    def validate(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs exceeds epochs")
        self.loss.validate()


@dataclass
class TrainState:
    params: ModelParams
    K: int
    gmms: dict[int, GmmParams] = field(default_factory=dict)
    assignments: np.ndarray | None = None
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    candidates: CandidateSet | None = None
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    # the part head (adapter) only learns when the part-branch base loss runs;
    # PDR alone shapes the encoder but leaves the adapter untrained
    part_head_trained: bool = True


def _cosine_lr(base: float, epoch: int, epochs: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / max(epochs, 1)))


def _tau_t(cfg: TrainConfig, epoch: int) -> float:
    t = min(epoch / max(cfg.tau_t_epochs, 1), 1.0)
    return cfg.tau_t_end + 0.5 * (cfg.tau_t_start - cfg.tau_t_end) * (1.0 + math.cos(math.pi * t))


def _alpha_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.baseline_only:
        return 0.0
    if epoch < cfg.warmup_epochs:
        return cfg.loss.alpha * epoch / cfg.warmup_epochs
    return cfg.loss.alpha


def _encode_np(x: np.ndarray, params: ModelParams) -> np.ndarray:
    return x @ params.enc_W + params.enc_b


def _global_predictions(dataset: FeatureDataset, params: ModelParams, tau: float | None) -> np.ndarray:
    f = l2_normalize_rows(_encode_np(dataset.cls_matrix(), params))
    logits = f @ l2_normalize_cols(params.W)
    return softmax_rows(logits / tau if tau else logits)


def _choose_k(dataset: FeatureDataset, cfg: TrainConfig) -> int:
    if cfg.K is not None:
        return cfg.K
    pools = []
    for c in sorted(dataset.meta.old_classes):
        pts = [
            s.patches_fixed[filter_patches(s)]
            for s in dataset.samples
            if s.label == c and s.id not in dataset.meta.labeled_ids
        ]
        pools.append(np.concatenate(pts) if pts else np.empty((0, dataset.meta.d)))
    return select_k(pools, cfg.k_range, seed=cfg.seed)


def _decompose(dataset: FeatureDataset, state: TrainState, cfg: TrainConfig, epoch: int):
    """Epoch-start: Sinkhorn, calibration, candidate selection, per-class GMM fits."""
    meta = dataset.meta
    P = _global_predictions(dataset, state.params, cfg.loss.tau_s)
    Q = sinkhorn_adjust(P, cfg.sinkhorn_iters, cfg.sinkhorn_tol).Q
    cls_norm = l2_normalize_rows(dataset.cls_matrix())
    labeled_count = len(meta.labeled_ids)
    old_count = max(len(meta.old_classes), 1)
    W_tilde = calibrate_prototypes(
        Q, cls_norm, Prototypes(W=state.params.W), fallback_count=max(1, labeled_count // old_count)
    )
    N_s = compute_ns(cfg.gamma, labeled_count, old_count)
    sample_ids = np.array([s.id for s in dataset.samples])
    cands = select_candidates(W_tilde, cls_norm, meta, N_s, sample_ids, dataset.labels())
    by_id = {s.id: i for i, s in enumerate(dataset.samples)}
    gmms: dict[int, GmmParams] = {}
    for c in range(meta.C):
        pts = []
        for sid in cands.by_class[c]:
            s = dataset.samples[by_id[sid]]
            pts.append(s.patches_fixed[filter_patches(s)])
        points = np.concatenate(pts) if pts else np.empty((0, meta.d))
        k_fit = min(state.K, len(points))
        if k_fit < 1:
            warnings.warn(f"class {c}: no candidate patches; keeping previous mixture")
            if c in state.gmms:
                gmms[c] = state.gmms[c]
            continue
        gmm_cfg = replace(cfg.gmm, seed=(cfg.seed * 1_000_003 + _STREAM_DECOMP * 10_007 + epoch * 101 + c))
        # warm-start from last epoch's mixture so component identity stays stable
        prev = state.gmms.get(c)
        try:
            gmms[c] = fit_gmm(points.astype(np.float64), k_fit, gmm_cfg, init=prev).params
        except NumericalError:
            if prev is None:
                raise
            gmms[c] = fit_gmm(points.astype(np.float64), k_fit, gmm_cfg).params
    state.gmms = gmms
    state.assignments = compute_assignments(Q)
    state.candidates = cands
    return cands


def _batch_inputs(dataset, rows, state, cfg, epoch, with_parts):
    meta = dataset.meta
    v1_samples, v2_samples = [], []
    for r in rows:
        s = dataset.samples[r]
        v1_samples.append(augment_view(s, seed=[cfg.seed, _STREAM_AUGMENT, epoch, s.id, 0], cfg=cfg.augment))
        v2_samples.append(augment_view(s, seed=[cfg.seed, _STREAM_AUGMENT, epoch, s.id, 1], cfg=cfg.augment))
    labels = np.array(
        [dataset.samples[r].label if dataset.samples[r].id in meta.labeled_ids else -1 for r in rows]
    )
    K = state.K
    if with_parts:
        M1 = np.empty((len(rows), meta.N_p, K))
        M2 = np.empty((len(rows), meta.N_p, K))
        shared = []
        for i, r in enumerate(rows):
            gmm = state.gmms[int(state.assignments[r])]
            m1 = part_posteriors(v1_samples[i], gmm)
            m2 = part_posteriors(v2_samples[i], gmm)
            if gmm.K < K:  # pad a shrunken per-class mixture to the common width
                M1[i] = np.pad(m1.M, ((0, 0), (0, K - gmm.K)))
                M2[i] = np.pad(m2.M, ((0, 0), (0, K - gmm.K)))
            else:
                M1[i], M2[i] = m1.M, m2.M
            shared.append(shared_parts(m1, m2, v1_samples[i].attention, v2_samples[i].attention))
    else:
        M1 = np.zeros((len(rows), meta.N_p, K))
        M2 = np.zeros((len(rows), meta.N_p, K))
        shared = [set() for _ in rows]
    return BatchViewPair(
        cls_v1=np.stack([s.cls_fixed for s in v1_samples]).astype(np.float64),
        cls_v2=np.stack([s.cls_fixed for s in v2_samples]).astype(np.float64),
        patches_v1=np.stack([s.patches_fixed for s in v1_samples]).astype(np.float64),
        patches_v2=np.stack([s.patches_fixed for s in v2_samples]).astype(np.float64),
        M_v1=M1,
        M_v2=M2,
        labels=labels,
        shared_parts=shared,
    )


def _sgd_step(state: TrainState, grads: dict[str, np.ndarray], lr: float, momentum: float):
    for name, g in grads.items():
        vel = state.velocity.get(name)
        vel = g if vel is None else momentum * vel + g
        state.velocity[name] = vel
        setattr(state.params, name, getattr(state.params, name) - lr * vel)
    # renormalization is part of the optimizer step
    state.params.W = state.params.W / np.linalg.norm(state.params.W, axis=0, keepdims=True)


def predict(state: TrainState, dataset: FeatureDataset, combine: bool | None = None) -> np.ndarray:
    """Class assignments from the global branch, optionally summed with the part branch.

    The combined rule adds the two untempered softmaxes over the shared
    prototypes; ties resolve toward the lower class id.
    """
    if combine is None:
        combine = bool(state.gmms) and state.part_head_trained and not np.isclose(state.loss_cfg.alpha, 0.0)
    params = state.params
    scores = _global_predictions(dataset, params, tau=None)
    if combine:
        P = _global_predictions(dataset, params, state.loss_cfg.tau_s)
        Q = sinkhorn_adjust(P).Q
        a = compute_assignments(Q)
        K = state.K
        h_rows = []
        for i, s in enumerate(dataset.samples):
            gmm = state.gmms[int(a[i])]
            M = part_posteriors(s, gmm).M
            if gmm.K < K:
                M = np.pad(M, ((0, 0), (0, K - gmm.K)))
            learnable = _encode_np(s.patches_fixed.astype(np.float64), params)
            v = M.T @ learnable
            v = v / np.sqrt(np.sum(v * v, axis=-1, keepdims=True) + 1e-24)
            h_rows.append(v.reshape(-1))
        H = np.stack(h_rows)
        h_part = np.tanh(H @ params.ad1_W + params.ad1_b) @ params.ad2_W + params.ad2_b
        hn = l2_normalize_rows(h_part)
        scores = scores + softmax_rows(hn @ l2_normalize_cols(params.W))
    return np.argmax(scores, axis=1)


def train(dataset: FeatureDataset, cfg: TrainConfig):
    """Run the full loop; returns (TrainState, per-epoch metric dicts)."""
    cfg.validate()
    meta = dataset.meta
    K = _choose_k(dataset, cfg)
    params = ModelParams.init(
        d=meta.d,
        C=meta.C,
        K=K,
        hidden=cfg.hidden,
        d_proj=cfg.d_proj,
        seed=cfg.seed * 1_000_003 + _STREAM_INIT,
    )
    state = TrainState(
        params=params,
        K=K,
        loss_cfg=cfg.loss,
        part_head_trained=cfg.use_part_base and not cfg.baseline_only,
    )
    if cfg.baseline_only:
        state.loss_cfg = replace(cfg.loss, alpha=0.0)
    rng_batch = np.random.default_rng([cfg.seed, _STREAM_BATCH])
    n = len(dataset)
    unlabeled_rows = np.flatnonzero(~dataset.labeled_mask())
    truth = {s.id: s.label for s in dataset.samples}
    metrics = []
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        cands = _decompose(dataset, state, cfg, epoch)
        _, mean_purity = candidate_purity(cands, truth, meta)
        alpha = _alpha_at(cfg, epoch)
        with_parts = alpha > 0 and (cfg.use_part_base or cfg.use_pdr)
        loss_cfg = replace(cfg.loss, tau_t=_tau_t(cfg, epoch))
        lr = _cosine_lr(cfg.learning_rate, epoch, cfg.epochs)
        order = rng_batch.permutation(n)
        epoch_terms: dict[str, float] = {}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            if len(rows) < 2:
                continue
            batch = _batch_inputs(dataset, rows, state, cfg, epoch, with_parts)
            value, terms, grads = total_objective(
                batch,
                state.params,
                loss_cfg,
                use_part_base=cfg.use_part_base and not cfg.baseline_only,
                use_pdr=cfg.use_pdr and not cfg.baseline_only,
                alpha=alpha,
            )
            if not np.isfinite(value):
                raise NumericalError(f"loss diverged at epoch {epoch}, batch {batches}")
            _sgd_step(state, grads, lr, cfg.momentum)
            for k_, v_ in terms.items():
                epoch_terms[k_] = epoch_terms.get(k_, 0.0) + v_
            batches += 1
        preds = predict(state, dataset, combine=with_parts and state.part_head_trained)
        report = clustering_acc(
            preds[unlabeled_rows],
            dataset.labels()[unlabeled_rows],
            meta.old_classes,
            C=meta.C,
        )
        row = {name: total / max(batches, 1) for name, total in epoch_terms.items()}
        row.update(
            epoch=epoch,
            alpha=alpha,
            lr=lr,
            acc_all=report.all,
            acc_old=report.old,
            acc_new=report.new,
            mean_purity=mean_purity,
        )
        metrics.append(row)
    return state, metrics
