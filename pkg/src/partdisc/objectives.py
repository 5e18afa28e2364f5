"""Training objectives as pure scalar functions with exact analytic gradients.

Every public loss takes numpy arrays, builds a reverse-mode graph
(`autodiff.Tensor`), and returns the scalar value together with gradients for
each input that is optimized. `total_objective` wires the toy model forward
pass (encoder, prototypes, adapter, projector) into the full multi-term loss.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, l2_normalize_cols, l2_normalize_rows, logsumexp_rows, softmax_rows


@dataclass
class LossConfig:
    tau_s: float = 0.1
    tau_t: float = 0.04
    tau_u: float = 0.07
    tau_c: float = 1.0
    lam: float = 0.35
    eps_me: float = 1.0
    alpha: float = 2.0
    symmetric_unsup: bool = True  # each view serves as teacher once
    pdr_standard_infonce: bool = False  # include the positive pair in the denominator

    def validate(self):
        for name in ("tau_s", "tau_t", "tau_u", "tau_c"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


# ---------------------------------------------------------------------------
# tape-level loss pieces (shared by the standalone APIs and total_objective)
# ---------------------------------------------------------------------------


def _class_logits(features: Tensor, W: Tensor, tau: float) -> Tensor:
    return (l2_normalize_rows(features) @ l2_normalize_cols(W)) / tau


def _sup_cls(features: Tensor, labels: np.ndarray, W: Tensor, tau_s: float) -> Tensor:
    idx = np.flatnonzero(labels >= 0)
    if idx.size == 0:
        return Tensor(0.0)
    logits = _class_logits(features, W, tau_s)[idx]
    picked = logits[np.arange(idx.size), labels[idx]]
    return (logsumexp_rows(logits).sum() - picked.sum()) / idx.size


def _soft_ce(teacher_probs: np.ndarray, student_logits: Tensor) -> Tensor:
    log_p = student_logits - logsumexp_rows(student_logits)
    return -(Tensor(teacher_probs) * log_p).sum() / teacher_probs.shape[0]


def _unsup_cls_one_direction(student_feat: Tensor, teacher_feat: Tensor, W: Tensor, tau_s, tau_t, teacher_probs=None) -> Tensor:
    if teacher_probs is None:
        teacher_logits = _class_logits(teacher_feat.detach(), W.detach(), tau_t)
        teacher_probs = np.exp(teacher_logits.value - logsumexp_rows(teacher_logits).value)
    student_logits = _class_logits(student_feat, W, tau_s)
    return _soft_ce(teacher_probs, student_logits)


def _unsup_cls(f1: Tensor, f2: Tensor, W: Tensor, tau_s, tau_t, symmetric=True, teachers=None) -> Tensor:
    # `teachers` optionally pins the (already detached) teacher probabilities;
    # the finite-difference oracle uses this to respect stop-gradient semantics.
    t12 = teachers[0] if teachers else None
    loss = _unsup_cls_one_direction(f1, f2, W, tau_s, tau_t, t12)
    if symmetric:
        t21 = teachers[1] if teachers else None
        loss = (loss + _unsup_cls_one_direction(f2, f1, W, tau_s, tau_t, t21)) * 0.5
    return loss


def _mean_entropy(predictions: Tensor, eps_me: float) -> Tensor:
    p_bar = predictions.mean(axis=0)
    return eps_me * (p_bar * p_bar.log()).sum()


def _sup_rep_one_view(h: Tensor, labels: np.ndarray, tau_c: float) -> Tensor:
    idx = np.flatnonzero(labels >= 0)
    if idx.size < 2:
        return Tensor(0.0)
    hn = l2_normalize_rows(h)[idx]
    sims = (hn @ hn.T) / tau_c
    y = labels[idx]
    m = idx.size
    off_diag = ~np.eye(m, dtype=bool)
    pos_mask = (y[:, None] == y[None, :]) & off_diag
    cnt = pos_mask.sum(axis=1)
    valid = cnt > 0
    if not valid.any():
        return Tensor(0.0)
    denom = logsumexp_rows(sims + np.where(off_diag, 0.0, -np.inf)).reshape(m)
    pos_sum = (sims * pos_mask.astype(float)).sum(axis=1)
    per_anchor = denom - pos_sum / np.maximum(cnt, 1)
    return (per_anchor * valid.astype(float)).sum() / m


def _sup_rep(h1: Tensor, h2: Tensor, labels: np.ndarray, tau_c: float) -> Tensor:
    return (_sup_rep_one_view(h1, labels, tau_c) + _sup_rep_one_view(h2, labels, tau_c)) * 0.5


def _unsup_rep(h1: Tensor, h2: Tensor, tau_u: float) -> Tensor:
    n = h1.shape[0]
    if n < 2:
        raise ValueError("unsup_rep_loss needs batch size >= 2")
    a = l2_normalize_rows(h1)
    b = l2_normalize_rows(h2)
    pos = (a * b).sum(axis=-1) / tau_u  # cross-view positives, (n,)
    sims = (a @ a.T) / tau_u  # same-view negatives
    mask = np.where(np.eye(n, dtype=bool), -np.inf, 0.0)
    denom = logsumexp_rows(sims + mask).reshape(n)
    return (denom - pos).sum() / n


def _pdr(v1: Tensor, v2: Tensor, shared: list[set[int]], standard_infonce=False) -> Tensor:
    """Part discrepancy regularization over l2-normalized part features.

    v1, v2: (B, K, d). Only parts in each sample's shared set participate;
    the denominator excludes the positive pair unless standard_infonce.
    """
    a = l2_normalize_rows(v1)
    b = l2_normalize_rows(v2)
    total = Tensor(0.0)
    terms = 0
    B = v1.shape[0]
    for i in range(B):
        ks = sorted(shared[i])
        if len(ks) < 2:
            continue
        sims = a[i][np.array(ks)] @ b[i][np.array(ks)].T  # (s, s), implicit temperature 1
        s = len(ks)
        for r in range(s):
            if standard_infonce:
                neg_idx = np.arange(s)
            else:
                neg_idx = np.flatnonzero(np.arange(s) != r)
            denom = ad.logsumexp_rows(sims[r][neg_idx].reshape(1, -1)).reshape(())
            total = total + denom - sims[r, r]
            terms += 1
    if terms == 0:
        warnings.warn("pdr_loss: no sample had >= 2 shared parts; returning 0")
        return Tensor(0.0)
    return total / terms


# ---------------------------------------------------------------------------
# standalone loss APIs: numpy in, (value, gradients) out
# ---------------------------------------------------------------------------


def _run(loss: Tensor, inputs: dict[str, Tensor]):
    if loss.parents or loss.backward_fn:
        backward(loss)
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.value))
        for name, t in inputs.items()
    }
    return float(loss.value), grads


def sup_cls_loss(features, labels, W, tau_s):
    f, w = Tensor(features), Tensor(W)
    return _run(_sup_cls(f, np.asarray(labels), w, tau_s), {"features": f, "W": w})


def unsup_cls_loss(view1_features, view2_features, W, tau_s, tau_t, symmetric=True):
    f1, f2, w = Tensor(view1_features), Tensor(view2_features), Tensor(W)
    loss = _unsup_cls(f1, f2, w, tau_s, tau_t, symmetric)
    return _run(loss, {"view1_features": f1, "view2_features": f2, "W": w})


def mean_entropy_reg(view_predictions, eps_me=1.0):
    p = Tensor(view_predictions)
    return _run(_mean_entropy(p, eps_me), {"view_predictions": p})


def sup_rep_loss(projected_v1, projected_v2, labels, tau_c):
    h1, h2 = Tensor(projected_v1), Tensor(projected_v2)
    loss = _sup_rep(h1, h2, np.asarray(labels), tau_c)
    return _run(loss, {"projected_v1": h1, "projected_v2": h2})


def unsup_rep_loss(projected_v1, projected_v2, tau_u):
    h1, h2 = Tensor(projected_v1), Tensor(projected_v2)
    loss = _unsup_rep(h1, h2, tau_u)
    return _run(loss, {"projected_v1": h1, "projected_v2": h2})


def pdr_loss(part_features_v1, part_features_v2, shared_parts, standard_infonce=False):
    v1, v2 = Tensor(part_features_v1), Tensor(part_features_v2)
    loss = _pdr(v1, v2, shared_parts, standard_infonce)
    return _run(loss, {"part_features_v1": v1, "part_features_v2": v2})


# ---------------------------------------------------------------------------
# model parameters and the full objective
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    """Toy model: linear encoder, cosine prototypes, part adapter, projector MLPs."""

    enc_W: np.ndarray  # (d, d)
    enc_b: np.ndarray  # (d,)
    W: np.ndarray  # (d, C), unit-norm columns
    ad1_W: np.ndarray  # (K*d, hidden)
    ad1_b: np.ndarray
    ad2_W: np.ndarray  # (hidden, d)
    ad2_b: np.ndarray
    pr1_W: np.ndarray  # (d, hidden)
    pr1_b: np.ndarray
    pr2_W: np.ndarray  # (hidden, d_proj)
    pr2_b: np.ndarray

    GROUPS = ("enc_W", "enc_b", "W", "ad1_W", "ad1_b", "ad2_W", "ad2_b", "pr1_W", "pr1_b", "pr2_W", "pr2_b")

    @classmethod
    def init(cls, d: int, C: int, K: int, hidden: int | None = None, d_proj: int | None = None, seed: int = 0):
        hidden = hidden or 2 * d
        d_proj = d_proj or d
        rng = np.random.default_rng(seed)
        glorot = lambda fan_in, fan_out: rng.normal(scale=np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))
        W = rng.normal(size=(d, C))
        W /= np.linalg.norm(W, axis=0, keepdims=True)
        return cls(
            enc_W=np.eye(d) + 0.01 * rng.normal(size=(d, d)),
            enc_b=np.zeros(d),
            W=W,
            ad1_W=glorot(K * d, hidden),
            ad1_b=np.zeros(hidden),
            ad2_W=glorot(hidden, d),
            ad2_b=np.zeros(d),
            pr1_W=glorot(d, hidden),
            pr1_b=np.zeros(hidden),
            pr2_W=glorot(hidden, d_proj),
            pr2_b=np.zeros(d_proj),
        )

    def as_tensors(self) -> dict[str, Tensor]:
        return {name: Tensor(getattr(self, name)) for name in self.GROUPS}


@dataclass
class BatchViewPair:
    """Index-aligned two-view batch with precomputed part attention maps."""

    cls_v1: np.ndarray  # (B, d) fixed CLS features, view 1
    cls_v2: np.ndarray
    patches_v1: np.ndarray  # (B, N_p, d) fixed patch features, view 1
    patches_v2: np.ndarray
    M_v1: np.ndarray  # (B, N_p, K) part posteriors per view (constants)
    M_v2: np.ndarray
    labels: np.ndarray  # (B,), -1 = unlabeled
    shared_parts: list[set[int]] = field(default_factory=list)


def _mlp(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    return (x @ W1 + b1).tanh() @ W2 + b2


def _encode(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    return x @ p["enc_W"] + p["enc_b"]


def _part_enhanced(patches: np.ndarray, M: np.ndarray, p: dict[str, Tensor]):
    """Encoder over patches, posterior-weighted pooling, adapter aggregation.

    Returns (part features (B, K, d), part-enhanced features (B, d)).
    """
    B, N_p, d = patches.shape
    learnable = _encode(Tensor(patches.reshape(B * N_p, d)), p).reshape(B, N_p, d)
    v = Tensor(np.swapaxes(M, 1, 2)) @ learnable  # (B, K, d)
    K = M.shape[2]
    # per-part normalization bounds the adapter input scale regardless of how
    # much posterior mass each part collected
    v_n = ad.l2_normalize_rows(v)
    h_part = _mlp(v_n.reshape(B, K * d), p["ad1_W"], p["ad1_b"], p["ad2_W"], p["ad2_b"])
    return v, h_part


def _base_loss(x1: Tensor, x2: Tensor, labels: np.ndarray, p: dict[str, Tensor], cfg: LossConfig, teachers=None):
    """lambda-weighted classification + representation losses plus mean-entropy term."""
    W = p["W"]
    s_cls = _sup_cls(x1, labels, W, cfg.tau_s)
    u_cls = _unsup_cls(x1, x2, W, cfg.tau_s, cfg.tau_t, cfg.symmetric_unsup, teachers)
    preds = ad.concat([softmax_rows(_class_logits(x1, W, cfg.tau_s)), softmax_rows(_class_logits(x2, W, cfg.tau_s))])
    zeta = _mean_entropy(preds, cfg.eps_me)
    h1 = _mlp(x1, p["pr1_W"], p["pr1_b"], p["pr2_W"], p["pr2_b"])
    h2 = _mlp(x2, p["pr1_W"], p["pr1_b"], p["pr2_W"], p["pr2_b"])
    s_rep = _sup_rep(h1, h2, labels, cfg.tau_c)
    u_rep = _unsup_rep(h1, h2, cfg.tau_u)
    loss = cfg.lam * s_cls + (1.0 - cfg.lam) * u_cls + zeta + cfg.lam * s_rep + (1.0 - cfg.lam) * u_rep
    terms = {
        "s_cls": float(s_cls.value),
        "u_cls": float(u_cls.value),
        "zeta": float(zeta.value),
        "s_rep": float(s_rep.value),
        "u_rep": float(u_rep.value),
    }
    return loss, terms


def _np_mlp(x, W1, b1, W2, b2):
    return np.tanh(x @ W1 + b1) @ W2 + b2


def _np_forward(batch: BatchViewPair, params: ModelParams):
    """Plain-numpy forward pass; returns (f1, f2, h_part1, h_part2)."""
    f1 = batch.cls_v1 @ params.enc_W + params.enc_b
    f2 = batch.cls_v2 @ params.enc_W + params.enc_b

    def part(patches, M):
        B, N_p, d = patches.shape
        learnable = (patches.reshape(B * N_p, d) @ params.enc_W + params.enc_b).reshape(B, N_p, d)
        v = np.swapaxes(M, 1, 2) @ learnable
        v = v / np.sqrt(np.sum(v * v, axis=-1, keepdims=True) + 1e-24)
        return _np_mlp(v.reshape(B, -1), params.ad1_W, params.ad1_b, params.ad2_W, params.ad2_b)

    h1 = part(batch.patches_v1, batch.M_v1)
    h2 = part(batch.patches_v2, batch.M_v2)
    return f1, f2, h1, h2


def _teacher_probs(features: np.ndarray, W: np.ndarray, tau_t: float) -> np.ndarray:
    from .numeric import l2_normalize_cols as nlc, l2_normalize_rows as nlr, softmax_rows as nsm

    return nsm((nlr(features) @ nlc(W)) / tau_t)


def collect_teachers(batch: BatchViewPair, params: ModelParams, cfg: LossConfig):
    """Teacher probability arrays at the current point, for frozen-teacher evaluation."""
    f1, f2, h1, h2 = _np_forward(batch, params)
    return {
        "global": (_teacher_probs(f2, params.W, cfg.tau_t), _teacher_probs(f1, params.W, cfg.tau_t)),
        "part": (_teacher_probs(h2, params.W, cfg.tau_t), _teacher_probs(h1, params.W, cfg.tau_t)),
    }


def total_objective(
    batch: BatchViewPair,
    params: ModelParams,
    cfg: LossConfig,
    use_part_base: bool = True,
    use_pdr: bool = True,
    alpha: float | None = None,
    frozen_teachers: dict | None = None,
    with_grads: bool = True,
):
    """Full objective: global base loss plus alpha-weighted part branch and PDR.

    When alpha == 0 (or both part switches are off) the part branch is skipped
    entirely, so the result and gradients are bitwise those of the global-only
    objective. `frozen_teachers` (from collect_teachers) pins the
    self-distillation targets; the finite-difference oracle relies on it.
    Returns (value, per-term dict, gradient dict keyed by parameter group name).
    """
    cfg.validate()
    alpha = cfg.alpha if alpha is None else alpha
    p = params.as_tensors()
    f1 = _encode(Tensor(batch.cls_v1), p)
    f2 = _encode(Tensor(batch.cls_v2), p)
    teachers = frozen_teachers or {}
    loss, terms = _base_loss(f1, f2, batch.labels, p, cfg, teachers.get("global"))
    terms = {"global_" + k: v for k, v in terms.items()}
    use_parts = alpha > 0 and (use_part_base or use_pdr)
    if use_parts:
        v1, h_part1 = _part_enhanced(batch.patches_v1, batch.M_v1, p)
        v2, h_part2 = _part_enhanced(batch.patches_v2, batch.M_v2, p)
        part_sum = Tensor(0.0)
        if use_part_base:
            part_base, part_terms = _base_loss(h_part1, h_part2, batch.labels, p, cfg, teachers.get("part"))
            terms.update({"part_" + k: v for k, v in part_terms.items()})
            part_sum = part_sum + part_base
        if use_pdr:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                pdr = _pdr(v1, v2, batch.shared_parts, cfg.pdr_standard_infonce)
            terms["pdr"] = float(pdr.value)
            part_sum = part_sum + pdr
        loss = loss + alpha * part_sum
    terms["total"] = float(loss.value)
    if not with_grads:
        return float(loss.value), terms, None
    backward(loss)
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.value))
        for name, t in p.items()
    }
    return float(loss.value), terms, grads
