"""Central finite-difference verification of every analytic gradient.

The oracle perturbs a random subset of coordinates of each input (h = 1e-5,
64-bit) and compares against the tape's gradients. Self-distillation targets
are pinned with `collect_teachers` so the oracle matches stop-gradient
semantics. Exposed via `partdisc gradcheck`.
"""

from __future__ import annotations

import csv
import zlib

import numpy as np

from . import objectives as obj
from .objectives import BatchViewPair, LossConfig, ModelParams, Tensor

H = 1e-5
TOLERANCE = 1e-4
COORDS_PER_INPUT = 12


def central_diff(value_fn, array: np.ndarray, coords) -> np.ndarray:
    out = np.empty(len(coords))
    for t, idx in enumerate(coords):
        x = array.copy()
        x[idx] += H
        up = value_fn(x)
        x[idx] -= 2 * H
        down = value_fn(x)
        out[t] = (up - down) / (2 * H)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-10)
    return float(np.linalg.norm(analytic - numeric) / denom)


def _coords(rng, shape, count=COORDS_PER_INPUT):
    flat = rng.choice(np.prod(shape, dtype=int), size=min(count, int(np.prod(shape))), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def _check_inputs(rng, value_fn_of, analytic: dict[str, np.ndarray], arrays: dict[str, np.ndarray]) -> float:
    worst = 0.0
    for name, arr in arrays.items():
        coords = _coords(rng, arr.shape)
        numeric = central_diff(value_fn_of(name), arr, coords)
        a = np.array([analytic[name][c] for c in coords])
        worst = max(worst, rel_error(a, numeric))
    return worst


def _sub(arrays, name, x):
    out = dict(arrays)
    out[name] = x
    return out


def check_sup_cls(rng) -> float:
    B, d, C = 7, 5, 4
    feats = rng.normal(size=(B, d))
    W = rng.normal(size=(d, C))
    labels = rng.integers(0, C, size=B)
    labels[rng.integers(B)] = -1
    _, grads = obj.sup_cls_loss(feats, labels, W, tau_s=0.1)
    arrays = {"features": feats, "W": W}

    def fn(name):
        def value(x):
            a = _sub(arrays, name, x)
            return obj.sup_cls_loss(a["features"], labels, a["W"], tau_s=0.1)[0]

        return value

    return _check_inputs(rng, fn, grads, arrays)


def check_unsup_cls(rng) -> float:
    B, d, C = 6, 5, 4
    f1 = rng.normal(size=(B, d))
    f2 = rng.normal(size=(B, d))
    W = rng.normal(size=(d, C))
    tau_s, tau_t = 0.1, 0.05
    _, grads = obj.unsup_cls_loss(f1, f2, W, tau_s, tau_t, symmetric=True)
    # frozen-teacher evaluation for the oracle
    t12 = obj._teacher_probs(f2, W, tau_t)
    t21 = obj._teacher_probs(f1, W, tau_t)

    def value(f1x, f2x, Wx):
        loss = obj._unsup_cls(Tensor(f1x), Tensor(f2x), Tensor(Wx), tau_s, tau_t, True, (t12, t21))
        return float(loss.value)

    arrays = {"view1_features": f1, "view2_features": f2, "W": W}
    fn = lambda name: lambda x: value(
        _sub(arrays, name, x)["view1_features"], _sub(arrays, name, x)["view2_features"], _sub(arrays, name, x)["W"]
    )
    return _check_inputs(rng, fn, grads, arrays)


def check_mean_entropy(rng) -> float:
    n, C = 10, 6
    p = rng.dirichlet(np.ones(C), size=n)
    _, grads = obj.mean_entropy_reg(p, eps_me=1.3)
    arrays = {"view_predictions": p}
    fn = lambda name: lambda x: obj.mean_entropy_reg(x, eps_me=1.3)[0]
    return _check_inputs(rng, fn, grads, arrays)


def check_sup_rep(rng) -> float:
    B, d = 8, 5
    h1 = rng.normal(size=(B, d))
    h2 = rng.normal(size=(B, d))
    labels = rng.integers(0, 3, size=B)
    labels[rng.integers(B)] = -1
    _, grads = obj.sup_rep_loss(h1, h2, labels, tau_c=1.0)
    arrays = {"projected_v1": h1, "projected_v2": h2}
    fn = lambda name: lambda x: obj.sup_rep_loss(
        _sub(arrays, name, x)["projected_v1"], _sub(arrays, name, x)["projected_v2"], labels, tau_c=1.0
    )[0]
    return _check_inputs(rng, fn, grads, arrays)


def check_unsup_rep(rng) -> float:
    B, d = 7, 5
    h1 = rng.normal(size=(B, d))
    h2 = rng.normal(size=(B, d))
    _, grads = obj.unsup_rep_loss(h1, h2, tau_u=0.07)
    arrays = {"projected_v1": h1, "projected_v2": h2}
    fn = lambda name: lambda x: obj.unsup_rep_loss(
        _sub(arrays, name, x)["projected_v1"], _sub(arrays, name, x)["projected_v2"], tau_u=0.07
    )[0]
    return _check_inputs(rng, fn, grads, arrays)


def check_pdr(rng) -> float:
    B, K, d = 5, 4, 6
    v1 = rng.normal(size=(B, K, d))
    v2 = rng.normal(size=(B, K, d))
    shared = [set(rng.choice(K, size=rng.integers(2, K + 1), replace=False).tolist()) for _ in range(B)]
    _, grads = obj.pdr_loss(v1, v2, shared)
    arrays = {"part_features_v1": v1, "part_features_v2": v2}
    fn = lambda name: lambda x: obj.pdr_loss(
        _sub(arrays, name, x)["part_features_v1"], _sub(arrays, name, x)["part_features_v2"], shared
    )[0]
    return _check_inputs(rng, fn, grads, arrays)


def _random_batch(rng, B=6, N_p=5, K=3, d=6, C=4):
    M1 = rng.dirichlet(np.ones(K), size=(B, N_p))
    M2 = rng.dirichlet(np.ones(K), size=(B, N_p))
    labels = rng.integers(0, C, size=B)
    labels[rng.random(B) < 0.4] = -1
    shared = [set(rng.choice(K, size=rng.integers(2, K + 1), replace=False).tolist()) for _ in range(B)]
    return BatchViewPair(
        cls_v1=rng.normal(size=(B, d)),
        cls_v2=rng.normal(size=(B, d)),
        patches_v1=rng.normal(size=(B, N_p, d)),
        patches_v2=rng.normal(size=(B, N_p, d)),
        M_v1=M1,
        M_v2=M2,
        labels=labels,
        shared_parts=shared,
    )


def check_total_objective(rng) -> float:
    d, C, K = 6, 4, 3
    batch = _random_batch(rng, d=d, C=C, K=K)
    params = ModelParams.init(d=d, C=C, K=K, hidden=8, d_proj=5, seed=int(rng.integers(1 << 31)))
    cfg = LossConfig(alpha=1.5)
    teachers = obj.collect_teachers(batch, params, cfg)
    _, _, grads = obj.total_objective(batch, params, cfg, frozen_teachers=teachers)
    worst = 0.0
    for name in ModelParams.GROUPS:
        arr = getattr(params, name)
        coords = _coords(rng, arr.shape, count=4)

        def value_fn(x, name=name):
            import copy

            p2 = copy.deepcopy(params)
            setattr(p2, name, x)
            v, _, _ = obj.total_objective(batch, p2, cfg, frozen_teachers=teachers, with_grads=False)
            return v

        numeric = central_diff(value_fn, arr, coords)
        a = np.array([grads[name][c] for c in coords])
        worst = max(worst, rel_error(a, numeric))
    return worst


CHECKS = [
    ("sup_cls_loss", check_sup_cls),
    ("unsup_cls_loss", check_unsup_cls),
    ("mean_entropy_reg", check_mean_entropy),
    ("sup_rep_loss", check_sup_rep),
    ("unsup_rep_loss", check_unsup_rep),
    ("pdr_loss", check_pdr),
    ("total_objective", check_total_objective),
]


def run_suite(seed: int = 0, instances: int = 20) -> list[dict]:
    rows = []
    for name, check in CHECKS:
        for i in range(instances):
            rng = np.random.default_rng([seed, zlib.crc32(name.encode()), i])
            err = check(rng)
            rows.append({"loss": name, "instance": i, "rel_err": err, "passed": err < TOLERANCE})
    return rows


def write_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["loss", "instance", "rel_err", "passed"])
        writer.writeheader()
        writer.writerows(rows)
