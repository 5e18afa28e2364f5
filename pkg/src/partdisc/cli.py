"""Command-line entry point exposing the whole pipeline.

Subcommands: gen-synth | sinkhorn | select | fit-gmm | train-toy | predict |
eval | gradcheck. Every subcommand takes --seed and --threads, and writes a
resolved-config JSON next to (or inside) its --out path so that any run is
reproducible from the stored config alone. Exit codes: 0 success, 1 usage
error, 2 data/validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import struct
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .candidates import (
    Prototypes,
    calibrate_prototypes,
    candidate_purity,
    compute_ns,
    select_candidates,
)
from .errors import FormatError, NumericalError, ValidationError
from .evaluation import clustering_acc
from .feature_store import AugmentConfig, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .numeric import l2_normalize_cols, l2_normalize_rows, softmax_rows
from .objectives import LossConfig, ModelParams
from .part_gmm import GmmConfig, GmmParams, filter_patches, fit_gmm, select_k
from .trainer import TrainConfig, TrainState, predict, train
from .transport import sinkhorn_adjust

GMM_MAGIC = b"PGMM"
GMM_VERSION = 1
STATE_VERSION = 1


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; this tool reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _write_config(out_path, command: str, args: argparse.Namespace) -> None:
    """Store the resolved flags + tool version beside (or inside) the output."""
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    payload = {"tool_version": __version__, "command": command, "resolved": resolved}
    out = Path(out_path)
    cfg_path = out / "config.json" if out.is_dir() else out.with_name(out.name + ".config.json")
    with open(cfg_path, "w") as fh:
        json.dump(payload, fh, indent=2, default=str)
        fh.write("\n")


# ---------------------------------------------------------------------------
# gen-synth
# ---------------------------------------------------------------------------


def _cmd_gen_synth(args) -> int:
    cfg = SynthConfig(
        C=args.classes,
        old_class_count=args.old,
        K_true=args.k_true,
        d=args.dim,
        N_p=args.patches,
        foreground_patch_count=args.fg,
        class_separation=args.class_sep,
        part_separation=args.part_sep,
        noise_sigma=args.noise,
        samples_per_class=args.per_class,
        seed=args.seed,
    )
    dataset = generate_synthetic(cfg)
    save_dataset(dataset, args.out)
    _write_config(args.out, "gen-synth", args)
    print(f"wrote {len(dataset)} samples (C={cfg.C}, d={cfg.d}, N_p={cfg.N_p}) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# sinkhorn
# ---------------------------------------------------------------------------


def _cmd_sinkhorn(args) -> int:
    P = np.loadtxt(args.infile, delimiter=",", ndmin=2)
    result = sinkhorn_adjust(P, max_iters=args.max_iters, tol=args.tol)
    np.savetxt(args.out, result.Q, delimiter=",")
    _write_config(args.out, "sinkhorn", args)
    print(
        f"sinkhorn: {result.iterations} iterations, violation {result.violation:.3e}, "
        f"converged={result.converged}"
    )
    return 0


# ---------------------------------------------------------------------------
# select
# ---------------------------------------------------------------------------


def _initial_prototypes(dataset, seed: int) -> Prototypes:
    """Labeled class means for old classes, random unit directions for the rest."""
    meta = dataset.meta
    rng = np.random.default_rng([seed, 29])
    W = rng.normal(size=(meta.d, meta.C))
    for c in sorted(meta.old_classes):
        rows = [s.cls_fixed for s in dataset.samples if s.id in meta.labeled_ids and s.label == c]
        if rows:
            W[:, c] = l2_normalize_rows(np.stack(rows).astype(np.float64)).mean(axis=0)
    return Prototypes(W=l2_normalize_cols(W))


def _cmd_select(args) -> int:
    dataset = load_dataset(args.features)
    meta = dataset.meta
    if args.proto:
        W = np.load(args.proto)
        if W.shape != (meta.d, meta.C):
            raise ValidationError(f"prototype shape {W.shape}, expected ({meta.d}, {meta.C})")
        proto = Prototypes(W=l2_normalize_cols(W.astype(np.float64)))
    else:
        proto = _initial_prototypes(dataset, args.seed)
    cls_norm = l2_normalize_rows(dataset.cls_matrix().astype(np.float64))
    P = softmax_rows(cls_norm @ proto.W / args.tau)
    Q = sinkhorn_adjust(P).Q
    labeled = len(meta.labeled_ids)
    old = max(len(meta.old_classes), 1)
    W_tilde = calibrate_prototypes(Q, cls_norm, proto, fallback_count=max(1, labeled // old))
    N_s = compute_ns(args.gamma, labeled, old)
    sample_ids = np.array([s.id for s in dataset.samples])
    cands = select_candidates(W_tilde, cls_norm, meta, N_s, sample_ids, dataset.labels())
    payload = {"N_s": cands.N_s, "classes": {str(c): ids for c, ids in cands.by_class.items()}}
    truth = {s.id: s.label for s in dataset.samples if s.label is not None}
    if truth:
        per_class, mean_new = candidate_purity(cands, truth, meta)
        payload["purity"] = {str(c): p for c, p in per_class.items()}
        payload["mean_new_purity"] = mean_new
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    _write_config(args.out, "select", args)
    print(f"selected N_s={cands.N_s} candidates per new class -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# fit-gmm
# ---------------------------------------------------------------------------


def save_gmms(gmms: dict[int, GmmParams], C: int, d: int, path) -> None:
    """Binary mixture bundle: per class K (0 = absent), weights, means, variances."""
    with open(path, "wb") as fh:
        fh.write(GMM_MAGIC + struct.pack("<III", GMM_VERSION, C, d))
        for c in range(C):
            g = gmms.get(c)
            if g is None:
                fh.write(struct.pack("<I", 0))
                continue
            fh.write(struct.pack("<I", g.K))
            fh.write(np.ascontiguousarray(g.weights, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(g.means, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(g.variances, dtype="<f4").tobytes())


def load_gmms(path) -> dict[int, GmmParams]:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != GMM_MAGIC:
            raise ValidationError(f"{path}: not a PGMM mixture bundle")
        version, C, d = struct.unpack("<III", head[4:16])
        if version != GMM_VERSION:
            raise ValidationError(f"{path}: mixture version {version}, expected {GMM_VERSION}")
        gmms = {}
        for c in range(C):
            (K,) = struct.unpack("<I", fh.read(4))
            if K == 0:
                continue
            vals = np.frombuffer(fh.read(4 * K * (1 + 2 * d)), dtype="<f4").astype(np.float64)
            gmms[c] = GmmParams(
                K=K,
                weights=vals[:K] / vals[:K].sum(),
                means=vals[K : K + K * d].reshape(K, d),
                variances=vals[K + K * d :].reshape(K, d),
            )
    return gmms


def _cmd_fit_gmm(args) -> int:
    dataset = load_dataset(args.features)
    meta = dataset.meta
    with open(args.candidates) as fh:
        cand_classes = json.load(fh)["classes"]
    by_id = {s.id: s for s in dataset.samples}
    pools = {}
    for c in range(meta.C):
        pts = []
        for sid in cand_classes.get(str(c), []):
            s = by_id[sid]
            pts.append(s.patches_fixed[filter_patches(s)].astype(np.float64))
        pools[c] = np.concatenate(pts) if pts else np.empty((0, meta.d))
    if args.k == "auto":
        K = select_k([pools[c] for c in sorted(meta.old_classes)], (args.k_min, args.k_max), seed=args.seed)
        print(f"selected K={K} by silhouette")
    else:
        K = int(args.k)
    gmms = {}
    for c in range(meta.C):
        points = pools[c]
        k_fit = min(K, len(points))
        if k_fit < 1:
            print(f"class {c}: no candidate patches; skipped", file=sys.stderr)
            continue
        cfg = GmmConfig(seed=args.seed * 1_000_003 + c)
        gmms[c] = fit_gmm(points, k_fit, cfg).params
    save_gmms(gmms, meta.C, meta.d, args.out)
    _write_config(args.out, "fit-gmm", args)
    print(f"fitted {len(gmms)} mixtures (K={K}) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train-toy
# ---------------------------------------------------------------------------


def _load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _train_config_from_toml(doc: dict, seed_override: int | None) -> TrainConfig:
    loss = LossConfig(**doc.get("loss", {}))
    augment = AugmentConfig(**doc.get("augment", {}))
    gmm = GmmConfig(**doc.get("gmm", {}))
    train_doc = dict(doc.get("train", {}))
    if "k_range" in train_doc:
        train_doc["k_range"] = tuple(train_doc["k_range"])
    cfg = TrainConfig(loss=loss, augment=augment, gmm=gmm, **train_doc)
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def save_state(state: TrainState, path) -> None:
    arrays = {name: getattr(state.params, name) for name in ModelParams.GROUPS}
    for c, g in state.gmms.items():
        arrays[f"gmm{c}_w"] = g.weights
        arrays[f"gmm{c}_mu"] = g.means
        arrays[f"gmm{c}_var"] = g.variances
    np.savez(
        path,
        state_version=STATE_VERSION,
        K=state.K,
        epoch=state.epoch,
        alpha=state.loss_cfg.alpha,
        tau_s=state.loss_cfg.tau_s,
        **arrays,
    )


def load_state(path) -> TrainState:
    with np.load(path) as data:
        if int(data["state_version"]) != STATE_VERSION:
            raise ValidationError(f"{path}: state version {int(data['state_version'])}, expected {STATE_VERSION}")
        params = ModelParams(**{name: data[name] for name in ModelParams.GROUPS})
        gmms = {}
        for key in data.files:
            if key.startswith("gmm") and key.endswith("_w"):
                c = int(key[3:-2])
                w = data[f"gmm{c}_w"]
                gmms[c] = GmmParams(K=len(w), weights=w, means=data[f"gmm{c}_mu"], variances=data[f"gmm{c}_var"])
        loss_cfg = LossConfig(alpha=float(data["alpha"]), tau_s=float(data["tau_s"]))
        return TrainState(
            params=params,
            K=int(data["K"]),
            gmms=gmms,
            epoch=int(data["epoch"]),
            loss_cfg=loss_cfg,
        )


def _cmd_train_toy(args) -> int:
    doc = _load_toml(args.config)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = _train_config_from_toml(doc, args.seed)
    data_doc = doc.get("data", {})
    if "path" in data_doc:
        dataset = load_dataset(data_doc["path"])
    else:
        synth = SynthConfig(**data_doc)
        dataset = generate_synthetic(synth)
    state, metrics = train(dataset, cfg)
    fields = sorted({k for row in metrics for k in row})
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, restval="")
        writer.writeheader()
        writer.writerows(metrics)
    save_state(state, run_dir / "state.npz")
    resolved = {"tool_version": __version__, "command": "train-toy", "seed": cfg.seed, "config": doc}
    with open(run_dir / "config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, default=str)
        fh.write("\n")
    last = metrics[-1] if metrics else {}
    print(
        f"trained {cfg.epochs} epochs; final All/Old/New ACC = "
        f"{last.get('acc_all', float('nan')):.3f}/{last.get('acc_old', float('nan')):.3f}/"
        f"{last.get('acc_new', float('nan')):.3f} -> {run_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# predict / eval
# ---------------------------------------------------------------------------


def _cmd_predict(args) -> int:
    dataset = load_dataset(args.features)
    state = load_state(args.state)
    combine = {"auto": None, "on": True, "off": False}[args.combine]
    preds = predict(state, dataset, combine=combine)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "pred"])
        for s, p in zip(dataset.samples, preds):
            writer.writerow([s.id, int(p)])
    _write_config(args.out, "predict", args)
    print(f"wrote {len(preds)} predictions -> {args.out}")
    return 0


def _read_label_column(path) -> np.ndarray:
    """Last column of a CSV, skipping a non-numeric header row if present."""
    values = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                values.append(int(float(row[-1])))
            except ValueError:
                if values:
                    raise ValidationError(f"{path}: non-numeric value {row[-1]!r}")
    return np.array(values, dtype=int)


def _cmd_eval(args) -> int:
    preds = _read_label_column(args.pred)
    labels = _read_label_column(args.labels)
    if len(preds) != len(labels):
        raise ValidationError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    with open(args.old_classes) as fh:
        old = {int(tok) for line in fh for tok in line.replace(",", " ").split()}
    report = clustering_acc(preds, labels, old)
    print(f"All-ACC {report.all:.4f}  Old-ACC {report.old:.4f}  New-ACC {report.new:.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["all", "old", "new", "permutation"])
            writer.writerow([report.all, report.old, report.new, " ".join(map(str, report.permutation))])
        _write_config(args.out, "eval", args)
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def _cmd_gradcheck(args) -> int:
    from . import gradcheck

    rows = gradcheck.run_suite(seed=args.seed, instances=args.instances)
    if args.out:
        gradcheck.write_csv(rows, args.out)
        _write_config(args.out, "gradcheck", args)
    by_loss: dict[str, list] = {}
    for r in rows:
        by_loss.setdefault(r["loss"], []).append(r)
    all_ok = True
    for name, group in by_loss.items():
        worst = max(r["rel_err"] for r in group)
        ok = all(r["passed"] for r in group)
        all_ok &= ok
        print(f"{name:<20} instances={len(group):<3} worst_rel_err={worst:.3e}  {'PASS' if ok else 'FAIL'}")
    if not all_ok:
        raise NumericalError("finite-difference check failed")
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="partdisc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"partdisc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    default_threads = int(os.environ.get("PARTDISC_THREADS", "1"))

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=default_threads)

    p = sub.add_parser("gen-synth", help="generate a synthetic feature container")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--old", type=int, default=5)
    p.add_argument("--k-true", type=int, default=4)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--patches", type=int, default=12)
    p.add_argument("--fg", type=int, default=8)
    p.add_argument("--class-sep", type=float, default=1.0)
    p.add_argument("--part-sep", type=float, default=4.0)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--per-class", type=int, default=30)
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("sinkhorn", help="balance a prediction matrix from CSV")
    common(p)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=_cmd_sinkhorn)

    p = sub.add_parser("select", help="calibrated-prototype candidate selection")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--proto", help="prototype matrix (.npy, d x C); default: labeled means + random")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("fit-gmm", help="per-class part mixtures from candidate sets")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--k", default="auto", help="'auto' (silhouette) or an integer")
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit_gmm)

    p = sub.add_parser("train-toy", help="run the toy training loop")
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=default_threads)
    p.set_defaults(func=_cmd_train_toy)

    p = sub.add_parser("predict", help="class assignments from a trained state")
    common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--combine", choices=("auto", "on", "off"), default="auto")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="Hungarian-matching clustering accuracy")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--old-classes", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    common(p)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--out", default=None, help="CSV report path")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValidationError, FormatError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"partdisc {args.command}: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        print(f"partdisc {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
