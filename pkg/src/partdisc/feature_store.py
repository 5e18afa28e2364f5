"""Feature container data model, binary on-disk format, and synthetic data generation.

The container keeps, per sample, a global CLS feature, two patch-feature
matrices (fixed = pre-final-block, learnable = final-block / encoder output)
and a per-patch attention vector. Everything is float32 so that save/load
round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BadMagicError,
    NumericalError,
    TruncatedRecordError,
    ValidationError,
    VersionMismatchError,
)

MAGIC = b"PGCD"
FORMAT_VERSION = 1
HEADER_SIZE = 32  # magic + 5*u32 + flags byte, padded with reserved zeros
_U32_MAX = 2**32 - 1


@dataclass
class Sample:
    id: int
    label: int | None  # None = unlabeled on disk (-1)
    cls_fixed: np.ndarray  # (d,)
    patches_fixed: np.ndarray  # (N_p, d)
    patches_learnable: np.ndarray  # (N_p, d)
    attention: np.ndarray  # (N_p,), entries >= 0


@dataclass
class DatasetMeta:
    C: int
    old_classes: frozenset[int]
    labeled_ids: frozenset[int]
    d: int
    N_p: int


class FeatureDataset:
    def __init__(self, samples: list[Sample], meta: DatasetMeta):
        self.samples = samples
        self.meta = meta

    def __len__(self):
        return len(self.samples)

    def validate(self):
        meta = self.meta
        for s in self.samples:
            if s.cls_fixed.shape != (meta.d,):
                raise ValidationError(f"sample {s.id}: cls_fixed shape {s.cls_fixed.shape}")
            if s.patches_fixed.shape != (meta.N_p, meta.d):
                raise ValidationError(f"sample {s.id}: patches_fixed shape {s.patches_fixed.shape}")
            if s.patches_learnable.shape != (meta.N_p, meta.d):
                raise ValidationError(f"sample {s.id}: patches_learnable shape {s.patches_learnable.shape}")
            if s.attention.shape != (meta.N_p,):
                raise ValidationError(f"sample {s.id}: attention shape {s.attention.shape}")
            for name in ("cls_fixed", "patches_fixed", "patches_learnable", "attention"):
                if not np.all(np.isfinite(getattr(s, name))):
                    raise ValidationError(f"sample {s.id}: non-finite values in {name}")
            if np.any(s.attention < 0):
                raise ValidationError(f"sample {s.id}: negative attention")
            if s.label is not None and not (0 <= s.label < meta.C):
                raise ValidationError(f"sample {s.id}: label {s.label} outside [0, {meta.C})")
        for sid in meta.labeled_ids:
            s = self._by_id(sid)
            if s.label is None or s.label not in meta.old_classes:
                raise ValidationError(f"labeled sample {sid} lacks an old-class label")

    def _by_id(self, sid):
        for s in self.samples:
            if s.id == sid:
                return s
        raise ValidationError(f"unknown sample id {sid}")

    # Convenience views used throughout the pipeline.
    def cls_matrix(self) -> np.ndarray:
        return np.stack([s.cls_fixed for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([-1 if s.label is None else s.label for s in self.samples])

    def labeled_mask(self) -> np.ndarray:
        return np.array([s.id in self.meta.labeled_ids for s in self.samples])


@dataclass
class SynthConfig:
    C: int
    old_class_count: int
    K_true: int
    d: int
    N_p: int
    foreground_patch_count: int
    class_separation: float
    part_separation: float
    noise_sigma: float
    samples_per_class: int
    seed: int
    # classes come in look-alike groups sharing a CLS-level center, so only
    # their part layouts tell them apart (1 = every class fully distinct)
    group_size: int = 1
    # fraction of the first part's offset leaked into the class's CLS offset:
    # a distinctive part weakly tints the global feature, coupling the CLS
    # signal to the part geometry
    cls_part_leak: float = 0.0

    def validate(self):
        if self.K_true < 1:
            raise ValidationError("K_true must be >= 1")
        if self.group_size < 1:
            raise ValidationError("group_size must be >= 1")
        if self.foreground_patch_count > self.N_p:
            raise ValidationError("foreground_patch_count exceeds N_p")
        if self.class_separation <= 0 or self.part_separation <= 0:
            raise ValidationError("separations must be > 0")
        if self.old_class_count > self.C:
            raise ValidationError("old_class_count exceeds C")


@dataclass
class AugmentConfig:
    sigma_aug: float = 0.05
    p_drop: float = 0.25


def save_dataset(dataset: FeatureDataset, path) -> None:
    dataset.validate()
    meta = dataset.meta
    n = len(dataset.samples)
    for value, name in ((n, "sample_count"), (meta.C, "C"), (meta.d, "d"), (meta.N_p, "N_p")):
        if value > _U32_MAX:
            raise ValidationError(f"{name} overflows u32 header field")
    flags = 1  # bit0: patches_learnable present (always written by this library)
    header = MAGIC + struct.pack("<IIIIIB", FORMAT_VERSION, n, meta.C, meta.d, meta.N_p, flags)
    header += b"\x00" * (HEADER_SIZE - len(header))
    with open(path, "wb") as fh:
        fh.write(header)
        for s in dataset.samples:
            label = -1 if s.label is None else s.label
            fh.write(struct.pack("<Qi", s.id, label))
            fh.write(np.ascontiguousarray(s.cls_fixed, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.patches_fixed, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.patches_learnable, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(s.attention, dtype="<f4").tobytes())
    with open(str(path) + ".manifest", "w") as fh:
        for s in dataset.samples:
            label = -1 if s.label is None else s.label
            fh.write(f"{s.id},{label},{int(s.id in meta.labeled_ids)}\n")


def load_dataset(path) -> FeatureDataset:
    with open(path, "rb") as fh:
        header = fh.read(HEADER_SIZE)
        if len(header) < HEADER_SIZE or header[:4] != MAGIC:
            raise BadMagicError(f"{path}: not a PGCD container")
        version, n, C, d, N_p, flags = struct.unpack("<IIIIIB", header[4:25])
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"{path}: version {version}, expected {FORMAT_VERSION}")
        has_learnable = bool(flags & 1)
        floats = d + N_p * d * (2 if has_learnable else 1) + N_p
        record_size = 8 + 4 + 4 * floats
        samples = []
        for i in range(n):
            buf = fh.read(record_size)
            if len(buf) < record_size:
                raise TruncatedRecordError(i)
            sid, label = struct.unpack_from("<Qi", buf, 0)
            vals = np.frombuffer(buf, dtype="<f4", count=floats, offset=12)
            off = 0
            cls_fixed = vals[off : off + d].copy()
            off += d
            patches_fixed = vals[off : off + N_p * d].reshape(N_p, d).copy()
            off += N_p * d
            if has_learnable:
                patches_learnable = vals[off : off + N_p * d].reshape(N_p, d).copy()
                off += N_p * d
            else:
                patches_learnable = patches_fixed.copy()
            attention = vals[off : off + N_p].copy()
            samples.append(
                Sample(
                    id=sid,
                    label=None if label == -1 else label,
                    cls_fixed=cls_fixed,
                    patches_fixed=patches_fixed,
                    patches_learnable=patches_learnable,
                    attention=attention,
                )
            )
    labeled_ids = _read_manifest_labeled_ids(str(path) + ".manifest")
    if labeled_ids is None:
        labeled_ids = frozenset(s.id for s in samples if s.label is not None)
    by_id = {s.id: s for s in samples}
    old_classes = frozenset(by_id[i].label for i in labeled_ids if by_id[i].label is not None)
    ds = FeatureDataset(samples, DatasetMeta(C=C, old_classes=old_classes, labeled_ids=frozenset(labeled_ids), d=d, N_p=N_p))
    ds.validate()
    return ds


def _read_manifest_labeled_ids(manifest_path):
    try:
        with open(manifest_path) as fh:
            ids = set()
            for line in fh:
                sid, _label, is_labeled = line.strip().split(",")
                if int(is_labeled):
                    ids.add(int(sid))
            return ids
    except OSError:
        return None


def _draw_part_offsets(rng, K, d, part_separation):
    """Zero-mean part-center offsets with pairwise distance >= part_separation."""
    if K == 1:
        return np.zeros((1, d))
    scale = part_separation
    for _ in range(200):
        pts = rng.normal(scale=scale, size=(K, d))
        dists = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        if dists.min() >= part_separation:
            return pts - pts.mean(axis=0)
        scale *= 1.2
    raise NumericalError(f"cannot place {K} part centers at separation {part_separation} in dimension {d}")


def generate_synthetic(cfg: SynthConfig) -> FeatureDataset:
    """Draw a fine-grained dataset of per-class part Gaussians plus shared background.

    Foreground patches of a sample are drawn from its class's part centers
    (round-robin over parts, so every part is present), background patches
    from one background Gaussian shared by all classes. Attention is a high
    constant exactly on foreground patches. Half of each old class is labeled.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    bg_center = rng.normal(scale=1.0, size=cfg.d)
    groups = -(-cfg.C // cfg.group_size)  # ceil
    group_centers = rng.normal(scale=cfg.class_separation, size=(groups, cfg.d))
    group_offsets = rng.normal(scale=cfg.class_separation, size=(groups, cfg.d))
    class_centers = np.repeat(group_centers, cfg.group_size, axis=0)[: cfg.C]
    cls_offsets = np.repeat(group_offsets, cfg.group_size, axis=0)[: cfg.C]
    part_centers = np.stack(
        [class_centers[c] + _draw_part_offsets(rng, cfg.K_true, cfg.d, cfg.part_separation) for c in range(cfg.C)]
    )  # (C, K_true, d)
    if cfg.cls_part_leak:
        cls_offsets = cls_offsets + cfg.cls_part_leak * (part_centers[:, 0, :] - class_centers)

    fg = cfg.foreground_patch_count
    samples = []
    labeled_ids = set()
    sid = 0
    for c in range(cfg.C):
        labeled_flags = np.zeros(cfg.samples_per_class, dtype=bool)
        if c < cfg.old_class_count:
            picked = rng.choice(cfg.samples_per_class, size=cfg.samples_per_class // 2, replace=False)
            labeled_flags[picked] = True
        for t in range(cfg.samples_per_class):
            perm = rng.permutation(cfg.N_p)
            fg_positions = perm[:fg]
            patches = np.empty((cfg.N_p, cfg.d))
            attention = np.zeros(cfg.N_p)
            for rank, j in enumerate(fg_positions):
                part = rank % cfg.K_true
                patches[j] = part_centers[c, part] + rng.normal(scale=cfg.noise_sigma, size=cfg.d)
                attention[j] = 1.0
            for j in perm[fg:]:
                patches[j] = bg_center + rng.normal(scale=cfg.noise_sigma, size=cfg.d)
            cls_fixed = patches[fg_positions].mean(axis=0) + cls_offsets[c]
            patches32 = patches.astype(np.float32)
            samples.append(
                Sample(
                    id=sid,
                    label=c,
                    cls_fixed=cls_fixed.astype(np.float32),
                    patches_fixed=patches32,
                    patches_learnable=patches32.copy(),
                    attention=attention.astype(np.float32),
                )
            )
            if labeled_flags[t]:
                labeled_ids.add(sid)
            sid += 1
    meta = DatasetMeta(
        C=cfg.C,
        old_classes=frozenset(range(cfg.old_class_count)),
        labeled_ids=frozenset(labeled_ids),
        d=cfg.d,
        N_p=cfg.N_p,
    )
    ds = FeatureDataset(samples, meta)
    ds.validate()
    return ds


def augment_view(sample: Sample, seed: int, cfg: AugmentConfig | None = None) -> Sample:
    """Second view of a sample: feature jitter plus random foreground-attention drop."""
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    jitter = lambda a: (a + cfg.sigma_aug * rng.standard_normal(a.shape)).astype(a.dtype)
    cls_fixed = jitter(sample.cls_fixed)
    patches_fixed = jitter(sample.patches_fixed)
    patches_learnable = jitter(sample.patches_learnable)
    attention = sample.attention.copy()
    fg_mask = sample.attention >= sample.attention.mean()
    drop = rng.random(attention.shape) < cfg.p_drop
    attention[fg_mask & drop] = 0.0
    return replace(
        sample,
        cls_fixed=cls_fixed,
        patches_fixed=patches_fixed,
        patches_learnable=patches_learnable,
        attention=attention,
    )
