"""Independent writer for the PGCD feature container.

Deliberately re-implements the on-disk layout instead of importing the
consumer package: the two tools interoperate only through this byte format,
and an independent writer keeps the contract honest.

Layout (little-endian):
  header, 32 bytes: b"PGCD" | u32 version=1 | u32 n | u32 C | u32 d |
                    u32 N_p | u8 flags (bit0: learnable patches present) |
                    zero padding
  per record:       u64 id | i32 label (-1 = unlabeled) |
                    f32[d] cls | f32[N_p*d] patches_fixed |
                    f32[N_p*d] patches_learnable | f32[N_p] attention
A sidecar "<path>.manifest" holds one "id,label,is_labeled" line per record.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"PGCD"
FORMAT_VERSION = 1
HEADER_SIZE = 32


@dataclass
class Record:
    id: int
    label: int  # -1 = unlabeled
    cls: np.ndarray  # (d,) float32
    patches_fixed: np.ndarray  # (N_p, d) float32
    patches_learnable: np.ndarray  # (N_p, d) float32
    attention: np.ndarray  # (N_p,) float32, >= 0


def write_container(records: list[Record], C: int, d: int, N_p: int, path) -> None:
    for r in records:
        for name in ("cls", "patches_fixed", "patches_learnable", "attention"):
            arr = getattr(r, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"record {r.id}: non-finite values in {name}")
        if np.any(r.attention < 0):
            raise ValueError(f"record {r.id}: negative attention")
        if r.cls.shape != (d,) or r.patches_fixed.shape != (N_p, d):
            raise ValueError(f"record {r.id}: shape mismatch against (d={d}, N_p={N_p})")
    header = MAGIC + struct.pack("<IIIIIB", FORMAT_VERSION, len(records), C, d, N_p, 1)
    header += b"\x00" * (HEADER_SIZE - len(header))
    with open(path, "wb") as fh:
        fh.write(header)
        for r in records:
            fh.write(struct.pack("<Qi", r.id, r.label))
            fh.write(np.ascontiguousarray(r.cls, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(r.patches_fixed, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(r.patches_learnable, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(r.attention, dtype="<f4").tobytes())
    with open(str(path) + ".manifest", "w") as fh:
        for r in records:
            fh.write(f"{r.id},{r.label},{int(r.label >= 0)}\n")
