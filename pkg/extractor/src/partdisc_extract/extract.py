"""Run a ViT over an image folder and write a PGCD feature container.

Per sample the container receives:
  - cls               final-block CLS token
  - patches_fixed     penultimate-block patch tokens
  - patches_learnable final-block patch tokens
  - attention         last-block CLS-to-patch attention row, post-softmax,
                      averaged over heads

Labels are inferred from immediate subdirectory names when the images live in
subfolders (sorted names -> class indices 0..C-1); images directly under the
root are unlabeled (-1). Samples are written in lexicographic path order with
ids 0..n-1. Unreadable images are skipped and noted in "<out>.skipped.txt".

Backbone weights are randomly initialized from a fixed seed: this tool's
contract is the container format and tensor geometry, not feature quality;
a pretrained checkpoint can be substituted by loading weights into the same
architecture.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import Record, write_container

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".gif", ".tiff", ".webp"}

# All patch-16 at 224x224 -> 14x14 = 196 patch tokens.
# name: (hidden_size, num_layers, num_heads, intermediate_size)
BACKBONES = {
    "vit-base-patch16-224": (768, 12, 12, 3072),
    "vit-small-patch16-224": (384, 12, 6, 1536),
    "vit-tiny-patch16-224": (192, 12, 3, 768),
    # deliberately tiny architecture so tests run in seconds
    "vit-test-patch16-224": (32, 2, 2, 64),
}
IMAGE_SIZE = 224
PATCH_SIZE = 16
N_PATCHES = (IMAGE_SIZE // PATCH_SIZE) ** 2  # 196


class ExtractError(Exception):
    pass


@dataclass
class ExtractConfig:
    image_root: Path
    backbone: str
    out: Path
    batch_size: int = 8
    device: str = "cpu"
    seed: int = 0

    def validate(self):
        if self.backbone not in BACKBONES:
            known = ", ".join(sorted(BACKBONES))
            raise ExtractError(f"unknown backbone {self.backbone!r} (available: {known})")
        if self.batch_size < 1:
            raise ExtractError("batch size must be >= 1")
        if not self.image_root.is_dir():
            raise ExtractError(f"image root {self.image_root} is not a directory")


def discover_images(root: Path) -> tuple[list[tuple[Path, int]], list[str]]:
    """Return (path, label) in lexicographic path order plus sorted class names.

    Label -1 for images directly under the root; otherwise the index of the
    image's first-level subdirectory in the sorted list of such directories.
    """
    paths = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    class_names = sorted({p.relative_to(root).parts[0] for p in paths if len(p.relative_to(root).parts) > 1})
    name_to_idx = {name: i for i, name in enumerate(class_names)}
    labeled = []
    for p in paths:
        parts = p.relative_to(root).parts
        labeled.append((p, name_to_idx[parts[0]] if len(parts) > 1 else -1))
    return labeled, class_names


def load_image(path: Path) -> np.ndarray:
    """Decode to a (3, 224, 224) float32 array normalized to mean 0.5, std 0.5."""
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB").resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return ((arr - 0.5) / 0.5).transpose(2, 0, 1)


def build_model(backbone: str, seed: int, device: str):
    import torch
    from transformers import ViTConfig, ViTModel

    hidden, layers, heads, intermediate = BACKBONES[backbone]
    config = ViTConfig(
        hidden_size=hidden,
        num_hidden_layers=layers,
        num_attention_heads=heads,
        intermediate_size=intermediate,
        image_size=IMAGE_SIZE,
        patch_size=PATCH_SIZE,
        # the fused attention kernels do not expose attention weights
        attn_implementation="eager",
    )
    torch.manual_seed(seed)
    model = ViTModel(config, add_pooling_layer=False)
    model.eval()
    return model.to(device)


def extract(cfg: ExtractConfig) -> list[str]:
    """Run the extraction and write the container; returns skipped-file notes."""
    import torch

    cfg.validate()
    images, class_names = discover_images(cfg.image_root)
    skipped: list[str] = []
    usable: list[tuple[Path, int]] = []
    for path, label in images:
        try:
            load_image(path)
        except Exception as exc:  # noqa: BLE001 - any decode failure means skip
            skipped.append(f"{path}: {exc}")
        else:
            usable.append((path, label))
    if not usable:
        raise ExtractError(f"no usable images under {cfg.image_root}")

    model = build_model(cfg.backbone, cfg.seed, cfg.device)
    records: list[Record] = []
    with torch.no_grad():
        for start in range(0, len(usable), cfg.batch_size):
            chunk = usable[start : start + cfg.batch_size]
            batch = torch.from_numpy(np.stack([load_image(p) for p, _ in chunk])).to(cfg.device)
            out = model(pixel_values=batch, output_hidden_states=True, output_attentions=True)
            cls = out.hidden_states[-1][:, 0]
            patches_learnable = out.hidden_states[-1][:, 1:]
            patches_fixed = out.hidden_states[-2][:, 1:]
            attention = out.attentions[-1][:, :, 0, 1:].mean(dim=1)
            for j, (path, label) in enumerate(chunk):
                records.append(
                    Record(
                        id=start + j,
                        label=label,
                        cls=cls[j].cpu().numpy(),
                        patches_fixed=patches_fixed[j].cpu().numpy(),
                        patches_learnable=patches_learnable[j].cpu().numpy(),
                        attention=attention[j].cpu().numpy(),
                    )
                )

    d = BACKBONES[cfg.backbone][0]
    C = max(len(class_names), 1)
    write_container(records, C=C, d=d, N_p=N_PATCHES, path=cfg.out)
    if skipped:
        Path(str(cfg.out) + ".skipped.txt").write_text("".join(line + "\n" for line in skipped))
    return skipped


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="partdisc-extract",
        description="Extract ViT features from an image folder into a PGCD container.",
    )
    parser.add_argument("--images", required=True, type=Path, help="image folder (subfolders = class labels)")
    parser.add_argument("--backbone", default="vit-base-patch16-224", choices=sorted(BACKBONES))
    parser.add_argument("--out", required=True, type=Path, help="output container path")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--seed", type=int, default=0, help="backbone weight-initialization seed")
    args = parser.parse_args(argv)
    cfg = ExtractConfig(
        image_root=args.images,
        backbone=args.backbone,
        out=args.out,
        batch_size=args.batch_size,
        device=args.device,
        seed=args.seed,
    )
    try:
        skipped = extract(cfg)
    except ExtractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for line in skipped:
        print(f"skipped {line}", file=sys.stderr)
    print(f"wrote {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
