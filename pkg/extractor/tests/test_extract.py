import filecmp
import warnings
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from partdisc.feature_store import load_dataset
from partdisc_extract.extract import (
    ExtractConfig,
    ExtractError,
    N_PATCHES,
    discover_images,
    extract,
    main,
)

BACKBONE = "vit-test-patch16-224"


def make_images(root: Path, layout: dict[str, int], size=(64, 48)) -> None:
    """Create `count` distinct RGB images per subfolder name ('' = root level)."""
    rng = np.random.default_rng(0)
    for folder, count in layout.items():
        target = root / folder if folder else root
        target.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            pixels = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
            Image.fromarray(pixels).save(target / f"img_{i}.png")


@pytest.fixture
def image_root(tmp_path):
    root = tmp_path / "images"
    make_images(root, {"cat": 2, "dog": 2})
    return root


def run_extract(root, out, **overrides):
    cfg = ExtractConfig(image_root=root, backbone=BACKBONE, out=out, **overrides)
    return extract(cfg)


class TestInterop:
    def test_loads_with_zero_warnings(self, image_root, tmp_path):
        out = tmp_path / "data.pgcd"
        run_extract(image_root, out)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            ds = load_dataset(out)
        assert caught == []
        assert len(ds) == 4

    def test_np_is_196_for_patch16(self, image_root, tmp_path):
        out = tmp_path / "data.pgcd"
        run_extract(image_root, out)
        ds = load_dataset(out)
        assert ds.meta.N_p == 196 == N_PATCHES
        for s in ds.samples:
            assert s.patches_fixed.shape == (196, ds.meta.d)
            assert s.patches_learnable.shape == (196, ds.meta.d)
            assert s.attention.shape == (196,)

    def test_roundtrip_bit_exact(self, image_root, tmp_path):
        out = tmp_path / "data.pgcd"
        run_extract(image_root, out)
        ds = load_dataset(out)
        resaved = tmp_path / "resaved.pgcd"
        from partdisc.feature_store import save_dataset

        save_dataset(ds, resaved)
        assert filecmp.cmp(out, resaved, shallow=False)
        assert Path(str(out) + ".manifest").read_bytes() == Path(str(resaved) + ".manifest").read_bytes()

    def test_deterministic(self, image_root, tmp_path):
        a, b = tmp_path / "a.pgcd", tmp_path / "b.pgcd"
        run_extract(image_root, a)
        run_extract(image_root, b)
        assert filecmp.cmp(a, b, shallow=False)

    def test_batch_size_does_not_change_output(self, image_root, tmp_path):
        a, b = tmp_path / "a.pgcd", tmp_path / "b.pgcd"
        run_extract(image_root, a, batch_size=1)
        run_extract(image_root, b, batch_size=4)
        dsa, dsb = load_dataset(a), load_dataset(b)
        for sa, sb in zip(dsa.samples, dsb.samples):
            np.testing.assert_allclose(sa.cls_fixed, sb.cls_fixed, atol=1e-5)

    def test_attention_nonnegative_finite(self, image_root, tmp_path):
        out = tmp_path / "data.pgcd"
        run_extract(image_root, out)
        for s in load_dataset(out).samples:
            assert np.all(np.isfinite(s.attention))
            assert np.all(s.attention >= 0)
            # post-softmax CLS row over CLS + 196 patches: patch mass < 1
            assert s.attention.sum() < 1.0 + 1e-5


class TestLabels:
    def test_labels_from_sorted_folder_names(self, image_root, tmp_path):
        out = tmp_path / "data.pgcd"
        run_extract(image_root, out)
        ds = load_dataset(out)
        assert ds.meta.C == 2
        assert ds.labels().tolist() == [0, 0, 1, 1]  # cat < dog lexicographically

    def test_flat_folder_unlabeled(self, tmp_path):
        root = tmp_path / "flat"
        make_images(root, {"": 3})
        out = tmp_path / "data.pgcd"
        run_extract(root, out)
        ds = load_dataset(out)
        assert all(s.label is None for s in ds.samples)
        assert ds.meta.labeled_ids == frozenset()

    def test_lexicographic_order_and_ids(self, image_root):
        images, class_names = discover_images(image_root)
        assert class_names == ["cat", "dog"]
        paths = [p for p, _ in images]
        assert paths == sorted(paths)


class TestErrors:
    def test_empty_folder_errors_no_file(self, tmp_path):
        root = tmp_path / "empty"
        root.mkdir()
        out = tmp_path / "data.pgcd"
        with pytest.raises(ExtractError):
            run_extract(root, out)
        assert not out.exists()

    def test_unreadable_image_skipped_with_note(self, image_root, tmp_path):
        (image_root / "cat" / "broken.png").write_bytes(b"not an image")
        out = tmp_path / "data.pgcd"
        skipped = run_extract(image_root, out)
        assert len(skipped) == 1 and "broken.png" in skipped[0]
        note = Path(str(out) + ".skipped.txt").read_text()
        assert "broken.png" in note
        assert len(load_dataset(out)) == 4

    def test_unknown_backbone(self, image_root, tmp_path):
        cfg = ExtractConfig(image_root=image_root, backbone="nope", out=tmp_path / "x.pgcd")
        with pytest.raises(ExtractError, match="unknown backbone"):
            extract(cfg)

    def test_missing_root(self, tmp_path):
        cfg = ExtractConfig(image_root=tmp_path / "nope", backbone=BACKBONE, out=tmp_path / "x.pgcd")
        with pytest.raises(ExtractError, match="not a directory"):
            extract(cfg)


class TestCli:
    def test_success_exit_zero(self, image_root, tmp_path, capsys):
        out = tmp_path / "data.pgcd"
        code = main(["--images", str(image_root), "--backbone", BACKBONE, "--out", str(out)])
        assert code == 0
        assert out.exists()
        assert "wrote" in capsys.readouterr().out

    def test_empty_folder_exit_two(self, tmp_path, capsys):
        root = tmp_path / "empty"
        root.mkdir()
        code = main(["--images", str(root), "--backbone", BACKBONE, "--out", str(tmp_path / "x.pgcd")])
        assert code == 2
        assert "error" in capsys.readouterr().err
