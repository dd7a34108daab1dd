# Tests for image I/O, quantization and directory pairing
import pytest
import numpy as np
import sys
import os
from PIL import Image

# Add the parent directory to the path to import auif modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from auif.core.dataset import (
    get_quantization_stats,
    image_size,
    load_gray,
    pair_directories,
    quantize,
    save_gray,
)
from auif.core.errors import DatasetError, ImageIOError, InvalidInputError


@pytest.fixture(autouse=True)
def reset_stats():
    get_quantization_stats().reset()
    yield
    get_quantization_stats().reset()


def make_pair_dirs(tmp_path, stems, shape=(20, 24)):
    ir_dir, vis_dir = tmp_path / "ir", tmp_path / "vis"
    ir_dir.mkdir(exist_ok=True)
    vis_dir.mkdir(exist_ok=True)
    for k, stem in enumerate(stems):
        Image.fromarray(np.full(shape, 10 * k, dtype=np.uint8)).save(ir_dir / f"{stem}.png")
        Image.fromarray(np.full(shape, 10 * k + 5, dtype=np.uint8)).save(vis_dir / f"{stem}.bmp")
    return ir_dir, vis_dir


# --- load / save ---

def test_save_then_load_exact_levels(tmp_path):
    img = (np.arange(256).reshape(16, 16)) / 255.0
    path = save_gray(img, tmp_path / "levels.png")
    np.testing.assert_allclose(load_gray(path), img, atol=1e-12)
    assert image_size(path) == (16, 16)


def test_quantize_rounds_half_up():
    data, clamped = quantize(np.array([[0.0, 0.5, 1.0]]))
    np.testing.assert_array_equal(data, [[0, 128, 255]])
    assert clamped == 0
    with pytest.raises(InvalidInputError):
        quantize(np.array([[np.nan]]))


def test_save_gray_counts_clamped_pixels(tmp_path):
    save_gray(np.array([[-0.2, 0.5], [1.3, 0.9]]), tmp_path / "clamped.png")
    stats = get_quantization_stats()
    assert stats.clamped_pixels == 2
    assert stats.clamped_images == 1
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "clamped.png")), [[0, 128], [255, 230]])


def test_save_gray_accepts_batch_layout(tmp_path):
    path = save_gray(np.full((1, 1, 4, 5), 0.2), tmp_path / "b.png")
    assert image_size(path) == (4, 5)


def test_save_gray_rejects_lossy_and_bad_shape(tmp_path):
    with pytest.raises(ImageIOError):
        save_gray(np.zeros((4, 4)), tmp_path / "out.jpg")
    with pytest.raises(InvalidInputError):
        save_gray(np.zeros((4, 4, 3)), tmp_path / "out.png")


def test_load_rgb_uses_luma(tmp_path):
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[..., 0] = 255
    Image.fromarray(rgb).save(tmp_path / "red.png")
    np.testing.assert_allclose(load_gray(tmp_path / "red.png"), 0.299, atol=1e-12)


def test_load_16_bit(tmp_path):
    arr = np.array([[0, 65535], [32768, 1000]], dtype=np.uint16)
    Image.fromarray(arr).save(tmp_path / "deep.png")
    loaded = load_gray(tmp_path / "deep.png")
    np.testing.assert_allclose(loaded, arr / 65535.0, atol=1e-12)


def test_load_missing_or_corrupt(tmp_path):
    with pytest.raises(ImageIOError):
        load_gray(tmp_path / "nope.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(ImageIOError):
        load_gray(tmp_path / "junk.png")


# --- pairing ---

def test_pairs_sorted_by_stem(tmp_path):
    ir_dir, vis_dir = make_pair_dirs(tmp_path, ["b", "a", "c"])
    dataset = pair_directories(ir_dir, vis_dir)
    assert [p.stem for p in dataset] == ["a", "b", "c"]
    assert len(dataset) == 3
    ir, vis = dataset.load_pair(0)
    assert ir.shape == vis.shape == (20, 24)


def test_training_images_interleave_ir_then_vis(tmp_path):
    ir_dir, vis_dir = make_pair_dirs(tmp_path, ["x"])
    images = pair_directories(ir_dir, vis_dir).training_images()
    assert len(images) == 2
    assert images[0][0, 0] == pytest.approx(0 / 255.0)
    assert images[1][0, 0] == pytest.approx(5 / 255.0)


def test_unmatched_stems_reported(tmp_path):
    ir_dir, vis_dir = make_pair_dirs(tmp_path, ["a", "b"])
    Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(ir_dir / "only_ir.png")
    (ir_dir / "notes.txt").write_text("ignored")
    dataset = pair_directories(ir_dir, vis_dir, split="val")
    assert dataset.split == "val"
    assert dataset.unmatched == ["only_ir"]
    assert [p.stem for p in dataset] == ["a", "b"]


def test_size_mismatch_rejected(tmp_path):
    ir_dir, vis_dir = make_pair_dirs(tmp_path, ["a"])
    Image.fromarray(np.zeros((10, 10), dtype=np.uint8)).save(ir_dir / "b.png")
    Image.fromarray(np.zeros((12, 10), dtype=np.uint8)).save(vis_dir / "b.png")
    dataset = pair_directories(ir_dir, vis_dir)
    assert [p.stem for p in dataset] == ["a"]
    assert dataset.rejected[0][0] == "b"
    assert "size mismatch" in dataset.rejected[0][1]


def test_min_size_and_empty_sets(tmp_path):
    ir_dir, vis_dir = make_pair_dirs(tmp_path, ["a"])
    with pytest.raises(DatasetError):
        pair_directories(ir_dir, vis_dir, min_size=32)
    with pytest.raises(DatasetError):
        pair_directories(tmp_path / "missing", vis_dir)
