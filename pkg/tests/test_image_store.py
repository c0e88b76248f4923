import numpy as np
import pytest
import torch
from PIL import Image

from src.errors import ShapeError
from src.image_store import ImageStore, create_comparison_sheet, from_uint8, tile_batch, to_uint8


def test_uint8_conversion_endpoints():
    image = np.stack([np.full((2, 2), -1.0), np.zeros((2, 2)), np.ones((2, 2))]).astype(np.float32)
    pixels = to_uint8(image)
    assert pixels.shape == (2, 2, 3)
    assert pixels[0, 0].tolist() == [0, 128, 255]


def test_to_uint8_accepts_tensors_and_clips():
    pixels = to_uint8(torch.full((3, 4, 4), 3.0))
    assert (pixels == 255).all()


def test_conversions_reject_bad_shapes():
    with pytest.raises(ShapeError):
        to_uint8(np.zeros((4, 4, 3)))
    with pytest.raises(ShapeError):
        from_uint8(np.zeros((3, 4, 4), dtype=np.uint8))


def test_store_numbers_files_sequentially(tmp_path):
    store = ImageStore(tmp_path, subdir='out', prefix='sample')
    first = store.save_tensor(np.zeros((3, 8, 8), np.float32))
    second = store.save_tensor(np.zeros((3, 8, 8), np.float32))
    assert first.name == 'sample_00000.png'
    assert second.name == 'sample_00001.png'
    assert ImageStore(tmp_path, subdir='out', prefix='sample').counter == 2


def test_store_save_and_load(tmp_path):
    store = ImageStore(tmp_path)
    image = np.random.default_rng(0).uniform(-1, 1, size=(3, 8, 8)).astype(np.float32)
    path = store.save_tensor(image, 'x.png')
    assert np.abs(from_uint8(store.load(path.name)) - image).max() <= 1.0 / 127.5 + 1e-6


def test_comparison_sheet_size(tmp_path):
    rows = tile_batch([np.zeros((3, 8, 8), np.float32)] * 5, columns=2)
    assert [len(r) for r in rows] == [2, 2, 1]
    path = create_comparison_sheet(rows, tmp_path / 'sheet.png', cell_size=10, labels=['in', 'out'])
    with Image.open(path) as sheet:
        assert sheet.size == (20, 16 + 30)


def test_comparison_sheet_needs_images(tmp_path):
    with pytest.raises(ShapeError):
        create_comparison_sheet([], tmp_path / 'sheet.png')
