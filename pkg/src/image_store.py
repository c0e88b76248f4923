"""
Image Store for Fair Translate
Handles PNG storage of [-1, 1] image tensors, sequential filenames and comparison sheets
"""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from src.errors import ShapeError


def to_uint8(image) -> np.ndarray:
    """
    Convert a CHW image in [-1, 1] to an HWC uint8 array

    Args:
        image: numpy array or torch tensor of shape (3, H, W)

    Returns:
        Array of shape (H, W, 3)
    """
    if hasattr(image, 'detach'):
        image = image.detach().cpu().numpy()
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got shape {tuple(image.shape)}")
    scaled = np.rint((np.clip(image, -1.0, 1.0) + 1.0) * 127.5)
    return scaled.astype(np.uint8).transpose(1, 2, 0)


def from_uint8(array: np.ndarray) -> np.ndarray:
    """Convert an HWC uint8 array to a CHW float32 image in [-1, 1]"""
    array = np.asarray(array)
    if array.ndim != 3 or array.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) array, got shape {array.shape}")
    return (array.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def load_rgb(path: Union[str, Path]) -> np.ndarray:
    """Decode an image file to an HWC uint8 RGB array"""
    with Image.open(path) as img:
        return np.asarray(img.convert('RGB'), dtype=np.uint8)


class ImageStore:
    """Manages image output directories and filenames"""

    def __init__(self, base_dir: Union[str, Path], subdir: str = "images", prefix: str = "img"):
        """
        Initialize image store

        Args:
            base_dir: Base directory for outputs
            subdir: Directory under base_dir receiving the PNG files
            prefix: Prefix for generated filenames
        """
        self.base_dir = Path(base_dir)
        self.images_dir = self.base_dir / subdir
        self.prefix = prefix

        self.images_dir.mkdir(parents=True, exist_ok=True)

        # Counter for generating unique filenames
        self.counter = self._get_next_counter()

    def _get_next_counter(self) -> int:
        """Get next available counter for unique filenames"""
        numbers = []
        for f in self.images_dir.glob(f"{self.prefix}_*.png"):
            try:
                numbers.append(int(f.stem.split('_')[-1]))
            except ValueError:
                pass
        return max(numbers, default=-1) + 1

    def generate_filename(self) -> str:
        filename = f"{self.prefix}_{self.counter:05d}.png"
        self.counter += 1
        return filename

    def save_tensor(self, image, filename: Optional[str] = None) -> Path:
        """
        Save a [-1, 1] CHW image as PNG

        Args:
            image: Image array or tensor
            filename: Target filename (generated when omitted)

        Returns:
            Path to saved image
        """
        filename = filename or self.generate_filename()
        filepath = self.images_dir / filename
        Image.fromarray(to_uint8(image), mode='RGB').save(str(filepath), 'PNG')
        return filepath

    def load(self, filename: str) -> np.ndarray:
        return load_rgb(self.images_dir / filename)


def create_comparison_sheet(rows: Sequence[Sequence], out_path: Union[str, Path],
                            cell_size: int = 96, labels: Optional[Sequence[str]] = None) -> Path:
    """
    Lay out rows of images (input, outputs...) in one PNG grid

    Args:
        rows: Each row is a sequence of CHW [-1, 1] images
        out_path: Output PNG path
        cell_size: Edge length of each grid cell in pixels
        labels: Optional column captions drawn above the grid

    Returns:
        Path to the sheet
    """
    columns = max((len(r) for r in rows), default=0)
    if columns == 0:
        raise ShapeError("comparison sheet needs at least one image")
    header = 16 if labels else 0
    sheet = Image.new('RGB', (columns * cell_size, header + len(rows) * cell_size), color='#FFFFFF')
    draw = ImageDraw.Draw(sheet)

    if labels:
        font = ImageFont.load_default()
        for col, text in enumerate(labels[:columns]):
            draw.text((col * cell_size + 4, 2), str(text), fill='black', font=font)

    for row_index, row in enumerate(rows):
        for col, image in enumerate(row):
            tile = Image.fromarray(to_uint8(image), mode='RGB')
            tile = tile.resize((cell_size, cell_size), Image.Resampling.NEAREST)
            sheet.paste(tile, (col * cell_size, header + row_index * cell_size))

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    sheet.save(str(out_path), 'PNG')
    logging.info(f"Comparison sheet saved: {out_path}")
    return out_path


def tile_batch(images: List, columns: int = 8) -> List[List]:
    """Split a flat image list into sheet rows"""
    return [images[i:i + columns] for i in range(0, len(images), columns)]
