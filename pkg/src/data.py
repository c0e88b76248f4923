"""
Dataset records, annotated-directory loading and preprocessing
"""
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch

from src.annotations import (DOMAIN_COLUMN, FILENAME_COLUMN, PROTECTED_COLUMNS, format_target_cell,
                             parse_class_cell, parse_target_cell, read_annotation_table, target_columns,
                             write_annotation_table)
from src.config_schema import LoaderConfig
from src.errors import DataFormatError, ImageSizeError, ShapeError
from src.image_store import ImageStore, from_uint8, load_rgb

SPLITS = ('train', 'val', 'test', 'all')
DEFAULT_CARDINALITIES = {'gender': 2, 'age': 6, 'race': 5}


@dataclass
class ProtectedLabels:
    """Gender / age bucket / race class indices, each optionally absent"""

    gender: Optional[int] = None
    age: Optional[int] = None
    race: Optional[int] = None

    def as_list(self) -> List[int]:
        """Class indices with -1 for absent labels"""
        return [-1 if v is None else int(v) for v in (self.gender, self.age, self.race)]

    def to_dict(self) -> Dict[str, Optional[int]]:
        return {'gender': self.gender, 'age': self.age, 'race': self.race}

    @property
    def is_empty(self) -> bool:
        return self.gender is None and self.age is None and self.race is None


@dataclass
class DatasetRecord:
    """One image with its target attributes, protected labels and domain"""

    image: np.ndarray
    target_attrs: np.ndarray
    protected: ProtectedLabels = field(default_factory=ProtectedLabels)
    domain_label: int = 0
    filename: Optional[str] = None

    def with_image(self, image: np.ndarray, target_attrs: Optional[np.ndarray] = None,
                   filename: Optional[str] = None) -> 'DatasetRecord':
        """Copy carrying a new image (and optionally new attributes)"""
        return DatasetRecord(
            image=image,
            target_attrs=self.target_attrs.copy() if target_attrs is None else np.asarray(target_attrs, np.int64),
            protected=ProtectedLabels(**self.protected.to_dict()),
            domain_label=self.domain_label,
            filename=filename or self.filename,
        )


class AnnotatedDataset(list):
    """Records of one split plus the attribute names they were read with"""

    def __init__(self, records: Sequence[DatasetRecord] = (), attribute_names: Sequence[str] = (),
                 skipped_missing: int = 0):
        super().__init__(records)
        self.attribute_names = list(attribute_names)
        self.skipped_missing = skipped_missing


def _filename_key(filename: str) -> int:
    return int(hashlib.md5(filename.encode('utf-8')).hexdigest()[:8], 16)


def split_of(filename: str, ratios: Tuple[float, float, float] = (0.9, 0.05, 0.05)) -> str:
    """Deterministic train/val/test assignment from an md5 of the filename"""
    bucket = _filename_key(filename) / 2 ** 32
    if bucket < ratios[0]:
        return 'train'
    if bucket < ratios[0] + ratios[1]:
        return 'val'
    return 'test'


def preprocess(image: np.ndarray, crop: Optional[int], out_size: int, training: bool,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Crop and resize a decoded image into a [-1, 1] tensor

    Args:
        image: HxWx3 uint8 array
        crop: Square crop edge (None uses the shorter side)
        out_size: Output edge length
        training: Random crop when True, center crop otherwise
        rng: Generator for the random crop offset

    Returns:
        Float32 array of shape (3, out_size, out_size)
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got shape {image.shape}")
    height, width = image.shape[:2]
    crop = min(height, width) if crop is None else crop
    if height < crop or width < crop:
        raise ImageSizeError(f"image {width}x{height} is smaller than crop {crop}x{crop}")

    if training:
        rng = rng or np.random.default_rng()
        top = int(rng.integers(0, height - crop + 1))
        left = int(rng.integers(0, width - crop + 1))
    else:
        top = (height - crop) // 2
        left = (width - crop) // 2
    cropped = np.ascontiguousarray(image[top:top + crop, left:left + crop])

    if crop != out_size:
        interpolation = cv2.INTER_AREA if crop > out_size else cv2.INTER_LINEAR
        cropped = cv2.resize(cropped, (out_size, out_size), interpolation=interpolation)
    return np.clip(from_uint8(cropped.astype(np.uint8)), -1.0, 1.0)


def _parse_row(row_number: int, cells: Dict[str, str], attribute_names: List[str],
               cardinalities: Dict[str, int]) -> Tuple[str, np.ndarray, ProtectedLabels, int]:
    filename = cells[FILENAME_COLUMN]
    if not filename:
        raise DataFormatError("empty filename", row=row_number)
    bits = np.array([parse_target_cell(cells[name], row_number, name) for name in attribute_names],
                    dtype=np.int64)
    protected = ProtectedLabels(**{
        name: parse_class_cell(cells.get(name, ''), row_number, name, cardinalities[name])
        for name in PROTECTED_COLUMNS
    })
    domain = parse_class_cell(cells.get(DOMAIN_COLUMN, ''), row_number, DOMAIN_COLUMN, 2)
    return filename, bits, protected, 0 if domain is None else domain


def load_annotated_dataset(root_dir: Union[str, Path], annotation_file: Union[str, Path, None] = None,
                           split: str = 'train', config: Optional[LoaderConfig] = None,
                           cardinalities: Optional[Dict[str, int]] = None) -> AnnotatedDataset:
    """
    Load a CelebA-style directory: <root>/images/*.png and <root>/annotations.csv

    Args:
        root_dir: Dataset root
        annotation_file: CSV path (defaults to <root>/annotations.csv)
        split: train, val, test, or all
        config: Crop, output size and split ratios
        cardinalities: Protected label cardinalities used for validation

    Returns:
        AnnotatedDataset; train-split records get a random crop seeded by (config.seed, filename)
        when config.random_crop is set, every other split is center-cropped
    """
    if split not in SPLITS:
        raise DataFormatError(f"unknown split '{split}', expected one of {', '.join(SPLITS)}")
    config = config or LoaderConfig()
    cardinalities = cardinalities or DEFAULT_CARDINALITIES
    root_dir = Path(root_dir)
    annotation_file = Path(annotation_file) if annotation_file else root_dir / 'annotations.csv'
    images_dir = root_dir / 'images'

    header, rows = read_annotation_table(annotation_file)
    if not header:
        return AnnotatedDataset()
    attribute_names = target_columns(header)
    if not attribute_names:
        raise DataFormatError("no target attribute columns in header", row=1)

    training = split == 'train' and config.random_crop
    entries = []
    missing = 0
    for row_number, cells in rows:
        filename, bits, protected, domain = _parse_row(row_number, cells, attribute_names, cardinalities)
        if split != 'all' and split_of(filename, config.split_ratios) != split:
            continue
        path = images_dir / filename
        if not path.exists():
            missing += 1
            continue
        entries.append((path, filename, bits, protected, domain))

    if missing:
        logging.warning(f"Skipped {missing} annotated images missing from {images_dir}")
    if not rows:
        logging.warning(f"Annotation file {annotation_file} has no rows")

    def _load(entry) -> DatasetRecord:
        path, filename, bits, protected, domain = entry
        rng = np.random.default_rng([config.seed, _filename_key(filename)]) if training else None
        image = preprocess(load_rgb(path), config.crop, config.out_size, training=training, rng=rng)
        return DatasetRecord(image=image, target_attrs=bits, protected=protected,
                             domain_label=domain, filename=filename)

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        records = list(pool.map(_load, entries))

    logging.info(f"Loaded {len(records)} '{split}' records from {root_dir}")
    return AnnotatedDataset(records, attribute_names, skipped_missing=missing)


def write_dataset(records: Sequence[DatasetRecord], out_dir: Union[str, Path], attribute_names: Sequence[str],
                  provenance: Optional[Dict] = None) -> Path:
    """
    Write images, annotations.csv and (optionally) a provenance JSON

    Args:
        records: Records to store; records without a filename get a sequential one
        out_dir: Dataset root
        attribute_names: Names of the target attribute columns
        provenance: Spec dict written to synthetic_spec.json

    Returns:
        Path to annotations.csv
    """
    out_dir = Path(out_dir)
    store = ImageStore(out_dir, subdir='images', prefix='img')
    rows = []
    for record in records:
        if len(record.target_attrs) != len(attribute_names):
            raise ShapeError(f"record has {len(record.target_attrs)} attributes, expected {len(attribute_names)}")
        path = store.save_tensor(record.image, record.filename)
        row = {FILENAME_COLUMN: path.name, DOMAIN_COLUMN: record.domain_label}
        row.update({name: format_target_cell(bit) for name, bit in zip(attribute_names, record.target_attrs)})
        row.update(record.protected.to_dict())
        rows.append(row)

    columns = [FILENAME_COLUMN] + list(attribute_names) + list(PROTECTED_COLUMNS) + [DOMAIN_COLUMN]
    annotations = out_dir / 'annotations.csv'
    write_annotation_table(annotations, columns, rows)

    if provenance is not None:
        with open(out_dir / 'synthetic_spec.json', 'w', encoding='utf-8') as f:
            json.dump({'version': '1.0', 'created': datetime.now().isoformat(), 'spec': provenance}, f, indent=2)
    return annotations


def records_to_tensors(records: Sequence[DatasetRecord]) -> Tuple[torch.Tensor, torch.Tensor,
                                                                  torch.Tensor, torch.Tensor]:
    """
    Stack records for model consumption

    Returns:
        images (N,3,H,W) float32, attrs (N,K) float32, protected (N,3) int64 with -1 absent,
        domains (N,) int64
    """
    if not records:
        raise ShapeError("no records to stack")
    images = torch.from_numpy(np.stack([r.image for r in records]).astype(np.float32))
    attrs = torch.from_numpy(np.stack([r.target_attrs for r in records]).astype(np.float32))
    protected = torch.tensor([r.protected.as_list() for r in records], dtype=torch.int64)
    domains = torch.tensor([r.domain_label for r in records], dtype=torch.int64)
    return images, attrs, protected, domains


def batch_indices(count: int, batch_size: int, generator: Optional[torch.Generator] = None,
                  shuffle: bool = True) -> List[torch.Tensor]:
    """Index batches over `count` items, shuffled with `generator` when requested"""
    order = torch.randperm(count, generator=generator) if shuffle else torch.arange(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]
