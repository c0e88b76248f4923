"""
Annotation table import/export
CelebA-style CSV: filename, target attribute columns, optional protected and domain columns
"""
import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from src.errors import DataFormatError

FILENAME_COLUMN = 'filename'
PROTECTED_COLUMNS = ('gender', 'age', 'race')
DOMAIN_COLUMN = 'domain'
RESERVED_COLUMNS = (FILENAME_COLUMN,) + PROTECTED_COLUMNS + (DOMAIN_COLUMN,)

TARGET_CELL_VALUES = {'1': 1, '-1': 0, '0': 0}


def read_annotation_table(path: Union[str, Path]) -> Tuple[List[str], List[Tuple[int, Dict[str, str]]]]:
    """
    Read an annotation CSV

    Args:
        path: CSV file path

    Returns:
        Tuple of (header, rows); each row is (row_number, cells) with the header on row 1
    """
    with open(path, 'r', newline='', encoding='utf-8') as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            logging.warning(f"Annotation file {path} is empty")
            return [], []

        header = [h.strip() for h in header]
        if not header or header[0] != FILENAME_COLUMN:
            logging.error(f"Annotation file {path} has no '{FILENAME_COLUMN}' header")
            raise DataFormatError(f"missing header: first column must be '{FILENAME_COLUMN}'", row=1)

        rows = []
        for row_number, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise DataFormatError(
                    f"expected {len(header)} cells, found {len(cells)}", row=row_number)
            rows.append((row_number, {h: c.strip() for h, c in zip(header, cells)}))
    return header, rows


def write_annotation_table(path: Union[str, Path], columns: Sequence[str], rows: Sequence[Dict[str, object]]):
    """Write rows with csv.DictWriter"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({c: '' if row.get(c) is None else row.get(c) for c in columns})
    logging.info(f"Wrote {len(rows)} annotation rows to {path}")


def target_columns(header: Sequence[str]) -> List[str]:
    """Target attribute columns in file order"""
    return [h for h in header if h not in RESERVED_COLUMNS]


def parse_target_cell(value: str, row: int, column: str) -> int:
    """Map a {-1,1} or {0,1} cell to a bit"""
    if value not in TARGET_CELL_VALUES:
        raise DataFormatError(f"unknown value '{value}' in column '{column}'", row=row)
    return TARGET_CELL_VALUES[value]


def parse_class_cell(value: str, row: int, column: str, cardinality: int) -> Optional[int]:
    """Parse an optional class index; empty cell means absent"""
    if value == '':
        return None
    try:
        parsed = int(value)
    except ValueError:
        raise DataFormatError(f"unknown value '{value}' in column '{column}'", row=row)
    if not 0 <= parsed < cardinality:
        raise DataFormatError(
            f"value {parsed} in column '{column}' outside 0..{cardinality - 1}", row=row)
    return parsed


def format_target_cell(bit: int) -> str:
    """Bits are written in the CelebA {-1,1} convention"""
    return '1' if int(bit) == 1 else '-1'
