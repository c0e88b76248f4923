"""
Translation evaluation
FPAD per (gender, edit direction, attribute) cell, pooled FID / KID and attribute accuracy
of translated images, written as a schema-checked JSON report
"""
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import jsonschema
import numpy as np
import torch
import torch.nn as nn

from src.config_schema import EvalConfig, SyntheticSpec
from src.data import DatasetRecord, records_to_tensors
from src.errors import MetricInputError, ReportSchemaError, ShapeError
from src.metrics import (GENDER_GROUPS, ImageEmbedder, PacEmbedder, attribute_accuracy, fid_from_embeddings,
                         kid_from_embeddings)
from src.pac import PacModel
from src.synthetic import decode_synthetic_labels
from src.translator import translate_batched

REPORT_SCHEMA_VERSION = '1.0'
SCHEMA_DIR = Path(__file__).parent
ABSENT = 'absent'

# (label, source bit, target bit)
DIRECTIONS = (('+->-', 1, 0), ('-->+', 0, 1))


def load_schema(name: str) -> Dict:
    with open(SCHEMA_DIR / name, 'r', encoding='utf-8') as f:
        return json.load(f)


def validate_report(document: Dict, schema_name: str = 'report_schema.json'):
    """Check a report dict against a shipped schema"""
    try:
        jsonschema.validate(instance=document, schema=load_schema(schema_name))
    except jsonschema.ValidationError as e:
        location = '/'.join(str(p) for p in e.absolute_path) or '<root>'
        logging.error(f"Report failed schema check at {location}: {e.message}")
        raise ReportSchemaError(f"{location}: {e.message}") from e


@dataclass
class FpadCell:
    gender: str
    direction: str
    attribute: str
    count: int
    fpad: Optional[float] = None

    @property
    def present(self) -> bool:
        return self.fpad is not None

    def to_dict(self) -> Dict:
        return {
            'gender': self.gender,
            'direction': self.direction,
            'attribute': self.attribute,
            'count': self.count,
            'fpad': self.fpad if self.present else ABSENT,
        }


def _mean(values: List[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


@dataclass
class EvaluationReport:
    """Metrics of one translator on one record set"""

    cells: List[FpadCell]
    fid: float
    kid_mean: float
    kid_std: float
    attribute_accuracy: Optional[float]
    attribute_names: List[str]
    embedder_id: str
    real_count: int
    generated_count: int
    config: Dict = field(default_factory=dict)

    @property
    def present_cells(self) -> List[FpadCell]:
        return [c for c in self.cells if c.present]

    def averages(self) -> Dict[str, Optional[float]]:
        """Mean FPAD over present cells, overall and per gender / direction"""
        result = {'overall': _mean([c.fpad for c in self.present_cells])}
        for gender in GENDER_GROUPS.values():
            result[gender] = _mean([c.fpad for c in self.present_cells if c.gender == gender])
        for direction, _, _ in DIRECTIONS:
            result[direction] = _mean([c.fpad for c in self.present_cells if c.direction == direction])
        return result

    def to_dict(self) -> Dict:
        return {
            'schema_version': REPORT_SCHEMA_VERSION,
            'created': datetime.now().isoformat(),
            'embedder_id': self.embedder_id,
            'attribute_names': list(self.attribute_names),
            'set_sizes': {'real': self.real_count, 'generated': self.generated_count},
            'fpad': {
                'cells': [c.to_dict() for c in self.cells],
                'average': self.averages(),
            },
            'fid': self.fid,
            'kid': {'mean': self.kid_mean, 'std': self.kid_std},
            'attribute_accuracy': self.attribute_accuracy,
            'config': dict(self.config),
        }

    def save(self, path: Union[str, Path]) -> Path:
        """Validate and write the JSON report"""
        document = self.to_dict()
        validate_report(document)
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(document, f, indent=2)
        return path

    def format_table(self) -> str:
        """Human-readable FPAD grid (attribute rows, gender/direction columns) plus pooled metrics"""
        columns = [(g, d) for g in GENDER_GROUPS.values() for d, _, _ in DIRECTIONS]
        lookup = {(c.gender, c.direction, c.attribute): c for c in self.cells}
        width = max([len(a) for a in self.attribute_names] + [len('Average')]) + 2

        lines = ['FPAD'.ljust(width) + ''.join(f"{g} ({d})".rjust(16) for g, d in columns)]
        for attribute in self.attribute_names:
            row = attribute.ljust(width)
            for g, d in columns:
                cell = lookup.get((g, d, attribute))
                row += (f"{cell.fpad:.4f}" if cell is not None and cell.present else ABSENT).rjust(16)
            lines.append(row)
        averages = self.averages()
        lines.append('Average'.ljust(width) + ''.join(
            (f"{v:.4f}" if v is not None else ABSENT).rjust(16)
            for v in (_mean([lookup[(g, d, a)].fpad for a in self.attribute_names
                             if (g, d, a) in lookup and lookup[(g, d, a)].present]) for g, d in columns)
        ))
        lines.append('')
        lines.append(f"FPAD average      {averages['overall']:.4f}" if averages['overall'] is not None
                     else f"FPAD average      {ABSENT}")
        lines.append(f"FID ({self.embedder_id})  {self.fid:.4f}")
        lines.append(f"KID x100          {self.kid_mean:.4f} +/- {self.kid_std:.4f}")
        accuracy = 'n/a' if self.attribute_accuracy is None else f"{100 * self.attribute_accuracy:.2f}%"
        lines.append(f"Attribute acc.    {accuracy}")
        lines.append(f"Real / generated  {self.real_count} / {self.generated_count}")
        return '\n'.join(lines)


def synthetic_attribute_classifier(spec: SyntheticSpec) -> Callable[[torch.Tensor], torch.Tensor]:
    """Rule-based classifier for synthetic images: +1 logit when the slot is painted, -1 otherwise"""

    def classify(images: torch.Tensor) -> torch.Tensor:
        bits = [decode_synthetic_labels(image, spec)['targets'] for image in images.detach().cpu()]
        return torch.tensor(bits, dtype=torch.float32) * 2.0 - 1.0

    return classify


@torch.no_grad()
def translate_images(generator: Callable, images: torch.Tensor, target_attrs: torch.Tensor,
                     batch_size: int) -> torch.Tensor:
    if isinstance(generator, nn.Module):
        device = next(generator.parameters()).device
        return translate_batched(generator, images.to(device), target_attrs.to(device), batch_size).cpu()
    parts = [generator(images[i:i + batch_size], target_attrs[i:i + batch_size])
             for i in range(0, len(images), batch_size)]
    return torch.cat(parts).cpu()


def _gender_names(protected: torch.Tensor) -> List[Optional[str]]:
    return [GENDER_GROUPS.get(int(g)) for g in protected[:, 0]]


def evaluate_translations(generator: Callable, pac: PacModel, records: Sequence[DatasetRecord],
                          attribute_names: Sequence[str], embedder: Optional[ImageEmbedder] = None,
                          config: Optional[EvalConfig] = None,
                          classifier: Optional[Callable[[torch.Tensor], torch.Tensor]] = None) -> EvaluationReport:
    """
    Translate every record once per attribute (flipping that bit) and measure the result

    Each (gender, direction, attribute) cell collects the records whose bit starts at the
    direction's source value; FPAD compares their PAC features before and after translation.
    Cells with fewer than config.min_cell_size records are reported absent.

    Args:
        generator: Trained Generator, or any callable (images, attrs) -> images
        pac: Trained PAC for FPAD
        records: Evaluation records with gender labels
        attribute_names: Names of the K target attributes
        embedder: General-purpose embedder for FID / KID (PAC encoder by default)
        config: Metric settings
        classifier: images -> (B, K) logits used for attribute accuracy (skipped when None)

    Returns:
        EvaluationReport
    """
    config = config or EvalConfig()
    images, attrs, protected, _ = records_to_tensors(records)
    if attrs.shape[1] != len(attribute_names):
        raise ShapeError(f"records carry {attrs.shape[1]} attributes, {len(attribute_names)} names given")
    pac_embedder = PacEmbedder(pac, config.batch_size)
    embedder = embedder or pac_embedder
    genders = np.array(_gender_names(protected), dtype=object)
    if all(g is None for g in genders):
        logging.warning("No evaluation record carries a gender label; every FPAD cell will be absent")

    real_pac = pac_embedder.embed(images)
    cells = []
    generated_parts, target_parts = [], []
    for k, attribute in enumerate(attribute_names):
        a_t = attrs.clone()
        a_t[:, k] = 1 - a_t[:, k]
        translated = translate_images(generator, images, a_t, config.batch_size)
        generated_parts.append(translated)
        target_parts.append(a_t)
        fake_pac = pac_embedder.embed(translated)

        for gender in GENDER_GROUPS.values():
            for direction, source_bit, _ in DIRECTIONS:
                rows = np.flatnonzero((genders == gender) & (attrs[:, k].numpy() == source_bit))
                cell = FpadCell(gender, direction, attribute, int(len(rows)))
                if len(rows) >= config.min_cell_size:
                    cell.fpad = fid_from_embeddings(real_pac[rows], fake_pac[rows])
                else:
                    logging.info(f"FPAD cell {gender} {direction} {attribute} has {len(rows)} samples; "
                                 f"reported absent")
                cells.append(cell)

    generated = torch.cat(generated_parts)
    targets = torch.cat(target_parts)
    real_features = embedder.embed(images)
    fake_features = embedder.embed(generated)
    fid_value = fid_from_embeddings(real_features, fake_features)

    subset_size = min(config.kid_subset_size, len(real_features), len(fake_features))
    if subset_size < config.kid_subset_size:
        logging.info(f"KID subset size reduced to {subset_size}")
    if subset_size < 2:
        raise MetricInputError("KID needs at least 2 real and 2 generated images")
    kid_mean, kid_std = kid_from_embeddings(real_features, fake_features, config.kid_subsets, subset_size,
                                            config.seed)

    accuracy = None
    if classifier is not None:
        accuracy = attribute_accuracy(classifier, generated, targets, config.batch_size)

    report = EvaluationReport(
        cells=cells,
        fid=fid_value,
        kid_mean=kid_mean,
        kid_std=kid_std,
        attribute_accuracy=accuracy,
        attribute_names=list(attribute_names),
        embedder_id=embedder.embedder_id,
        real_count=len(images),
        generated_count=len(generated),
        config=config.to_dict(),
    )
    averages = report.averages()
    logging.info(f"Evaluated {len(images)} records: FPAD average "
                 f"{'absent' if averages['overall'] is None else format(averages['overall'], '.4f')}, "
                 f"FID {fid_value:.4f}, KID {kid_mean:.4f}")
    return report
