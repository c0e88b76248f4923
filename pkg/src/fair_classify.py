"""
Fair classification experiment
Small attribute classifier, hash-based 60/15/25 split, translation-based data augmentation
and the per-group TPR / FPR report with Equality of Opportunity and Equalized Odds
"""
import copy
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.checkpoint import load_checkpoint, save_checkpoint
from src.config_schema import AUGMENT_POLICIES, PROTECTED_NAMES, FairClassifyConfig
from src.data import DatasetRecord, batch_indices, records_to_tensors, split_of
from src.errors import ConfigError, DataFormatError, ShapeError
from src.evaluation import translate_images, validate_report
from src.metrics import (GENDER_GROUPS, GroupedPredictions, attribute_accuracy_from_bits, equality_of_opportunity,
                         equalized_odds, group_rates)

FAIRNESS_SCHEMA = 'fairness_report_schema.json'


class AttributeClassifier(nn.Module):
    """Three conv-bn-relu-pool stages, global pooling, K logits"""

    def __init__(self, num_attrs: int, base_channels: int = 16, resolution: int = 64):
        super().__init__()
        self.num_attrs = num_attrs
        self.base_channels = base_channels
        self.resolution = resolution
        layers = []
        in_channels = 3
        for i in range(3):
            out_channels = base_channels * 2 ** i
            layers += [
                nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
                nn.BatchNorm2d(out_channels),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            in_channels = out_channels
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(in_channels, num_attrs))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, self.resolution, self.resolution):
            raise ShapeError(f"classifier expects (B, 3, {self.resolution}, {self.resolution}), "
                             f"got {tuple(images.shape)}")
        return self.head(self.features(images))

    def header(self) -> Dict:
        return {'num_attrs': self.num_attrs, 'base_channels': self.base_channels, 'resolution': self.resolution}


def save_classifier(model: AttributeClassifier, path: Union[str, Path], attribute_names: Sequence[str]) -> Path:
    header = dict(model.header(), attribute_names=list(attribute_names))
    return save_checkpoint(path, 'classifier', header, {'state_dict': model.state_dict()})


def load_classifier(path: Union[str, Path], map_location: str = 'cpu') -> Tuple[AttributeClassifier, List[str]]:
    """Classifier in eval mode plus the attribute names it predicts"""
    header, payload = load_checkpoint(path, 'classifier', map_location)
    model = AttributeClassifier(header['num_attrs'], header['base_channels'], header['resolution'])
    model.load_state_dict(payload['state_dict'])
    model.eval()
    return model, list(header['attribute_names'])


def fairness_split(records: Sequence[DatasetRecord],
                   ratios: Tuple[float, float, float] = (0.6, 0.15, 0.25)) -> Dict[str, List[DatasetRecord]]:
    """
    Deterministic train / val / test split by filename hash

    Records without a filename are keyed by their position.
    """
    splits = {'train': [], 'val': [], 'test': []}
    for i, record in enumerate(records):
        splits[split_of(record.filename or f"record_{i:06d}", ratios)].append(record)
    logging.info(f"Fairness split: {len(splits['train'])} train, {len(splits['val'])} val, "
                 f"{len(splits['test'])} test")
    return splits


@torch.no_grad()
def predict_logits(model: nn.Module, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    try:
        parts = [model(images[i:i + batch_size].to(device)).cpu() for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    return torch.cat(parts)


def train_attribute_classifier(records: Sequence[DatasetRecord], attribute_indices: Sequence[int],
                               config: FairClassifyConfig, val_records: Sequence[DatasetRecord] = (),
                               device: str = 'cpu') -> Tuple[AttributeClassifier, List[Dict]]:
    """
    Train the classifier on the selected target attributes with per-attribute BCE

    Args:
        records: Training records
        attribute_indices: Columns of target_attrs the classifier predicts
        config: Experiment settings
        val_records: Optional validation records; the best-validation epoch is kept
        device: Torch device

    Returns:
        Tuple of (classifier in eval mode, per-epoch history)
    """
    if not records:
        raise DataFormatError("no training records for the attribute classifier")
    indices = list(attribute_indices)
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)

    images, attrs, _, _ = records_to_tensors(records)
    if max(indices) >= attrs.shape[1]:
        raise ShapeError(f"attribute index {max(indices)} out of range for {attrs.shape[1]} attributes")
    labels = attrs[:, indices]
    model = AttributeClassifier(len(indices), config.base_channels, images.shape[-1]).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    if val_records:
        val_images, val_attrs, _, _ = records_to_tensors(val_records)
        val_labels = val_attrs[:, indices]

    history = []
    best_accuracy = -1.0
    best_state = None
    for epoch in range(1, config.epochs + 1):
        model.train()
        batches = batch_indices(len(images), config.batch_size, generator)
        total = 0.0
        for index in batches:
            logits = model(images[index].to(device))
            loss = F.binary_cross_entropy_with_logits(logits, labels[index].to(device))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()

        entry = {'epoch': epoch, 'loss': total / len(batches)}
        if val_records:
            pred_bits = (predict_logits(model, val_images) > 0).long().numpy()
            entry['val_accuracy'] = attribute_accuracy_from_bits(pred_bits, val_labels.long().numpy())
            if entry['val_accuracy'] > best_accuracy:
                best_accuracy = entry['val_accuracy']
                best_state = copy.deepcopy(model.state_dict())
        history.append(entry)
        logging.info(f"Classifier epoch {epoch}/{config.epochs}: loss={entry['loss']:.4f}"
                     + (f" val_acc={entry['val_accuracy']:.4f}" if 'val_accuracy' in entry else ''))

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


def group_labels(records: Sequence[DatasetRecord], group_attribute: str = 'gender') -> List[Optional[str]]:
    """Group name of each record (None when the protected label is absent)"""
    if group_attribute not in PROTECTED_NAMES:
        raise ConfigError('group_attribute', f"must be one of {', '.join(PROTECTED_NAMES)}")
    names = []
    for record in records:
        value = getattr(record.protected, group_attribute)
        if value is None:
            names.append(None)
        elif group_attribute == 'gender':
            names.append(GENDER_GROUPS.get(int(value), str(value)))
        else:
            names.append(str(value))
    return names


@dataclass
class FairnessReport:
    """Group rates (percentage points), fairness gaps and accuracy on the test split"""

    target_attribute: str
    group_attribute: str
    predictions: GroupedPredictions
    set_sizes: Dict[str, int]
    config: Dict = field(default_factory=dict)

    @property
    def rates(self):
        return group_rates(self.predictions, percent=True)

    @property
    def equality_of_opportunity(self) -> float:
        return equality_of_opportunity(self.rates)

    @property
    def equalized_odds(self) -> float:
        return equalized_odds(self.rates)

    @property
    def accuracy(self) -> float:
        return float((self.predictions.preds == self.predictions.labels).mean() * 100.0)

    def to_dict(self) -> Dict:
        return {
            'schema_version': '1.0',
            'created': datetime.now().isoformat(),
            'target_attribute': self.target_attribute,
            'group_attribute': self.group_attribute,
            'rates': {name: rates.to_dict() for name, rates in self.rates.items()},
            'equality_of_opportunity': self.equality_of_opportunity,
            'equalized_odds': self.equalized_odds,
            'accuracy': self.accuracy,
            'set_sizes': dict(self.set_sizes),
            'config': dict(self.config),
        }

    def save(self, out_dir: Union[str, Path]) -> Path:
        """Write fairness_report.json and predictions.csv"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        document = self.to_dict()
        validate_report(document, FAIRNESS_SCHEMA)
        path = out_dir / 'fairness_report.json'
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(document, f, indent=2)
        self.predictions.to_csv(out_dir / 'predictions.csv')
        return path

    def format_table(self) -> str:
        lines = [f"{self.target_attribute} by {self.group_attribute}",
                 f"{'group':<10}{'TPR':>10}{'FPR':>10}"]
        for name, rates in self.rates.items():
            lines.append(f"{name:<10}{rates.tpr:>10.2f}{rates.fpr:>10.2f}")
        lines.append(f"Eq.Opp.   {self.equality_of_opportunity:.2f}")
        lines.append(f"Odds      {self.equalized_odds:.2f}")
        lines.append(f"Accuracy  {self.accuracy:.2f}")
        return '\n'.join(lines)


def run_fair_classification(train_records: Sequence[DatasetRecord], test_records: Sequence[DatasetRecord],
                            attribute_names: Sequence[str], config: Optional[FairClassifyConfig] = None,
                            val_records: Sequence[DatasetRecord] = (),
                            device: str = 'cpu') -> Tuple[FairnessReport, AttributeClassifier]:
    """
    Train on one attribute and measure group fairness on the test split

    Args:
        train_records: Training records (possibly augmented)
        test_records: Held-out records with group labels
        attribute_names: Names of the target attribute columns
        config: Experiment settings; config.target_attribute picks the column
        val_records: Optional validation records
        device: Torch device

    Returns:
        Tuple of (FairnessReport, trained classifier)
    """
    config = config or FairClassifyConfig()
    if config.target_attribute not in attribute_names:
        raise ConfigError('target_attribute', f"unknown attribute '{config.target_attribute}', "
                                              f"valid names: {', '.join(attribute_names)}")
    index = list(attribute_names).index(config.target_attribute)
    if not test_records:
        raise DataFormatError("no test records for the fairness report")

    model, _ = train_attribute_classifier(train_records, [index], config, val_records, device)

    groups = group_labels(test_records, config.group_attribute)
    keep = [i for i, g in enumerate(groups) if g is not None]
    if len(keep) < len(test_records):
        logging.warning(f"{len(test_records) - len(keep)} test records lack a {config.group_attribute} label "
                        f"and are left out of the fairness report")
    kept = [test_records[i] for i in keep]
    images, attrs, _, _ = records_to_tensors(kept)
    preds = (predict_logits(model, images)[:, 0] > 0).long().numpy()
    predictions = GroupedPredictions(
        preds=preds,
        labels=attrs[:, index].long().numpy(),
        groups=np.array([groups[i] for i in keep], dtype=object),
        ids=[r.filename or str(i) for i, r in zip(keep, kept)],
    )
    report = FairnessReport(
        target_attribute=config.target_attribute,
        group_attribute=config.group_attribute,
        predictions=predictions,
        set_sizes={'train': len(train_records), 'val': len(val_records), 'test': len(kept)},
        config=config.to_dict(),
    )
    logging.info(f"Fair classification on '{config.target_attribute}': "
                 f"Eq.Opp.={report.equality_of_opportunity:.2f} Odds={report.equalized_odds:.2f} "
                 f"accuracy={report.accuracy:.2f}")
    return report, model


def augment_records(generator: Callable, records: Sequence[DatasetRecord], target_attribute_index: int,
                    policy: str = 'union', batch_size: int = 64) -> List[DatasetRecord]:
    """
    Build G(O) by flipping the target attribute of every record through the translator

    Args:
        generator: Trained Generator or callable (images, attrs) -> images
        records: Original training records O
        target_attribute_index: Column flipped in each translation
        policy: 'union' returns O followed by G(O), 'generated' returns G(O) alone
        batch_size: Translation chunk size

    Returns:
        Augmented record list; generated records keep protected labels and domain
    """
    if policy not in AUGMENT_POLICIES:
        raise ConfigError('augment_policy', f"must be one of {', '.join(AUGMENT_POLICIES)}")
    if not records:
        return []
    images, attrs, _, _ = records_to_tensors(records)
    if not 0 <= target_attribute_index < attrs.shape[1]:
        raise ShapeError(f"attribute index {target_attribute_index} out of range for {attrs.shape[1]} attributes")
    a_t = attrs.clone()
    a_t[:, target_attribute_index] = 1 - a_t[:, target_attribute_index]
    translated = translate_images(generator, images, a_t, batch_size).numpy()

    generated = []
    for i, record in enumerate(records):
        stem = Path(record.filename).stem if record.filename else f"record_{i:06d}"
        sign = '+' if a_t[i, target_attribute_index] > 0 else '-'
        generated.append(record.with_image(
            translated[i],
            target_attrs=a_t[i].long().numpy(),
            filename=f"{stem}_gen{sign}{target_attribute_index}.png",
        ))
    logging.info(f"Translated {len(generated)} records (policy '{policy}')")
    if policy == 'generated':
        return generated
    return list(records) + generated
