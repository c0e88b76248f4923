"""
Evaluation metrics
Gaussian statistics, Frechet distances (FPAD / FID), KID, confusion rates and group
fairness gaps, target attribute accuracy
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import torch
from scipy import linalg

from src.errors import FairnessMetricError, MetricInputError
from src.pac import PacModel, extract_protected_features

GENDER_GROUPS = {0: 'female', 1: 'male'}
KID_SCALE = 100.0


@dataclass
class GaussianStats:
    """Mean vector and covariance matrix of an embedding set"""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise MetricInputError(f"covariance shape {self.cov.shape} does not match mean dimension {d}")
        if not (np.isfinite(self.mean).all() and np.isfinite(self.cov).all()):
            raise MetricInputError("Gaussian statistics contain non-finite values")
        if not np.allclose(self.cov, self.cov.T, rtol=0.0, atol=1e-8):
            raise MetricInputError("covariance is not symmetric")
        eigvals = linalg.eigvalsh(self.cov)
        if eigvals.size and eigvals.min() < -1e-6 * max(1.0, float(np.abs(eigvals).max())):
            raise MetricInputError(f"covariance is not positive semi-definite (min eigenvalue {eigvals.min():.3g})")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def gaussian_stats(features) -> GaussianStats:
    """
    Fit mean and unbiased covariance to N x D features

    Args:
        features: (N, D) array or tensor, N >= 2

    Returns:
        GaussianStats with symmetrized covariance
    """
    if isinstance(features, torch.Tensor):
        features = features.detach().cpu().numpy()
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise MetricInputError(f"expected an (N, D) feature matrix, got shape {features.shape}")
    if features.shape[0] < 2:
        raise MetricInputError(f"covariance needs at least 2 samples, got {features.shape[0]}")
    if not np.isfinite(features).all():
        raise MetricInputError("features contain non-finite values")
    mean = features.mean(axis=0)
    cov = np.atleast_2d(np.cov(features, rowvar=False, ddof=1))
    return GaussianStats(mean, (cov + cov.T) / 2)


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = linalg.eigh(matrix)
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """Tr((AB)^(1/2)) as Tr((A^(1/2) B A^(1/2))^(1/2)) with negative eigenvalues clamped"""
    root_a = _sqrt_psd(a)
    inner = root_a @ b @ root_a
    inner = (inner + inner.T) / 2
    eigvals = linalg.eigvalsh(inner)
    # eigenvalues within rounding noise of zero count as zero
    tolerance = np.finfo(np.float64).eps * len(eigvals) * max(0.0, float(eigvals.max(initial=0.0)))
    return float(np.sqrt(eigvals[eigvals > tolerance]).sum())


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """
    ||M_a - M_b||^2 + Tr(C_a + C_b - 2 (C_a C_b)^(1/2)), clamped to >= 0

    The trace term is averaged over both product orders, so d(a, b) == d(b, a).
    """
    if a.dim != b.dim:
        raise MetricInputError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    tr_covmean = 0.5 * (_trace_sqrt_product(a.cov, b.cov) + _trace_sqrt_product(b.cov, a.cov))
    distance = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_covmean)
    if not np.isfinite(distance):
        raise MetricInputError("Frechet distance is not finite")
    return max(0.0, distance)


class ImageEmbedder:
    """images (B, 3, H, W) in [-1, 1] -> (B, D) float64 embeddings"""

    embedder_id = 'base'

    def embed(self, images: torch.Tensor) -> np.ndarray:
        raise NotImplementedError


class PacEmbedder(ImageEmbedder):
    """Flattened PAC encoder features; not comparable to Inception-based values"""

    embedder_id = 'pac-encoder'

    def __init__(self, pac: PacModel, batch_size: int = 64, allow_untrained: bool = False):
        self.pac = pac
        self.batch_size = batch_size
        self.allow_untrained = allow_untrained

    @property
    def dim(self) -> int:
        return self.pac.feature_dim

    def embed(self, images: torch.Tensor) -> np.ndarray:
        device = next(self.pac.parameters()).device
        parts = [extract_protected_features(self.pac, images[i:i + self.batch_size].to(device),
                                            allow_untrained=self.allow_untrained).cpu()
                 for i in range(0, len(images), self.batch_size)]
        if not parts:
            return np.empty((0, self.dim))
        return torch.cat(parts).double().numpy()


def fid_from_embeddings(real: np.ndarray, generated: np.ndarray) -> float:
    return frechet_distance(gaussian_stats(real), gaussian_stats(generated))


def fpad(pac: PacModel, real_images: torch.Tensor, generated_images: torch.Tensor,
         batch_size: int = 64) -> float:
    """Frechet distance between PAC features of real and generated images"""
    if len(real_images) == 0 or len(generated_images) == 0:
        raise MetricInputError("FPAD needs non-empty real and generated sets")
    embedder = PacEmbedder(pac, batch_size)
    smaller = min(len(real_images), len(generated_images))
    if smaller < embedder.dim:
        logging.warning(f"FPAD on {smaller} samples with feature dimension {embedder.dim}; "
                        f"covariances are rank-deficient")
    return fid_from_embeddings(embedder.embed(real_images), embedder.embed(generated_images))


def fid(embedder: ImageEmbedder, real_images: torch.Tensor, generated_images: torch.Tensor) -> float:
    """Frechet distance over a general-purpose embedder"""
    return fid_from_embeddings(embedder.embed(real_images), embedder.embed(generated_images))


def _canonical_rows(x: np.ndarray) -> np.ndarray:
    return x[np.lexsort(x.T[::-1])] if x.shape[0] > 1 else x


def _polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """
    Unbiased MMD^2 with the cubic polynomial kernel over paired samples

    Sums k(x_i,x_j) + k(y_i,y_j) - k(x_i,y_j) - k(x_j,y_i) over i != j, divided by m(m-1).
    """
    m = x.shape[0]
    if y.shape[0] != m or m < 2:
        raise MetricInputError(f"MMD needs two equal-size sets of at least 2 rows, got {m} and {y.shape[0]}")
    k_xx = _polynomial_kernel(x, x)
    k_yy = _polynomial_kernel(y, y)
    k_xy = _polynomial_kernel(x, y)
    off = ~np.eye(m, dtype=bool)
    total = k_xx[off].sum() + k_yy[off].sum() - k_xy[off].sum() - k_xy.T[off].sum()
    return float(total / (m * (m - 1)))


def kid_from_embeddings(real: np.ndarray, generated: np.ndarray, num_subsets: int = 100,
                        subset_size: int = 1000, seed: int = 0) -> Tuple[float, float]:
    """
    Mean and std of subset MMD^2, scaled by 100

    Rows are put in a canonical order first, so the result does not depend on sample order.
    """
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if real.ndim != 2 or generated.ndim != 2 or real.shape[1] != generated.shape[1]:
        raise MetricInputError(f"embedding shapes {real.shape} and {generated.shape} are incompatible")
    if subset_size > min(len(real), len(generated)):
        raise MetricInputError(f"subset_size {subset_size} exceeds set size {min(len(real), len(generated))}")
    if subset_size < 2:
        raise MetricInputError("subset_size must be at least 2")

    real = _canonical_rows(real)
    generated = _canonical_rows(generated)
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(num_subsets):
        ix = np.sort(rng.choice(len(real), subset_size, replace=False))
        iy = np.sort(rng.choice(len(generated), subset_size, replace=False))
        values.append(mmd2_unbiased(real[ix], generated[iy]))
    values = np.asarray(values) * KID_SCALE
    return float(values.mean()), float(values.std())


def kid(embedder: ImageEmbedder, real_images: torch.Tensor, generated_images: torch.Tensor,
        num_subsets: int = 100, subset_size: int = 1000, seed: int = 0) -> Tuple[float, float]:
    return kid_from_embeddings(embedder.embed(real_images), embedder.embed(generated_images),
                               num_subsets, subset_size, seed)


@dataclass
class GroupRates:
    tpr: float
    fpr: float

    def to_dict(self) -> Dict[str, float]:
        return {'tpr': self.tpr, 'fpr': self.fpr}


@dataclass
class GroupedPredictions:
    """Per-sample predicted label, true label and demographic group"""

    preds: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    ids: Optional[List[str]] = None

    def __post_init__(self):
        self.preds = np.asarray(self.preds, dtype=np.int64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.groups = np.asarray(self.groups, dtype=object).reshape(-1)
        if not (len(self.preds) == len(self.labels) == len(self.groups)):
            raise MetricInputError("preds, labels and groups must have equal length")
        for name, values in (('pred', self.preds), ('label', self.labels)):
            if not np.isin(values, (0, 1)).all():
                raise MetricInputError(f"{name} values must be 0 or 1")
        if self.ids is None:
            self.ids = [str(i) for i in range(len(self.preds))]

    @property
    def group_names(self) -> List[str]:
        return sorted({str(g) for g in self.groups})

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> 'GroupedPredictions':
        """Read an `id,pred,label,group` dump"""
        ids, preds, labels, groups = [], [], [], []
        with open(path, 'r', newline='', encoding='utf-8') as f:
            reader = csv.DictReader(f)
            missing = {'id', 'pred', 'label', 'group'} - set(reader.fieldnames or [])
            if missing:
                raise MetricInputError(f"prediction dump lacks column(s) {', '.join(sorted(missing))}")
            for row in reader:
                ids.append(row['id'])
                preds.append(int(row['pred']))
                labels.append(int(row['label']))
                groups.append(row['group'])
        return cls(np.array(preds), np.array(labels), np.array(groups, dtype=object), ids)

    def to_csv(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=['id', 'pred', 'label', 'group'])
            writer.writeheader()
            for row in zip(self.ids, self.preds, self.labels, self.groups):
                writer.writerow(dict(zip(('id', 'pred', 'label', 'group'), row)))


def confusion_rates(preds: GroupedPredictions, group: str, percent: bool = False) -> Tuple[float, float]:
    """
    TPR = TP/(TP+FN) and FPR = FP/(FP+TN) within one group

    Returns:
        Tuple of (TPR, FPR), fractions or percentage points
    """
    in_group = preds.groups == group
    p, y = preds.preds[in_group], preds.labels[in_group]
    positives = int((y == 1).sum())
    negatives = int((y == 0).sum())
    if positives == 0:
        raise FairnessMetricError(f"group '{group}' has no positive samples; TPR undefined")
    if negatives == 0:
        raise FairnessMetricError(f"group '{group}' has no negative samples; FPR undefined")
    scale = 100.0 if percent else 1.0
    tpr = ((p == 1) & (y == 1)).sum() / positives
    fpr = ((p == 1) & (y == 0)).sum() / negatives
    return float(tpr * scale), float(fpr * scale)


def group_rates(preds: GroupedPredictions, percent: bool = True) -> Dict[str, GroupRates]:
    """TPR/FPR of every group, in percentage points by default"""
    return {g: GroupRates(*confusion_rates(preds, g, percent)) for g in preds.group_names}


def _two_groups(source: Union[GroupedPredictions, Mapping[str, GroupRates]]) -> Tuple[GroupRates, GroupRates]:
    rates = group_rates(source) if isinstance(source, GroupedPredictions) else dict(source)
    if len(rates) != 2:
        raise FairnessMetricError(f"fairness gaps need exactly two groups, found {sorted(rates)}")
    first, second = (rates[k] for k in sorted(rates))
    return first, second


def equality_of_opportunity(source: Union[GroupedPredictions, Mapping[str, GroupRates]]) -> float:
    """|TPR_a - TPR_b| between the two groups"""
    a, b = _two_groups(source)
    return abs(a.tpr - b.tpr)


def equalized_odds(source: Union[GroupedPredictions, Mapping[str, GroupRates]]) -> float:
    """Half the sum of the absolute FPR and TPR gaps"""
    a, b = _two_groups(source)
    return 0.5 * (abs(a.fpr - b.fpr) + abs(a.tpr - b.tpr))


def attribute_accuracy_from_bits(pred_bits, target_labels) -> float:
    """Mean over attributes of per-attribute binary accuracy"""
    pred_bits = np.asarray(pred_bits).astype(np.int64)
    target_labels = np.asarray(target_labels).astype(np.int64)
    if pred_bits.shape != target_labels.shape or pred_bits.ndim != 2:
        raise MetricInputError(f"prediction {pred_bits.shape} and label {target_labels.shape} shapes differ")
    if pred_bits.shape[0] == 0:
        raise MetricInputError("attribute accuracy needs at least one sample")
    return float((pred_bits == target_labels).mean(axis=0).mean())


@torch.no_grad()
def attribute_accuracy(classifier: Callable[[torch.Tensor], torch.Tensor], images: torch.Tensor,
                       target_labels, batch_size: int = 64) -> float:
    """
    Accuracy of a logit-producing classifier against target bits

    Args:
        classifier: images -> (B, K) logits (positive means attribute present)
        images: Image batch
        target_labels: (B, K) bits
        batch_size: Evaluation chunk size
    """
    logits = [classifier(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    pred_bits = (torch.cat(logits) > 0).long().cpu().numpy()
    labels = target_labels.cpu().numpy() if isinstance(target_labels, torch.Tensor) else target_labels
    return attribute_accuracy_from_bits(pred_bits, labels)
