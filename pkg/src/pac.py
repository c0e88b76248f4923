"""
Protected Attribute Classifier (PAC)
Shared conv encoder with gender/age/race heads and a domain head behind a gradient
reversal layer; its flattened last-layer feature is the protected-attribute embedding
"""
import copy
import logging
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.autograd import Function

from src.checkpoint import load_checkpoint, save_checkpoint
from src.config_schema import PacConfig
from src.data import DatasetRecord, batch_indices, records_to_tensors
from src.errors import ConfigError, DataFormatError, PacNotTrainedError, ShapeError

HEADS = ('gender', 'age', 'race', 'domain')


class GradientReversalFunction(Function):
    """Identity forward; backward multiplies the incoming gradient by -lambda"""

    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grads):
        return -ctx.lam * grads, None


def grad_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Apply the gradient reversal layer with scale `lam` (>= 0)"""
    if lam < 0 or not math.isfinite(lam):
        raise ConfigError('grl_lambda', f"must be a finite value >= 0, got {lam}")
    return GradientReversalFunction.apply(x, float(lam))


class PacOutputs(NamedTuple):
    h: torch.Tensor
    gender: torch.Tensor
    age: torch.Tensor
    race: torch.Tensor
    domain: torch.Tensor


class PacModel(nn.Module):
    """Four stride-2 conv blocks, flattened to D, feeding four linear heads"""

    def __init__(self, resolution: int = 64, base_channels: int = 32,
                 cardinalities: Sequence[int] = (2, 6, 5), grl_lambda: float = 1.0):
        super().__init__()
        if resolution % 16 != 0:
            raise ShapeError(f"PAC resolution must be a multiple of 16, got {resolution}")
        self.resolution = resolution
        self.base_channels = base_channels
        self.cardinalities = tuple(int(c) for c in cardinalities)
        self.grl_lambda = grl_lambda
        self.trained = False

        blocks = OrderedDict()
        in_channels = 3
        for i in range(4):
            out_channels = base_channels * 2 ** i
            blocks[f"block{i + 1}"] = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, kernel_size=4, stride=2, padding=1),
                nn.BatchNorm2d(out_channels),
                nn.LeakyReLU(0.2),
            )
            in_channels = out_channels
        self.blocks = nn.ModuleDict(blocks)

        self.feature_dim = in_channels * (resolution // 16) ** 2
        self.head_gender = nn.Linear(self.feature_dim, self.cardinalities[0])
        self.head_age = nn.Linear(self.feature_dim, self.cardinalities[1])
        self.head_race = nn.Linear(self.feature_dim, self.cardinalities[2])
        self.head_domain = nn.Linear(self.feature_dim, 2)

    @property
    def layer_names(self) -> List[str]:
        return list(self.blocks.keys())

    def check_input(self, images: torch.Tensor):
        expected = (3, self.resolution, self.resolution)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError(f"PAC expects images of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                             f"got {tuple(images.shape)}")

    def feature_maps(self, images: torch.Tensor) -> 'OrderedDict[str, torch.Tensor]':
        """Activations of every encoder block, in order"""
        self.check_input(images)
        maps = OrderedDict()
        x = images
        for name, block in self.blocks.items():
            x = block(x)
            maps[name] = x
        return maps

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return next(reversed(self.feature_maps(images).values())).flatten(1)

    def forward(self, images: torch.Tensor) -> PacOutputs:
        h = self.encode(images)
        return PacOutputs(
            h=h,
            gender=self.head_gender(h),
            age=self.head_age(h),
            race=self.head_race(h),
            domain=self.head_domain(grad_reverse(h, self.grl_lambda)),
        )

    def header(self) -> Dict:
        return {
            'D': self.feature_dim,
            'cardinalities': list(self.cardinalities),
            'resolution': self.resolution,
            'base_channels': self.base_channels,
            'grl_lambda': self.grl_lambda,
            'trained': self.trained,
        }

    @classmethod
    def from_config(cls, config: PacConfig) -> 'PacModel':
        return cls(config.resolution, config.base_channels, config.cardinalities, config.grl_lambda)


def pac_forward(model: PacModel, images: torch.Tensor) -> PacOutputs:
    return model(images)


def pac_loss(outputs: PacOutputs, labels: torch.Tensor, domain_labels: torch.Tensor,
             mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    Masked cross-entropy over the four heads

    The domain term enters with a positive sign; the reversal layer negates (and
    scales by lambda) its gradient into the encoder.

    Args:
        outputs: PacOutputs of a batch
        labels: (B, 3) gender/age/race class indices, -1 where absent
        domain_labels: (B,) domain indices, -1 where absent
        mask: Optional (B, 4) availability; defaults to the non-negative labels

    Returns:
        Tuple of (total, per_term) where total is the sum of the per-term values
    """
    targets = torch.cat([labels, domain_labels.view(-1, 1)], dim=1)
    if mask is None:
        mask = targets >= 0
    mask = mask.bool() & (targets >= 0)
    if not mask.any():
        raise DataFormatError("every PAC loss term is masked out in this batch")

    logits = (outputs.gender, outputs.age, outputs.race, outputs.domain)
    per_term = {}
    for column, (name, head_logits) in enumerate(zip(HEADS, logits)):
        rows = mask[:, column]
        if rows.any():
            per_term[name] = F.cross_entropy(head_logits[rows], targets[rows, column])
        else:
            per_term[name] = head_logits.sum() * 0.0
    total = per_term['gender'] + per_term['age'] + per_term['race'] + per_term['domain']
    return total, per_term


def lambda_at(progress: float, config: PacConfig) -> float:
    """Reversal scale at training progress p in [0, 1]"""
    if config.lambda_schedule == 'dann':
        return config.grl_lambda * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)
    return config.grl_lambda


def head_accuracy(logits: torch.Tensor, targets: torch.Tensor) -> Optional[float]:
    """Accuracy over rows with a label, None when no row has one"""
    rows = targets >= 0
    if not rows.any():
        return None
    return (logits[rows].argmax(dim=1) == targets[rows]).float().mean().item()


@torch.no_grad()
def evaluate_pac(model: PacModel, images: torch.Tensor, labels: torch.Tensor, domains: torch.Tensor,
                 batch_size: int = 256) -> Dict[str, Optional[float]]:
    """Per-head accuracies in eval mode"""
    was_training = model.training
    model.eval()
    outputs = [pac_forward(model, images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    model.train(was_training)
    merged = PacOutputs(*[torch.cat(parts) for parts in zip(*outputs)])
    targets = torch.cat([labels, domains.view(-1, 1)], dim=1)
    return {f"{name}_acc": head_accuracy(logits, targets[:, i])
            for i, (name, logits) in enumerate(zip(HEADS, merged[1:]))}


def _split(count: int, fraction: float, generator: torch.Generator) -> Tuple[torch.Tensor, torch.Tensor]:
    order = torch.randperm(count, generator=generator)
    n_val = int(round(count * fraction))
    if fraction > 0 and count > 1:
        n_val = min(max(n_val, 1), count - 1)
    return order[n_val:], order[:n_val]


def train_pac(config: PacConfig, source_data: Sequence[DatasetRecord],
              target_data: Sequence[DatasetRecord] = (),
              progress_callback: Optional[Callable] = None,
              device: str = 'cpu') -> Tuple[PacModel, List[Dict]]:
    """
    Train the PAC with domain-adversarial reversal

    Source records supply protected labels and domain 0. Target records supply only the
    domain term (domain 1); their protected labels, when annotated, are used for reporting.

    Args:
        config: PAC settings
        source_data: Labelled source-domain records
        target_data: Target-domain records (labels withheld from training)
        progress_callback: Called with (epoch, total_epochs, history_entry)
        device: Torch device

    Returns:
        Tuple of (best-validation model in eval mode, per-epoch history)
    """
    if not source_data or all(r.protected.is_empty for r in source_data):
        logging.error("PAC training needs source records with protected labels")
        raise DataFormatError("no labelled source data for PAC training")

    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)

    src_images, _, src_labels, _ = records_to_tensors(source_data)
    src_domains = torch.zeros(len(source_data), dtype=torch.int64)
    if src_images.shape[-1] != config.resolution:
        raise ShapeError(f"source images are {src_images.shape[-1]}px, PAC expects {config.resolution}px")
    if target_data:
        tgt_images, _, tgt_labels, _ = records_to_tensors(target_data)
        tgt_domains = torch.ones(len(target_data), dtype=torch.int64)
    else:
        tgt_images = torch.empty(0, *src_images.shape[1:])
        tgt_labels = torch.empty(0, 3, dtype=torch.int64)
        tgt_domains = torch.empty(0, dtype=torch.int64)

    src_train, src_val = _split(len(src_images), config.val_fraction, generator)
    tgt_train, tgt_val = _split(len(tgt_images), config.val_fraction, generator) if len(tgt_images) else (
        torch.empty(0, dtype=torch.int64), torch.empty(0, dtype=torch.int64))

    model = PacModel.from_config(config).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    has_target = len(tgt_train) > 0
    per_domain = max(1, config.batch_size // 2) if has_target else config.batch_size
    steps_per_epoch = math.ceil(len(src_train) / per_domain)
    total_steps = steps_per_epoch * config.epochs
    withheld = torch.full((per_domain, 3), -1, dtype=torch.int64)

    history = []
    best_score = -1.0
    best_state = None
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        sums = {name: 0.0 for name in HEADS + ('total',)}
        src_batches = batch_indices(len(src_train), per_domain, generator)
        tgt_order = tgt_train[torch.randperm(len(tgt_train), generator=generator)] if has_target else None

        used = 0
        for b, batch in enumerate(src_batches):
            idx = src_train[batch]
            images = src_images[idx]
            labels = src_labels[idx]
            domains = src_domains[idx]
            if has_target:
                # cycle through the shuffled target set
                positions = (torch.arange(len(idx)) + b * per_domain) % len(tgt_order)
                t_idx = tgt_order[positions]
                images = torch.cat([images, tgt_images[t_idx]])
                labels = torch.cat([labels, withheld[:len(t_idx)]])
                domains = torch.cat([domains, tgt_domains[t_idx]])
            if len(images) < 2:
                # batch norm needs two samples at a 1x1 bottleneck
                continue

            model.grl_lambda = lambda_at(step / max(1, total_steps - 1), config)
            outputs = pac_forward(model, images.to(device))
            total, per_term = pac_loss(outputs, labels.to(device), domains.to(device))
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            step += 1
            used += 1
            sums['total'] += total.item()
            for name, value in per_term.items():
                sums[name] += value.item()

        entry = {'epoch': epoch, 'lambda': model.grl_lambda}
        entry.update({f"loss_{k}": v / max(1, used) for k, v in sums.items()})

        val_images = torch.cat([src_images[src_val], tgt_images[tgt_val]])
        val_labels = torch.cat([src_labels[src_val], tgt_labels[tgt_val].clone().fill_(-1)])
        val_domains = torch.cat([src_domains[src_val], tgt_domains[tgt_val]])
        if len(val_images) == 0:
            val_images, val_labels, val_domains = src_images[src_train], src_labels[src_train], src_domains[src_train]
        entry.update(evaluate_pac(model, val_images.to(device), val_labels.to(device), val_domains.to(device)))
        if len(tgt_val) and (tgt_labels[tgt_val] >= 0).any():
            target_acc = evaluate_pac(model, tgt_images[tgt_val].to(device), tgt_labels[tgt_val].to(device),
                                      tgt_domains[tgt_val].to(device))
            entry.update({f"target_{k}": target_acc[k] for k in ('gender_acc', 'age_acc', 'race_acc')})

        present = [entry[f"{name}_acc"] for name in ('gender', 'age', 'race') if entry[f"{name}_acc"] is not None]
        score = sum(present) / len(present) if present else 0.0
        if score > best_score:
            best_score = score
            best_state = copy.deepcopy(model.state_dict())
            entry['best'] = True
        history.append(entry)

        logging.info(f"PAC epoch {epoch}/{config.epochs}: loss={entry['loss_total']:.4f} "
                     f"gender={_fmt(entry['gender_acc'])} age={_fmt(entry['age_acc'])} "
                     f"race={_fmt(entry['race_acc'])} domain={_fmt(entry['domain_acc'])}")
        if progress_callback:
            progress_callback(epoch, config.epochs, entry)

    model.load_state_dict(best_state)
    model.trained = True
    model.eval()
    return model, history


def _fmt(value: Optional[float]) -> str:
    return 'n/a' if value is None else f"{value:.3f}"


def freeze(model: nn.Module) -> nn.Module:
    """Eval mode and no parameter gradients"""
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    return model


def extract_protected_features(model: PacModel, images: torch.Tensor, allow_untrained: bool = False,
                               differentiable: bool = False) -> torch.Tensor:
    """
    Flattened encoder features in eval mode

    Args:
        model: PAC
        images: (B, 3, R, R) batch
        allow_untrained: Permit extraction from a PAC that was never trained
        differentiable: Keep the graph to the images (PAC weights still get no update)

    Returns:
        (B, D) embedding
    """
    if not model.trained and not allow_untrained:
        raise PacNotTrainedError("PAC has not been trained; pass allow_untrained=True to use it anyway")
    model.check_input(images)
    was_training = model.training
    model.eval()
    try:
        if differentiable:
            return model.encode(images)
        with torch.no_grad():
            return model.encode(images)
    finally:
        model.train(was_training)


def save_pac(model: PacModel, path: Union[str, Path], history: Optional[List[Dict]] = None) -> Path:
    return save_checkpoint(path, 'pac', model.header(),
                           {'state_dict': model.state_dict(), 'history': history or []})


def load_pac(path: Union[str, Path], map_location: str = 'cpu') -> PacModel:
    """Rebuild a PAC from its checkpoint (frozen)"""
    header, payload = load_checkpoint(path, 'pac', map_location)
    model = PacModel(header['resolution'], header['base_channels'], header['cardinalities'], header['grl_lambda'])
    model.load_state_dict(payload['state_dict'])
    model.trained = bool(header.get('trained', False))
    if model.feature_dim != header['D']:
        raise ShapeError(f"PAC checkpoint declares D={header['D']}, rebuilt model has {model.feature_dim}")
    return freeze(model)

