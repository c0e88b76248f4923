"""
Configuration schema for Fair Translate
Typed config sections with validation and JSON-friendly (de)serialization
"""
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from src.errors import ConfigError

PROTECTED_NAMES = ('gender', 'age', 'race')
PROTECTED_VISUALS = ('hue_band', 'border_tone', 'corner_tone')
TARGET_VISUALS = ('glyph', 'stripe')
TARGET_POLICIES = ('flip', 'random', 'permute')
LAMBDA_SCHEDULES = ('constant', 'dann')
AUGMENT_POLICIES = ('union', 'generated')

CONFIG_VERSION = '1.0'


def _require(condition: bool, field_name: str, message: str):
    if not condition:
        raise ConfigError(field_name, message)


def _check_ratios(ratios, field_name: str):
    _require(len(ratios) == 3, field_name, "expected three ratios (train, val, test)")
    _require(all(r >= 0 for r in ratios), field_name, "ratios must be non-negative")
    _require(abs(sum(ratios) - 1.0) < 1e-6, field_name, "ratios must sum to 1")


class SchemaMixin:
    """to_dict / from_dict for config dataclasses"""

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization"""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]):
        """Create from dictionary, rejecting unknown keys"""
        if data is None:
            return cls()
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{cls.__name__}.{unknown[0]}", "unknown field")
        return cls(**data)

    def updated(self, **overrides):
        """Copy with overrides applied (validated again)"""
        return replace(self, **overrides)


@dataclass
class FactorSpec(SchemaMixin):
    """One generated attribute and the visual factor that renders it"""

    name: str
    cardinality: int = 2
    visual: str = 'glyph'


def default_protected_factors() -> List[FactorSpec]:
    return [
        FactorSpec('gender', 2, 'hue_band'),
        FactorSpec('age', 6, 'border_tone'),
        FactorSpec('race', 5, 'corner_tone'),
    ]


def default_target_factors() -> List[FactorSpec]:
    return [
        FactorSpec('attractive', 2, 'glyph'),
        FactorSpec('blond_hair', 2, 'stripe'),
        FactorSpec('bags_under_eyes', 2, 'glyph'),
        FactorSpec('bald', 2, 'stripe'),
        FactorSpec('big_nose', 2, 'glyph'),
    ]


@dataclass
class SyntheticSpec(SchemaMixin):
    """Procedural dataset description"""

    resolution: int = 64
    num_samples: int = 2000
    protected_generators: List[FactorSpec] = field(default_factory=default_protected_factors)
    target_generators: List[FactorSpec] = field(default_factory=default_target_factors)
    correlation: float = 0.0
    seed: int = 0
    domain_hue_shift: float = 0.3
    target_domain_fraction: float = 0.0
    noise: float = 0.02
    correlated_targets: Optional[List[str]] = None
    workers: int = 1

    def __post_init__(self):
        self.protected_generators = [
            f if isinstance(f, FactorSpec) else FactorSpec.from_dict(f) for f in self.protected_generators
        ]
        self.target_generators = [
            f if isinstance(f, FactorSpec) else FactorSpec.from_dict(f) for f in self.target_generators
        ]
        self.validate()

    def validate(self):
        _require(self.resolution >= 16, 'resolution', "must be at least 16")
        _require(self.resolution % 4 == 0, 'resolution', "must be a multiple of 4")
        _require(self.num_samples >= 1, 'num_samples', "must be positive")
        _require(isinstance(self.correlation, (int, float)) and 0.0 <= self.correlation <= 1.0,
                 'correlation', "must lie in [0, 1]")
        _require(self.seed >= 0, 'seed', "must be an unsigned integer")
        _require(0.0 <= self.domain_hue_shift < 0.5, 'domain_hue_shift', "must lie in [0, 0.5)")
        _require(0.0 <= self.target_domain_fraction <= 1.0, 'target_domain_fraction', "must lie in [0, 1]")
        _require(0.0 <= self.noise <= 0.1, 'noise', "must lie in [0, 0.1]")
        _require(self.workers >= 1, 'workers', "must be positive")
        _require(self.seed >= 0, 'seed', "must be an unsigned integer")

        _require(len(self.protected_generators) >= 1, 'protected_generators', "at least one factor needed")
        _require(len(self.target_generators) >= 1, 'target_generators', "at least one factor needed")
        seen_visuals = set()
        for i, factor in enumerate(self.protected_generators):
            name = f"protected_generators[{i}]"
            _require(factor.name in PROTECTED_NAMES, f"{name}.name",
                     f"must be one of {', '.join(PROTECTED_NAMES)}")
            _require(factor.cardinality >= 2, f"{name}.cardinality", "must be at least 2")
            _require(factor.visual in PROTECTED_VISUALS, f"{name}.visual",
                     f"must be one of {', '.join(PROTECTED_VISUALS)}")
            _require(factor.visual not in seen_visuals, f"{name}.visual", "visual factor already used")
            seen_visuals.add(factor.visual)
        _require('hue_band' in seen_visuals, 'protected_generators', "one factor must use 'hue_band'")
        for i, factor in enumerate(self.target_generators):
            name = f"target_generators[{i}]"
            _require(factor.cardinality == 2, f"{name}.cardinality", "target attributes are binary")
            _require(factor.visual in TARGET_VISUALS, f"{name}.visual",
                     f"must be one of {', '.join(TARGET_VISUALS)}")
        unit = self.resolution // 16
        _require(len(self.target_generators) <= 10 * unit, 'target_generators',
                 f"at most {10 * unit} targets fit at resolution {self.resolution}")
        names = [f.name for f in self.protected_generators + self.target_generators]
        _require(len(set(names)) == len(names), 'target_generators', "factor names must be unique")
        if self.correlated_targets is not None:
            target_names = {f.name for f in self.target_generators}
            for name in self.correlated_targets:
                _require(name in target_names, 'correlated_targets', f"unknown target '{name}'")

    @property
    def attribute_names(self) -> List[str]:
        return [f.name for f in self.target_generators]


@dataclass
class LoaderConfig(SchemaMixin):
    """How annotated image directories are read"""

    crop: Optional[int] = None
    out_size: int = 64
    split_ratios: Tuple[float, float, float] = (0.9, 0.05, 0.05)
    workers: int = 1
    random_crop: bool = True
    seed: int = 0

    def __post_init__(self):
        self.split_ratios = tuple(self.split_ratios)
        _require(self.out_size >= 16 and self.out_size % 4 == 0, 'out_size',
                 "must be a multiple of 4 and at least 16")
        _require(self.crop is None or self.crop >= 1, 'crop', "must be positive")
        _check_ratios(self.split_ratios, 'split_ratios')
        _require(self.workers >= 1, 'workers', "must be positive")
        _require(self.seed >= 0, 'seed', "must be an unsigned integer")


@dataclass
class PacConfig(SchemaMixin):
    """Protected attribute classifier training settings"""

    resolution: int = 64
    base_channels: int = 32
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 10
    grl_lambda: float = 1.0
    lambda_schedule: str = 'constant'
    val_fraction: float = 0.1
    seed: int = 0
    cardinalities: Tuple[int, int, int] = (2, 6, 5)

    def __post_init__(self):
        self.cardinalities = tuple(self.cardinalities)
        _require(self.resolution >= 16 and self.resolution % 16 == 0, 'resolution',
                 "must be a multiple of 16 (four stride-2 blocks)")
        _require(self.base_channels >= 1, 'base_channels', "must be positive")
        _require(self.lr > 0, 'lr', "must be positive")
        _require(self.batch_size >= 1, 'batch_size', "must be positive")
        _require(self.epochs >= 1, 'epochs', "must be positive")
        _require(self.grl_lambda >= 0 and math.isfinite(self.grl_lambda), 'grl_lambda', "must be >= 0")
        _require(self.lambda_schedule in LAMBDA_SCHEDULES, 'lambda_schedule',
                 f"must be one of {', '.join(LAMBDA_SCHEDULES)}")
        _require(0.0 <= self.val_fraction < 1.0, 'val_fraction', "must lie in [0, 1)")
        _require(len(self.cardinalities) == 3 and all(c >= 2 for c in self.cardinalities),
                 'cardinalities', "three cardinalities of at least 2 expected")


@dataclass
class LossWeights(SchemaMixin):
    """Weights of the generator objective terms and the gradient penalty"""

    w_adv: float = 1.0
    w_cls: float = 1.0
    w_rec: float = 10.0
    w_frl: float = 1.0
    w_pad: float = 1.0
    w_percept: float = 0.1
    w_gp: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            _require(isinstance(value, (int, float)) and math.isfinite(value) and value >= 0,
                     f.name, "must be a finite non-negative number")


@dataclass
class TrainConfig(SchemaMixin):
    """Translator training settings"""

    resolution: int = 64
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    lr_tac: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 16
    epochs: int = 20
    lr_decay_every: int = 8
    lr_decay_factor: float = 0.5
    critic_steps_per_gen: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_dir: str = 'checkpoints'
    run_id: str = 'run'
    gen_base_channels: int = 32
    num_res_blocks: int = 4
    latent_split: float = 0.5
    disc_base_channels: int = 32
    disc_layers: int = 5
    tac_hidden: int = 64
    target_policy: str = 'flip'
    content_layers: List[str] = field(default_factory=lambda: ['block2'])
    style_layers: List[str] = field(default_factory=lambda: ['block1', 'block2'])
    eval_batch: int = 64

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        self.content_layers = list(self.content_layers)
        self.style_layers = list(self.style_layers)
        _require(self.resolution >= 16 and self.resolution % 4 == 0, 'resolution',
                 "must be a multiple of 4 and at least 16")
        for name in ('lr_g', 'lr_d', 'lr_tac'):
            _require(getattr(self, name) > 0, name, "must be positive")
        _require(0.0 <= self.beta1 < 1.0, 'beta1', "must lie in [0, 1)")
        _require(0.0 <= self.beta2 < 1.0, 'beta2', "must lie in [0, 1)")
        _require(self.batch_size >= 1, 'batch_size', "must be positive")
        _require(self.epochs >= 1, 'epochs', "must be positive")
        _require(self.lr_decay_every >= 1, 'lr_decay_every', "must be positive")
        _require(0.0 < self.lr_decay_factor <= 1.0, 'lr_decay_factor', "must lie in (0, 1]")
        _require(self.critic_steps_per_gen >= 1, 'critic_steps_per_gen', "must be at least 1")
        _require(self.gen_base_channels >= 1, 'gen_base_channels', "must be positive")
        _require(self.num_res_blocks >= 0, 'num_res_blocks', "must be non-negative")
        latent_channels = 4 * self.gen_base_channels
        split = round(latent_channels * self.latent_split)
        _require(0 < split < latent_channels, 'latent_split', "both latent halves must be non-empty")
        _require(self.disc_base_channels >= 1, 'disc_base_channels', "must be positive")
        _require(self.disc_layers >= 1, 'disc_layers', "must be positive")
        _require(self.resolution % (2 ** self.disc_layers) == 0, 'disc_layers',
                 f"resolution {self.resolution} is not divisible by 2**{self.disc_layers}")
        _require(self.tac_hidden >= 1, 'tac_hidden', "must be positive")
        _require(self.target_policy in TARGET_POLICIES, 'target_policy',
                 f"must be one of {', '.join(TARGET_POLICIES)}")
        _require(bool(self.run_id) and '/' not in self.run_id, 'run_id', "must be a plain name")
        _require(self.eval_batch >= 1, 'eval_batch', "must be positive")

    @property
    def channels_tr(self) -> int:
        return round(4 * self.gen_base_channels * self.latent_split)

    @property
    def channels_tu(self) -> int:
        return 4 * self.gen_base_channels - self.channels_tr


@dataclass
class EvalConfig(SchemaMixin):
    """Metric computation settings"""

    kid_subsets: int = 100
    kid_subset_size: int = 1000
    batch_size: int = 64
    min_cell_size: int = 2
    seed: int = 0

    def __post_init__(self):
        _require(self.kid_subsets >= 1, 'kid_subsets', "must be positive")
        _require(self.kid_subset_size >= 2, 'kid_subset_size', "must be at least 2")
        _require(self.batch_size >= 1, 'batch_size', "must be positive")
        _require(self.min_cell_size >= 2, 'min_cell_size', "covariance needs at least 2 samples")


@dataclass
class FairClassifyConfig(SchemaMixin):
    """Fair classification experiment settings"""

    target_attribute: str = 'attractive'
    group_attribute: str = 'gender'
    split_ratios: Tuple[float, float, float] = (0.6, 0.15, 0.25)
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    base_channels: int = 16
    seed: int = 0
    augment_policy: str = 'union'

    def __post_init__(self):
        self.split_ratios = tuple(self.split_ratios)
        _check_ratios(self.split_ratios, 'split_ratios')
        _require(self.epochs >= 1, 'epochs', "must be positive")
        _require(self.lr > 0, 'lr', "must be positive")
        _require(self.batch_size >= 1, 'batch_size', "must be positive")
        _require(self.base_channels >= 1, 'base_channels', "must be positive")
        _require(self.augment_policy in AUGMENT_POLICIES, 'augment_policy',
                 f"must be one of {', '.join(AUGMENT_POLICIES)}")


SECTION_TYPES = {
    'data': SyntheticSpec,
    'loader': LoaderConfig,
    'pac': PacConfig,
    'gan': TrainConfig,
    'eval': EvalConfig,
    'fair': FairClassifyConfig,
}


@dataclass
class RunConfig(SchemaMixin):
    """All sections of one run, as written to resolved_config.json"""

    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    loader: LoaderConfig = field(default_factory=LoaderConfig)
    pac: PacConfig = field(default_factory=PacConfig)
    gan: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    fair: FairClassifyConfig = field(default_factory=FairClassifyConfig)
    seed: int = 0
    device: str = 'cpu'

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        data = dict(data or {})
        data.pop('version', None)
        data.pop('created', None)
        unknown = sorted(set(data) - set(SECTION_TYPES) - {'seed', 'device'})
        if unknown:
            raise ConfigError(unknown[0], "unknown config section")
        kwargs = {name: section_type.from_dict(data.get(name) or {})
                  for name, section_type in SECTION_TYPES.items()}
        return cls(seed=data.get('seed', 0), device=data.get('device', 'cpu'), **kwargs)

    def to_dict(self) -> Dict[str, Any]:
        result = asdict(self)
        result['version'] = CONFIG_VERSION
        result['created'] = datetime.now().isoformat()
        return result

    def with_overrides(self, overrides: Dict[str, Dict[str, Any]]) -> 'RunConfig':
        """
        Apply section overrides such as {'gan': {'epochs': 2}}

        Args:
            overrides: Section name to field overrides

        Returns:
            New validated RunConfig
        """
        merged = {name: getattr(self, name).to_dict() for name in SECTION_TYPES}
        merged['seed'] = self.seed
        merged['device'] = self.device
        for section, values in overrides.items():
            if section in ('seed', 'device'):
                merged[section] = values
                continue
            if section not in SECTION_TYPES:
                raise ConfigError(section, "unknown config section")
            merged[section] = deep_merge(merged[section], values)
        return RunConfig.from_dict(merged)

    def with_seed(self, seed: int) -> 'RunConfig':
        """Propagate one seed into every seeded section"""
        return self.with_overrides({
            'seed': seed,
            'data': {'seed': seed},
            'loader': {'seed': seed},
            'pac': {'seed': seed},
            'gan': {'seed': seed},
            'eval': {'seed': seed},
            'fair': {'seed': seed},
        })


def deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge overrides into a copy of base"""
    result = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = value
    return result


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Load a run config from JSON (defaults when path is None)"""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError('config', f"config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError('config', f"invalid JSON in {path}: {e}") from e
    return RunConfig.from_dict(data)


def save_run_config(config: RunConfig, out_dir: Union[str, Path],
                    filename: str = 'resolved_config.json') -> Path:
    """Write the resolved config next to a run's outputs"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / filename
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(config.to_dict(), f, indent=2)
    return path
