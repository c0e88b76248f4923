"""
Run presets
Built-in scale and ablation presets plus user presets stored as JSON files
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from src.config_schema import SECTION_TYPES, RunConfig
from src.errors import ConfigError


class Preset:
    """Named set of section overrides"""

    def __init__(self, name: str, description: str, category: str, overrides: Dict[str, Dict[str, Any]]):
        self.name = name
        self.description = description
        self.category = category
        self.overrides = overrides

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary"""
        return {
            'name': self.name,
            'description': self.description,
            'category': self.category,
            'overrides': self.overrides
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> 'Preset':
        """Create from dictionary"""
        for section in data.get('overrides', {}):
            if section not in SECTION_TYPES and section not in ('seed', 'device'):
                raise ConfigError(f"overrides.{section}", "unknown config section")
        return Preset(
            name=data['name'],
            description=data.get('description', ''),
            category=data.get('category', 'Custom'),
            overrides=data.get('overrides', {})
        )

    def apply(self, config: RunConfig) -> RunConfig:
        """Deep-merge this preset's overrides into a run config"""
        return config.with_overrides(self.overrides)


def _ablation(name: str, description: str, w_frl: float, w_pad: float, w_percept: float) -> Preset:
    return Preset(
        name=name,
        description=description,
        category='Ablation',
        overrides={'gan': {'run_id': name,
                           'weights': {'w_frl': w_frl, 'w_pad': w_pad, 'w_percept': w_percept}}}
    )


class PresetManager:
    """Manages run presets"""

    BUILTIN_PRESETS = {
        'smoke': Preset(
            name='Smoke',
            description='200 samples at 32x32, two epochs per stage',
            category='Scale',
            overrides={
                'data': {'resolution': 32, 'num_samples': 200},
                'loader': {'out_size': 32},
                'pac': {'resolution': 32, 'epochs': 2, 'batch_size': 64, 'base_channels': 8},
                'gan': {'resolution': 32, 'epochs': 2, 'batch_size': 16, 'gen_base_channels': 8,
                        'num_res_blocks': 2, 'disc_base_channels': 8, 'tac_hidden': 16, 'eval_batch': 16},
                'eval': {'kid_subsets': 10, 'kid_subset_size': 100},
                'fair': {'epochs': 2, 'base_channels': 8},
            }
        ),
        'desk': Preset(
            name='Desk',
            description='2000 samples at 64x64 with protected hue correlated to the target glyphs',
            category='Scale',
            overrides={
                'data': {'resolution': 64, 'num_samples': 2000, 'correlation': 0.8},
                'loader': {'out_size': 64},
                'pac': {'resolution': 64, 'epochs': 10},
                'gan': {'resolution': 64, 'epochs': 20},
            }
        ),
        'full': Preset(
            name='Full scale',
            description='128x128 face crops (178 center crop) with the full optimizer schedule',
            category='Scale',
            overrides={
                'loader': {'crop': 178, 'out_size': 128},
                'pac': {'resolution': 128, 'base_channels': 64},
                'gan': {'resolution': 128, 'gen_base_channels': 64, 'num_res_blocks': 6,
                        'disc_base_channels': 64, 'disc_layers': 6, 'batch_size': 16, 'epochs': 20,
                        'lr_g': 1e-4, 'lr_d': 1e-4, 'lr_tac': 1e-4, 'lr_decay_every': 8},
            }
        ),
        'ours_f': _ablation('ours_f', 'Fair representation loss only', 1.0, 0.0, 0.0),
        'ours_p': _ablation('ours_p', 'Protected attribute distance loss only', 0.0, 1.0, 0.0),
        'ours_fp': _ablation('ours_fp', 'Fair representation and protected attribute distance losses',
                             1.0, 1.0, 0.0),
        'ours_fpP': _ablation('ours_fpP', 'Both fairness losses plus the perceptual loss', 1.0, 1.0, 0.1),
        'baseline': _ablation('baseline', 'Plain attribute translation without fairness or perceptual terms',
                              0.0, 0.0, 0.0),
    }

    def __init__(self, custom_presets_path: Optional[Union[str, Path]] = None):
        """
        Initialize preset manager

        Args:
            custom_presets_path: Directory of custom preset JSON files (none when omitted)
        """
        self.custom_presets_path = Path(custom_presets_path) if custom_presets_path else None
        self.custom_presets: Dict[str, Preset] = {}
        if self.custom_presets_path is not None:
            self.custom_presets_path.mkdir(parents=True, exist_ok=True)
            self._load_custom_presets()

    def _load_custom_presets(self):
        """Load custom presets from disk"""
        for preset_file in sorted(self.custom_presets_path.glob('*.json')):
            try:
                with open(preset_file, 'r', encoding='utf-8') as f:
                    self.custom_presets[preset_file.stem] = Preset.from_dict(json.load(f))
            except (OSError, ValueError, KeyError) as e:
                logging.warning(f"Error loading preset {preset_file}: {e}")

    def get_all_presets(self) -> Dict[str, Preset]:
        """Get all presets (built-in + custom)"""
        return {**self.BUILTIN_PRESETS, **self.custom_presets}

    def get_preset(self, preset_id: str) -> Preset:
        presets = self.get_all_presets()
        if preset_id not in presets:
            raise ConfigError('preset', f"unknown preset '{preset_id}', available: {', '.join(sorted(presets))}")
        return presets[preset_id]

    def get_categories(self) -> List[str]:
        return sorted({preset.category for preset in self.get_all_presets().values()})

    def save_custom_preset(self, preset_id: str, preset: Preset) -> Path:
        """Validate a preset against the default config and save it to disk"""
        if self.custom_presets_path is None:
            raise ConfigError('preset', "no custom preset directory configured")
        if preset_id in self.BUILTIN_PRESETS:
            raise ConfigError('preset', f"'{preset_id}' is a built-in preset")
        preset.apply(RunConfig())
        preset_file = self.custom_presets_path / f"{preset_id}.json"
        with open(preset_file, 'w', encoding='utf-8') as f:
            json.dump(preset.to_dict(), f, indent=2)
        self.custom_presets[preset_id] = preset
        logging.info(f"Saved preset '{preset_id}' to {preset_file}")
        return preset_file

    def delete_custom_preset(self, preset_id: str):
        """Delete custom preset"""
        if preset_id in self.custom_presets:
            preset_file = self.custom_presets_path / f"{preset_id}.json"
            if preset_file.exists():
                preset_file.unlink()
            del self.custom_presets[preset_id]


def apply_presets(config: RunConfig, names: List[str], manager: Optional[PresetManager] = None) -> RunConfig:
    """Apply presets left to right"""
    manager = manager or PresetManager()
    for name in names:
        config = manager.get_preset(name).apply(config)
    return config
