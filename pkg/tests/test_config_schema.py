import json

import pytest

from src.config_schema import (FactorSpec, LoaderConfig, LossWeights, PacConfig, RunConfig, SyntheticSpec,
                               TrainConfig, deep_merge, load_run_config, save_run_config)
from src.errors import (CheckpointError, ConfigError, FairTranslateError, NonFiniteLossError,
                        TrainingDivergedError)


def test_defaults_validate():
    config = RunConfig()
    assert config.gan.channels_tr + config.gan.channels_tu == 4 * config.gan.gen_base_channels
    assert config.data.attribute_names == ['attractive', 'blond_hair', 'bags_under_eyes', 'bald', 'big_nose']


@pytest.mark.parametrize('kwargs, field', [
    ({'correlation': 1.5}, 'correlation'),
    ({'resolution': 8}, 'resolution'),
    ({'resolution': 18}, 'resolution'),
    ({'num_samples': 0}, 'num_samples'),
    ({'noise': 0.5}, 'noise'),
])
def test_synthetic_spec_rejects_bad_fields(kwargs, field):
    with pytest.raises(ConfigError) as info:
        SyntheticSpec(**kwargs)
    assert info.value.field == field


def test_synthetic_spec_requires_hue_band_factor():
    with pytest.raises(ConfigError):
        SyntheticSpec(protected_generators=[FactorSpec('age', 6, 'border_tone')])


def test_synthetic_spec_rejects_too_many_targets():
    targets = [FactorSpec(f"t{i}", 2, 'glyph') for i in range(11)]
    with pytest.raises(ConfigError) as info:
        SyntheticSpec(resolution=16, target_generators=targets)
    assert info.value.field == 'target_generators'


def test_synthetic_spec_from_dict_builds_factors():
    spec = SyntheticSpec.from_dict({'resolution': 32, 'target_generators': [
        {'name': 'bald', 'cardinality': 2, 'visual': 'stripe'}]})
    assert spec.attribute_names == ['bald']
    assert isinstance(spec.target_generators[0], FactorSpec)


def test_unknown_field_is_rejected():
    with pytest.raises(ConfigError) as info:
        TrainConfig.from_dict({'epochs': 2, 'epoch': 3})
    assert 'epoch' in info.value.field


def test_train_config_checks_discriminator_depth():
    with pytest.raises(ConfigError) as info:
        TrainConfig(resolution=16, disc_layers=5)
    assert info.value.field == 'disc_layers'


def test_train_config_rejects_empty_latent_half():
    with pytest.raises(ConfigError):
        TrainConfig(latent_split=0.0)


def test_loss_weights_must_be_non_negative():
    with pytest.raises(ConfigError):
        LossWeights(w_pad=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(w_frl=float('nan'))


def test_pac_resolution_multiple_of_16():
    with pytest.raises(ConfigError):
        PacConfig(resolution=40)


def test_loader_ratios_sum_to_one():
    with pytest.raises(ConfigError):
        LoaderConfig(split_ratios=(0.5, 0.2, 0.2))


def test_updated_revalidates():
    config = TrainConfig()
    assert config.updated(epochs=3).epochs == 3
    with pytest.raises(ConfigError):
        config.updated(epochs=0)


def test_with_overrides_deep_merges_weights():
    config = RunConfig().with_overrides({'gan': {'weights': {'w_pad': 0.0}, 'epochs': 3}})
    assert config.gan.epochs == 3
    assert config.gan.weights.w_pad == 0.0
    assert config.gan.weights.w_frl == 1.0


def test_with_overrides_rejects_unknown_section():
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({'gann': {'epochs': 3}})


def test_with_seed_reaches_every_section():
    config = RunConfig().with_seed(7)
    assert config.seed == 7
    assert {config.data.seed, config.pac.seed, config.gan.seed, config.eval.seed, config.fair.seed} == {7}


def test_deep_merge_keeps_base_untouched():
    base = {'a': {'b': 1, 'c': 2}}
    merged = deep_merge(base, {'a': {'b': 5}})
    assert merged == {'a': {'b': 5, 'c': 2}}
    assert base['a']['b'] == 1


def test_run_config_file_round_trip(tmp_path):
    config = RunConfig().with_overrides({'gan': {'epochs': 4}, 'data': {'correlation': 0.8}})
    path = save_run_config(config, tmp_path)
    document = json.loads(path.read_text(encoding='utf-8'))
    assert document['version'] == '1.0'
    loaded = load_run_config(path)
    assert loaded.gan.epochs == 4
    assert loaded.data.correlation == 0.8


def test_load_run_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / 'missing.json')
    bad = tmp_path / 'bad.json'
    bad.write_text('{not json', encoding='utf-8')
    with pytest.raises(ConfigError):
        load_run_config(bad)


def test_error_exit_codes():
    assert ConfigError('x', 'y').exit_code == 1
    assert CheckpointError('missing').exit_code == 1
    assert NonFiniteLossError('pad', float('nan')).exit_code == 2
    assert TrainingDivergedError('boom', step=3).exit_code == 2
    assert issubclass(ConfigError, FairTranslateError)
    assert str(ConfigError('gan.epochs', 'must be positive')) == 'gan.epochs: must be positive'
