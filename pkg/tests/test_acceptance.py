"""
Desk-scale acceptance runs (deselected by default, run with -m slow)
"""
import pytest
import torch

from src.checkpoint import parameter_hash
from src.config_schema import EvalConfig, PacConfig, RunConfig, SyntheticSpec
from src.data import records_to_tensors
from src.evaluation import evaluate_translations
from src.metrics import PacEmbedder, fid_from_embeddings
from src.pac import evaluate_pac, train_pac
from src.presets import apply_presets
from src.synthetic import generate_synthetic_dataset
from src.trainer import Trainer, identity_error, tac_accuracies

pytestmark = pytest.mark.slow


def _pac_on_two_domains(grl_lambda):
    spec = SyntheticSpec(resolution=32, num_samples=1200, target_domain_fraction=0.5, seed=1)
    records = generate_synthetic_dataset(spec)
    source = [r for r in records if r.domain_label == 0]
    target = [r for r in records if r.domain_label == 1]
    config = PacConfig(resolution=32, base_channels=16, epochs=10, batch_size=64, grl_lambda=grl_lambda)
    model, _ = train_pac(config, source, target)

    held_out = generate_synthetic_dataset(spec.updated(seed=2, num_samples=600))
    images, _, labels, domains = records_to_tensors(held_out)
    return model, evaluate_pac(model, images, labels, domains)


def test_pac_learns_protected_labels_and_forgets_domain():
    _, scores = _pac_on_two_domains(1.0)
    assert scores['gender_acc'] >= 0.95
    assert 0.40 <= scores['domain_acc'] <= 0.60


def test_pac_without_reversal_learns_domain():
    _, scores = _pac_on_two_domains(0.0)
    assert scores['domain_acc'] > 0.80


@pytest.fixture(scope='module')
def desk():
    config = apply_presets(RunConfig(), ['desk'])
    records = generate_synthetic_dataset(config.data)
    pac, _ = train_pac(config.pac, records)
    held_out = generate_synthetic_dataset(config.data.updated(seed=config.data.seed + 1, num_samples=400))
    return config, records, pac, held_out


def _train(tmp_path_factory, config, records, pac, preset):
    gan = apply_presets(config, [preset]).gan.updated(
        checkpoint_dir=str(tmp_path_factory.mktemp(preset)))
    return Trainer(gan).train(records, pac, config.data.attribute_names)


def test_fairness_terms_lower_fpad(desk, tmp_path_factory):
    config, records, pac, held_out = desk
    full = _train(tmp_path_factory, config, records, pac, 'ours_fp')
    ablation = _train(tmp_path_factory, config, records, pac, 'baseline')

    images, attrs, _, _ = records_to_tensors(held_out)
    accuracies = tac_accuracies(full.state.models, images, attrs, torch.Generator().manual_seed(0))
    assert accuracies['tac1'] >= 0.85
    assert accuracies['tac2'] <= 0.65
    assert identity_error(full.state.generator, images, attrs) <= 0.08

    eval_config = EvalConfig(kid_subsets=20, kid_subset_size=200)
    names = config.data.attribute_names
    full_report = evaluate_translations(full.state.generator, pac, held_out, names, config=eval_config)
    ablation_report = evaluate_translations(ablation.state.generator, pac, held_out, names, config=eval_config)
    assert full_report.averages()['overall'] < ablation_report.averages()['overall']

    assert full.history[-1]['total'] < full.history[0]['total']


def test_fpad_separates_protected_classes(desk):
    config, _, pac, held_out = desk
    images, _, protected, _ = records_to_tensors(held_out)
    features = PacEmbedder(pac).embed(images)
    female = features[(protected[:, 0] == 0).numpy()]
    male = features[(protected[:, 0] == 1).numpy()]
    half = len(female) // 2
    same = fid_from_embeddings(female[:half], female[half:])
    disjoint = fid_from_embeddings(female[:half], male[:half])
    assert disjoint >= 5 * same


def test_epoch_one_checkpoints_are_identical(tmp_path):
    config = apply_presets(RunConfig(), ['smoke'])
    records = generate_synthetic_dataset(config.data)
    pac, _ = train_pac(config.pac, records)
    hashes = []
    for name in ('a', 'b'):
        gan = config.gan.updated(epochs=1, checkpoint_dir=str(tmp_path / name))
        hashes.append(parameter_hash(Trainer(gan).train(records, pac, config.data.attribute_names).state.generator))
    assert hashes[0] == hashes[1]
