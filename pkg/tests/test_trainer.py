import math

import pytest
import torch
from scipy import stats

from src.checkpoint import parameter_hash
from src.config_schema import TrainConfig
from src.errors import CheckpointError, ConfigError, ShapeError, TrainingDivergedError
from src.log_setup import read_json_lines
from src.trainer import (Trainer, TrainingStatus, create_train_state, identity_error, learning_rate_at,
                         load_generator, load_train_state, make_adam, sample_target_attributes,
                         tac_accuracies)


@pytest.fixture
def records(tiny_records):
    return tiny_records[:16]


@pytest.fixture
def names(tiny_spec):
    return tiny_spec.attribute_names


def test_learning_rate_schedule():
    assert learning_rate_at(1.0, 16, 8, 0.5) == pytest.approx(0.25)
    assert learning_rate_at(2e-4, 7, 8) == pytest.approx(2e-4)
    assert learning_rate_at(2e-4, 8, 8) == pytest.approx(1e-4)


def test_state_applies_decayed_rates(tiny_train_config, names):
    state = create_train_state(tiny_train_config.updated(lr_decay_every=8), names)
    state.set_learning_rates(17)
    assert state.optimizers['generator'].param_groups[0]['lr'] == pytest.approx(0.25 * tiny_train_config.lr_g)
    assert state.optimizers['tac2'].param_groups[0]['lr'] == pytest.approx(0.25 * tiny_train_config.lr_tac)


def test_flip_changes_exactly_one_bit():
    a_i = torch.randint(0, 2, (64, 5)).float()
    a_t = sample_target_attributes(a_i, torch.Generator().manual_seed(0), 'flip')
    assert ((a_t != a_i).sum(dim=1) == 1).all()
    assert a_t.dtype == a_i.dtype


def test_flip_with_one_attribute_is_complement():
    a_i = torch.tensor([[0.0], [1.0], [1.0]])
    a_t = sample_target_attributes(a_i, torch.Generator().manual_seed(0), 'flip')
    assert torch.equal(a_t, 1 - a_i)


def test_flip_index_is_uniform():
    a_i = torch.zeros(5000, 5)
    a_t = sample_target_attributes(a_i, torch.Generator().manual_seed(1), 'flip')
    counts = a_t.sum(dim=0).numpy()
    assert stats.chisquare(counts).pvalue > 0.001


def test_other_policies():
    rng = torch.Generator().manual_seed(2)
    a_i = torch.tensor([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    random_targets = sample_target_attributes(a_i, rng, 'random')
    assert random_targets.shape == (3, 2)
    assert set(random_targets.unique().tolist()) <= {0.0, 1.0}
    permuted = sample_target_attributes(a_i, rng, 'permute')
    assert sorted(map(tuple, permuted.tolist())) == sorted(map(tuple, a_i.tolist()))
    with pytest.raises(ValueError):
        sample_target_attributes(a_i, rng, 'shuffle')


def test_training_writes_checkpoints_and_logs(tiny_train_config, records, names, tiny_pac):
    progress = []
    trainer = Trainer(tiny_train_config, progress_callback=lambda b, n, epoch: progress.append((b, n, epoch)))
    result = trainer.train(records, tiny_pac, names)

    assert result.status == TrainingStatus.COMPLETED
    assert [entry['epoch'] for entry in result.history] == [1, 2]
    run_dir = result.run_dir
    assert (run_dir / 'epoch_1.ckpt').exists() and (run_dir / 'epoch_2.ckpt').exists()
    assert (run_dir / 'latest').read_text(encoding='utf-8').strip() == 'epoch_2.ckpt'
    assert (run_dir / 'epochs.csv').exists()
    log = read_json_lines(run_dir / 'train_log.jsonl')
    assert len(log) == 4
    assert [record['step'] for record in log] == [1, 2, 3, 4]
    assert {'adv', 'cls', 'cycle', 'identity', 'frl_tac1', 'frl_tac2', 'pad', 'content', 'style'} <= \
        set(log[0]['terms'])
    assert all(math.isfinite(record['total']) for record in log)
    assert progress[-1] == (2, 2, 2)
    assert all(math.isfinite(entry['identity_error']) for entry in result.history)


def test_pac_is_untouched_by_training(tiny_train_config, records, names, tiny_pac):
    before = parameter_hash(tiny_pac)
    Trainer(tiny_train_config.updated(epochs=1)).train(records, tiny_pac, names)
    assert parameter_hash(tiny_pac) == before


def test_training_is_deterministic(tmp_path, tiny_train_config, records, names, tiny_pac):
    config = tiny_train_config.updated(epochs=1)
    first = Trainer(config.updated(checkpoint_dir=str(tmp_path / 'a'))).train(records, tiny_pac, names)
    second = Trainer(config.updated(checkpoint_dir=str(tmp_path / 'b'))).train(records, tiny_pac, names)
    for (name, a), b in zip(first.state.generator.state_dict().items(),
                            second.state.generator.state_dict().values()):
        assert torch.allclose(a, b, atol=1e-6), name


def test_resume_matches_uninterrupted_run(tmp_path, tiny_train_config, records, names, tiny_pac):
    full = Trainer(tiny_train_config.updated(checkpoint_dir=str(tmp_path / 'full'))).train(
        records, tiny_pac, names)

    split_config = tiny_train_config.updated(checkpoint_dir=str(tmp_path / 'split'))
    Trainer(split_config.updated(epochs=1)).train(records, tiny_pac, names)
    resumed = Trainer(split_config).train(records, tiny_pac, names, resume=True)

    assert resumed.state.epoch == 2
    assert resumed.state.step == full.state.step
    for (name, a), b in zip(full.state.generator.state_dict().items(),
                            resumed.state.generator.state_dict().values()):
        assert torch.allclose(a, b, atol=1e-6), name
    assert resumed.history[-1]['total'] == pytest.approx(full.history[-1]['total'], rel=1e-5)


def test_resume_rejects_other_attributes(tiny_train_config, records, names, tiny_pac):
    Trainer(tiny_train_config.updated(epochs=1)).train(records, tiny_pac, names)
    renamed = list(names[:-1]) + ['smiling']
    with pytest.raises(CheckpointError):
        Trainer(tiny_train_config).train(records, tiny_pac, renamed, resume=True)


def test_stop_callback_interrupts(tiny_train_config, records, names, tiny_pac):
    result = Trainer(tiny_train_config, stop_callback=lambda: True).train(records, tiny_pac, names)
    assert result.status == TrainingStatus.STOPPED
    assert result.history == []
    assert not (result.run_dir / 'latest').exists()


def test_non_finite_loss_aborts(monkeypatch, tiny_train_config, records, names, tiny_pac):
    def broken(*args, **kwargs):
        nan = torch.tensor(float('nan'), requires_grad=True)
        return nan, nan

    monkeypatch.setattr('src.trainer.reconstruction_loss', broken)
    with pytest.raises(TrainingDivergedError) as info:
        Trainer(tiny_train_config).train(records, tiny_pac, names)
    assert info.value.step == 1
    assert info.value.exit_code == 2


def test_fairness_terms_need_a_pac(tiny_train_config, records, names):
    with pytest.raises(ConfigError) as info:
        Trainer(tiny_train_config).train(records, None, names)
    assert info.value.exit_code == 1


def test_baseline_trains_without_pac(tiny_train_config, records, names):
    weights = tiny_train_config.weights.updated(w_frl=0.0, w_pad=0.0, w_percept=0.0)
    result = Trainer(tiny_train_config.updated(epochs=1, weights=weights)).train(records, None, names)
    log = read_json_lines(result.run_dir / 'train_log.jsonl')
    assert 'pad' not in log[0]['terms']


def test_resolution_mismatch(tiny_train_config, records, names, tiny_pac):
    with pytest.raises(ShapeError):
        Trainer(tiny_train_config.updated(resolution=32, disc_layers=4)).train(records, tiny_pac, names)


def test_checkpoint_reloads(tiny_train_config, records, names, tiny_pac):
    result = Trainer(tiny_train_config.updated(epochs=1)).train(records, tiny_pac, names)
    state = load_train_state(result.run_dir)
    assert state.epoch == 1
    assert state.attribute_names == list(names)
    assert state.last_report is not None

    gen, header = load_generator(result.run_dir)
    assert header['attribute_names'] == list(names)
    assert not gen.training
    images = torch.stack([torch.from_numpy(r.image) for r in records[:4]])
    attrs = torch.stack([torch.from_numpy(r.target_attrs).float() for r in records[:4]])
    assert identity_error(gen, images, attrs) >= 0.0
    accuracies = tac_accuracies(state.models, images, attrs, torch.Generator().manual_seed(0))
    assert 0.0 <= accuracies['tac1'] <= 1.0 and 0.0 <= accuracies['tac2'] <= 1.0


def test_tac_accuracies_restores_training_mode(tiny_train_config, records, names):
    state = create_train_state(tiny_train_config, names)
    state.train_mode()
    state.models.tac2.eval()
    images = torch.stack([torch.from_numpy(r.image) for r in records[:4]])
    attrs = torch.stack([torch.from_numpy(r.target_attrs).float() for r in records[:4]])
    tac_accuracies(state.models, images, attrs, torch.Generator().manual_seed(0))
    assert [model.training for model in state.models] == [True, True, True, False]


def test_adam_follows_closed_form_moments():
    beta1, beta2, lr, eps = 0.5, 0.999, 0.1, 1e-8
    theta = torch.tensor(1.5, dtype=torch.float64, requires_grad=True)
    optimizer = make_adam([theta], lr, TrainConfig(beta1=beta1, beta2=beta2))

    expected, m, v = 1.5, 0.0, 0.0
    for t in range(1, 6):
        optimizer.zero_grad()
        (theta ** 2).backward()
        optimizer.step()

        grad = 2 * expected
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad ** 2
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        expected -= lr * m_hat / (math.sqrt(v_hat) + eps)
        assert theta.item() == pytest.approx(expected, rel=1e-9, abs=1e-12)
