"""
Translator training engine
Alternating critic / generator / TAC updates, learning-rate schedule, checkpointing and resumption
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch

from src.checkpoint import (load_checkpoint, parameter_hash, resolve_latest, save_checkpoint,
                            write_latest_pointer)
from src.config_schema import TrainConfig
from src.data import DatasetRecord, batch_indices, records_to_tensors
from src.errors import CheckpointError, ConfigError, NonFiniteLossError, ShapeError, TrainingDivergedError
from src.log_setup import JsonLinesWriter, write_history_csv
from src.losses import (LossReport, PacPerceptualEmbedder, critic_loss, fair_representation_loss,
                        frl_role_objectives, frozen_parameters, generator_adversarial_loss,
                        perceptual_loss, protected_attribute_distance_loss, reconstruction_loss,
                        total_generator_loss)
from src.pac import PacModel, freeze
from src.translator import Generator, TranslatorModels, build_translator


class TrainingStatus(Enum):
    COMPLETED = "completed"
    STOPPED = "stopped"


def learning_rate_at(initial: float, epoch: int, every: int, factor: float = 0.5) -> float:
    """Rate after `epoch` completed epochs: initial * factor ** (epoch // every)"""
    return initial * factor ** (epoch // every)


def make_adam(params, lr: float, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(config.beta1, config.beta2))


def sample_target_attributes(a_i: torch.Tensor, rng: torch.Generator, policy: str = 'flip') -> torch.Tensor:
    """
    Draw target attribute vectors for a batch

    Args:
        a_i: (B, K) original bits
        rng: Generator driving the draw
        policy: 'flip' one uniformly chosen bit, 'random' vector, or 'permute' batch labels

    Returns:
        (B, K) target bits, same dtype and device as a_i
    """
    batch, k = a_i.shape
    if policy == 'flip':
        index = torch.randint(k, (batch,), generator=rng)
        a_t = a_i.detach().cpu().clone()
        rows = torch.arange(batch)
        a_t[rows, index] = 1 - a_t[rows, index]
    elif policy == 'random':
        a_t = torch.randint(0, 2, (batch, k), generator=rng).to(a_i.dtype)
    elif policy == 'permute':
        a_t = a_i.detach().cpu()[torch.randperm(batch, generator=rng)]
    else:
        raise ValueError(f"unknown target policy '{policy}'")
    return a_t.to(device=a_i.device, dtype=a_i.dtype)


@dataclass
class TrainState:
    """Everything needed to continue training bit-identically"""

    models: TranslatorModels
    optimizers: Dict[str, torch.optim.Optimizer]
    config: TrainConfig
    rng: torch.Generator
    attribute_names: List[str]
    epoch: int = 0
    step: int = 0
    history: List[Dict] = field(default_factory=list)
    last_report: Optional[LossReport] = None

    @property
    def generator(self) -> Generator:
        return self.models.generator

    def set_learning_rates(self, epoch: int):
        """Apply the decayed rates for training epoch `epoch` (1-based)"""
        c = self.config
        initial = {'generator': c.lr_g, 'discriminator': c.lr_d, 'tac1': c.lr_tac, 'tac2': c.lr_tac}
        for name, optimizer in self.optimizers.items():
            lr = learning_rate_at(initial[name], epoch - 1, c.lr_decay_every, c.lr_decay_factor)
            for group in optimizer.param_groups:
                group['lr'] = lr

    def train_mode(self):
        for model in self.models:
            model.train()


def create_train_state(config: TrainConfig, attribute_names: Sequence[str], device: str = 'cpu') -> TrainState:
    """Seeded models and Adam optimizers for a fresh run"""
    torch.manual_seed(config.seed)
    models = TranslatorModels(*[m.to(device) for m in build_translator(config, len(attribute_names))])
    optimizers = {
        'generator': make_adam(models.generator.parameters(), config.lr_g, config),
        'discriminator': make_adam(models.discriminator.parameters(), config.lr_d, config),
        'tac1': make_adam(models.tac1.parameters(), config.lr_tac, config),
        'tac2': make_adam(models.tac2.parameters(), config.lr_tac, config),
    }
    return TrainState(models, optimizers, config, torch.Generator().manual_seed(config.seed),
                      list(attribute_names))


def _bit_accuracy(logits: torch.Tensor, targets: torch.Tensor) -> float:
    return ((logits > 0).float() == targets).float().mean().item()


def train_step(state: TrainState, batch: Tuple[torch.Tensor, torch.Tensor], pac: Optional[PacModel],
               embedder=None) -> LossReport:
    """
    One optimization step

    critic_steps_per_gen critic updates, one generator update on the weighted objective, then
    TAC1 descent and TAC2 ascent on the detached latents.

    Args:
        state: Mutable training state
        batch: (images, attrs) on the training device
        pac: Frozen PAC for the distance term (may be None when w_pad == 0)
        embedder: Perceptual embedder (may be None when w_percept == 0)

    Returns:
        LossReport of the generator update, with critic/TAC diagnostics in `aux`
    """
    try:
        report = _train_step(state, batch, pac, embedder)
    except NonFiniteLossError as e:
        logging.error(f"Non-finite loss at step {state.step + 1}: {str(e)}")
        raise TrainingDivergedError(f"training diverged at step {state.step + 1}: {e}",
                                    last_report=state.last_report, step=state.step + 1) from e
    state.step += 1
    state.last_report = report
    return report


def _train_step(state: TrainState, batch, pac, embedder) -> LossReport:
    config = state.config
    weights = config.weights
    gen, disc, tac1, tac2 = state.models
    opt = state.optimizers
    x_i, a_i = batch
    state.train_mode()

    # critic
    for _ in range(config.critic_steps_per_gen):
        a_t = sample_target_attributes(a_i, state.rng, config.target_policy)
        with torch.no_grad():
            x_fake = gen(x_i, a_t)
        loss_d, terms_d = critic_loss(disc, x_i, a_i, x_fake, weights.w_gp, generator=state.rng)
        opt['discriminator'].zero_grad()
        loss_d.backward()
        opt['discriminator'].step()

    # generator
    a_t = sample_target_attributes(a_i, state.rng, config.target_policy)
    latents = gen.encode(x_i, a_t)
    x_t = gen.decode(latents)
    terms = {}
    with frozen_parameters(disc):
        _, adv_terms = generator_adversarial_loss(disc, x_t, a_t)
    terms.update(adv_terms)

    x_rec = gen(x_t, a_i) if weights.w_rec > 0 or weights.w_percept > 0 else None
    if weights.w_rec > 0:
        terms['cycle'], terms['identity'] = reconstruction_loss(gen, x_i, a_i, x_t, x_rec)
    if weights.w_frl > 0:
        with frozen_parameters(tac1), frozen_parameters(tac2):
            terms['frl_tac1'], terms['frl_tac2'] = fair_representation_loss(tac1, tac2, latents, a_t)
    if weights.w_pad > 0:
        if pac is None:
            raise ConfigError('gan.weights.w_pad', "w_pad > 0 requires a trained PAC")
        terms['pad'] = protected_attribute_distance_loss(pac, x_i, x_t)
    if weights.w_percept > 0:
        if embedder is None:
            raise ConfigError('gan.weights.w_percept', "w_percept > 0 requires a perceptual embedder")
        terms['content'], terms['style'] = perceptual_loss(embedder, x_i, x_t, x_rec)

    report = total_generator_loss(weights, terms)
    opt['generator'].zero_grad()
    if report.loss is not None:
        report.loss.backward()
        opt['generator'].step()

    # TACs on detached latents
    detached = type(latents)(latents.h_tr.detach(), latents.h_tu.detach())
    enc_tac1_term, tac2_term = fair_representation_loss(tac1, tac2, detached, a_t)
    objectives = frl_role_objectives(enc_tac1_term, tac2_term)
    opt['tac1'].zero_grad()
    opt['tac2'].zero_grad()
    (objectives['tac1'] + objectives['tac2']).backward()
    opt['tac1'].step()
    opt['tac2'].step()

    with torch.no_grad():
        report.aux = {name: float(value.detach().item()) for name, value in terms_d.items()}
        report.aux.update({
            'critic_loss': float(loss_d.detach().item()),
            'tac1_loss': float(objectives['tac1'].item()),
            'tac2_loss': float(objectives['tac2'].item()),
            'tac1_acc': _bit_accuracy(tac1(detached.h_tr), a_t),
            'tac2_acc': _bit_accuracy(tac2(detached.h_tu), a_t),
        })
    return report


@torch.no_grad()
def identity_error(gen: Generator, images: torch.Tensor, attrs: torch.Tensor, batch_size: int = 64) -> float:
    """Mean absolute pixel error of same-domain translation G(x, a_i)"""
    was_training = gen.training
    gen.eval()
    total, count = 0.0, 0
    for i in range(0, len(images), batch_size):
        x, a = images[i:i + batch_size], attrs[i:i + batch_size]
        total += (gen(x, a) - x).abs().sum().item()
        count += x.numel()
    gen.train(was_training)
    return total / max(1, count)


@torch.no_grad()
def tac_accuracies(models: TranslatorModels, images: torch.Tensor, attrs: torch.Tensor, rng: torch.Generator,
                   policy: str = 'flip', batch_size: int = 64) -> Dict[str, float]:
    """Per-bit accuracy of TAC1 on h_tr and TAC2 on h_tu for sampled targets"""
    modes = [model.training for model in models]
    for model in models:
        model.eval()
    hits = {'tac1': 0.0, 'tac2': 0.0}
    total = 0
    for i in range(0, len(images), batch_size):
        x, a_i = images[i:i + batch_size], attrs[i:i + batch_size]
        a_t = sample_target_attributes(a_i, rng, policy)
        latents = models.generator.encode(x, a_t)
        hits['tac1'] += ((models.tac1(latents.h_tr) > 0).float() == a_t).float().sum().item()
        hits['tac2'] += ((models.tac2(latents.h_tu) > 0).float() == a_t).float().sum().item()
        total += a_t.numel()
    for model, mode in zip(models, modes):
        model.train(mode)
    return {name: value / max(1, total) for name, value in hits.items()}


def save_train_state(state: TrainState, path: Union[str, Path]) -> Path:
    gen, disc, tac1, tac2 = state.models
    header = {
        'attribute_names': state.attribute_names,
        'num_attrs': len(state.attribute_names),
        'resolution': state.config.resolution,
        'channels_tr': gen.channels_tr,
        'channels_tu': gen.channels_tu,
        'config': state.config.to_dict(),
        'epoch': state.epoch,
        'step': state.step,
    }
    payload = {
        'generator': gen.state_dict(),
        'discriminator': disc.state_dict(),
        'tac1': tac1.state_dict(),
        'tac2': tac2.state_dict(),
        'optimizers': {name: o.state_dict() for name, o in state.optimizers.items()},
        'rng_state': state.rng.get_state(),
        'torch_rng_state': torch.get_rng_state(),
        'history': state.history,
        'last_report': state.last_report.to_dict() if state.last_report else None,
    }
    return save_checkpoint(path, 'translator', header, payload)


def load_train_state(path: Union[str, Path], device: str = 'cpu') -> TrainState:
    """Restore a TrainState from a translator checkpoint (file or run directory)"""
    header, payload = load_checkpoint(path, 'translator', map_location=device)
    config = TrainConfig.from_dict(header['config'])
    state = create_train_state(config, header['attribute_names'], device)
    gen, disc, tac1, tac2 = state.models
    gen.load_state_dict(payload['generator'])
    disc.load_state_dict(payload['discriminator'])
    tac1.load_state_dict(payload['tac1'])
    tac2.load_state_dict(payload['tac2'])
    for name, optimizer in state.optimizers.items():
        optimizer.load_state_dict(payload['optimizers'][name])
    state.rng.set_state(payload['rng_state'])
    torch.set_rng_state(payload['torch_rng_state'])
    state.epoch = header['epoch']
    state.step = header['step']
    state.history = list(payload.get('history', []))
    if payload.get('last_report'):
        state.last_report = LossReport(**payload['last_report'])
    return state


def load_generator(path: Union[str, Path], device: str = 'cpu') -> Tuple[Generator, Dict]:
    """Generator in eval mode plus the checkpoint header"""
    header, payload = load_checkpoint(path, 'translator', map_location=device)
    config = TrainConfig.from_dict(header['config'])
    gen = build_translator(config, header['num_attrs']).generator
    gen.load_state_dict(payload['generator'])
    gen.to(device).eval()
    return gen, header


@dataclass
class TrainResult:
    state: TrainState
    history: List[Dict]
    run_dir: Path
    status: TrainingStatus


class Trainer:
    """Runs the translator optimization loop over a record set"""

    def __init__(self, config: TrainConfig, device: str = 'cpu',
                 stop_callback: Optional[Callable] = None,
                 status_callback: Optional[Callable] = None,
                 progress_callback: Optional[Callable] = None):
        """
        Initialize trainer

        Args:
            config: Training settings
            device: Torch device
            stop_callback: Callback that returns True if training should stop
            status_callback: Callback to update status messages
            progress_callback: Callback to update progress (step_in_epoch, steps_per_epoch, epoch)
        """
        self.config = config
        self.device = device
        self.stop_callback = stop_callback
        self.status_callback = status_callback
        self.progress_callback = progress_callback
        self.run_dir = Path(config.checkpoint_dir) / config.run_id

    def should_stop(self) -> bool:
        return self.stop_callback() if self.stop_callback else False

    def update_status(self, message: str):
        logging.info(message)
        if self.status_callback:
            self.status_callback(message)

    def _initial_state(self, attribute_names: Sequence[str], resume: bool) -> TrainState:
        if resume and (self.run_dir / 'latest').exists():
            state = load_train_state(resolve_latest(self.run_dir), self.device)
            if state.attribute_names != list(attribute_names):
                raise CheckpointError(f"checkpoint attributes {state.attribute_names} differ from dataset "
                                      f"attributes {list(attribute_names)}")
            self.update_status(f"Resuming {self.config.run_id} after epoch {state.epoch}")
            return state
        return create_train_state(self.config, attribute_names, self.device)

    def train(self, records: Sequence[DatasetRecord], pac: Optional[PacModel], attribute_names: Sequence[str],
              resume: bool = False, embedder=None) -> TrainResult:
        """
        Train for config.epochs epochs, checkpointing after each

        Args:
            records: Training records (target attributes required)
            pac: Trained PAC; frozen for the whole run
            attribute_names: Names of the K target attributes
            resume: Continue from the run directory's `latest` checkpoint when present
            embedder: Perceptual embedder (PAC blocks by default)

        Returns:
            TrainResult with the final state and per-epoch history
        """
        config = self.config
        images, attrs, _, _ = records_to_tensors(records)
        if images.shape[-1] != config.resolution:
            raise ShapeError(f"records are {images.shape[-1]}px, training expects {config.resolution}px")
        if attrs.shape[1] != len(attribute_names):
            raise ShapeError(f"records carry {attrs.shape[1]} attributes, {len(attribute_names)} names given")

        if pac is not None:
            freeze(pac)
            pac.to(self.device)
            pac_hash = parameter_hash(pac)
        if embedder is None and config.weights.w_percept > 0 and pac is not None:
            embedder = PacPerceptualEmbedder(pac, config.content_layers, config.style_layers)

        state = self._initial_state(attribute_names, resume)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        eval_images = images[:config.eval_batch].to(self.device)
        eval_attrs = attrs[:config.eval_batch].to(self.device)

        status = TrainingStatus.COMPLETED
        with JsonLinesWriter(self.run_dir / 'train_log.jsonl') as log:
            for epoch in range(state.epoch + 1, config.epochs + 1):
                state.set_learning_rates(epoch)
                batches = batch_indices(len(images), config.batch_size, state.rng)
                sums: Dict[str, float] = {}
                for b, index in enumerate(batches):
                    if self.should_stop():
                        status = TrainingStatus.STOPPED
                        break
                    batch = (images[index].to(self.device), attrs[index].to(self.device))
                    report = train_step(state, batch, pac, embedder)
                    log.write(report.to_log_record(state.step, epoch))
                    for name, value in list(report.terms.items()) + list(report.aux.items()):
                        sums[name] = sums.get(name, 0.0) + value
                    sums['total'] = sums.get('total', 0.0) + report.total
                    if self.progress_callback:
                        self.progress_callback(b + 1, len(batches), epoch)

                if status == TrainingStatus.STOPPED:
                    self.update_status(f"Training stopped during epoch {epoch}")
                    break

                entry = {'epoch': epoch, 'lr_g': state.optimizers['generator'].param_groups[0]['lr']}
                entry.update({name: value / len(batches) for name, value in sums.items()})
                entry['identity_error'] = identity_error(state.generator, eval_images, eval_attrs)
                state.history.append(entry)
                state.epoch = epoch

                filename = f"epoch_{epoch}.ckpt"
                save_train_state(state, self.run_dir / filename)
                write_latest_pointer(self.run_dir, filename)
                write_history_csv(state.history, self.run_dir / 'epochs.csv')

                if pac is not None and parameter_hash(pac) != pac_hash:
                    logging.error("PAC parameters changed during translator training")
                    raise TrainingDivergedError("frozen PAC was modified", last_report=state.last_report)

                self.update_status(f"Epoch {epoch}/{config.epochs}: total={entry['total']:.4f} "
                                   f"identity_error={entry['identity_error']:.4f}")

        return TrainResult(state, state.history, self.run_dir, status)


def train(config: TrainConfig, records: Sequence[DatasetRecord], pac: Optional[PacModel],
          attribute_names: Sequence[str], resume: bool = False, device: str = 'cpu') -> TrainResult:
    return Trainer(config, device).train(records, pac, attribute_names, resume)
