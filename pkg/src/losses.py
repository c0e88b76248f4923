"""
Training objectives
Wasserstein critic with auxiliary attribute terms, gradient penalty, cycle/identity
reconstruction, fair representation terms on the latent halves, protected attribute
distance, perceptual content/style, and their weighted total
"""
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.config_schema import LossWeights
from src.errors import MissingLayerError, NonFiniteLossError, ShapeError
from src.pac import PacModel, extract_protected_features
from src.translator import LatentPair, TargetAttributeClassifier

# generator objective term -> LossWeights field
TERM_WEIGHTS = {
    'adv': 'w_adv',
    'cls': 'w_cls',
    'cycle': 'w_rec',
    'identity': 'w_rec',
    'frl_tac1': 'w_frl',
    'frl_tac2': 'w_frl',
    'pad': 'w_pad',
    'content': 'w_percept',
    'style': 'w_percept',
}


def check_finite(name: str, value: torch.Tensor) -> torch.Tensor:
    """Raise NonFiniteLossError naming the term when value is NaN or infinite"""
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(name, float(value.detach().float().mean().item()))
    return value


def attribute_bce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-attribute binary cross-entropy summed over K, averaged over the batch"""
    if logits.shape != targets.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} differ")
    per_bit = F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction='none')
    return per_bit.sum(dim=1).mean()


def _critic_scores(output) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    if isinstance(output, (tuple, list)):
        return output[0].reshape(-1), output[1]
    return output.reshape(-1), None


@contextmanager
def frozen_parameters(module: nn.Module):
    """Temporarily stop gradients into a module's parameters"""
    params = list(module.parameters())
    states = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, state in zip(params, states):
            p.requires_grad_(state)


def gradient_penalty(disc: Callable, real_batch: torch.Tensor, fake_batch: torch.Tensor,
                     generator: Optional[torch.Generator] = None,
                     epsilon: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    E[(||grad D(x_hat)||_2 - 1)^2] at x_hat = eps*x_real + (1-eps)*x_fake

    Args:
        disc: Critic, returning scores or (scores, logits)
        real_batch: Real images
        fake_batch: Generated images of the same shape
        generator: RNG for the per-sample eps ~ U[0, 1]
        epsilon: Explicit (B,) interpolation weights

    Returns:
        Scalar penalty
    """
    if real_batch.shape != fake_batch.shape:
        raise ShapeError(f"real {tuple(real_batch.shape)} and fake {tuple(fake_batch.shape)} batches differ")
    batch_size = real_batch.shape[0]
    if epsilon is None:
        epsilon = torch.rand(batch_size, generator=generator, device='cpu').to(real_batch.device)
    epsilon = epsilon.view(batch_size, *([1] * (real_batch.dim() - 1))).to(real_batch.dtype)

    x_hat = (epsilon * real_batch.detach() + (1 - epsilon) * fake_batch.detach()).requires_grad_(True)
    scores, _ = _critic_scores(disc(x_hat))
    if not scores.requires_grad:
        raise ShapeError("critic output carries no gradient; gradient penalty unavailable")
    gradients, = torch.autograd.grad(outputs=scores, inputs=x_hat, grad_outputs=torch.ones_like(scores),
                                     create_graph=True, allow_unused=True)
    if gradients is None:
        raise ShapeError("critic output does not depend on its input; gradient penalty unavailable")
    norm = gradients.reshape(batch_size, -1).norm(2, dim=1)
    return torch.mean((norm - 1) ** 2)


def critic_loss(disc: Callable, real_images: torch.Tensor, real_attrs: torch.Tensor,
                fake_images: torch.Tensor, w_gp: float = 10.0,
                generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    Critic objective: E[D(x_t)] - E[D(x_i)] + w_gp*GP + CE(a_i | x_i)

    Auxiliary CE is taken on real images only; fakes are detached.

    Returns:
        Tuple of (loss, terms)
    """
    fake_images = fake_images.detach()
    real_scores, real_logits = _critic_scores(disc(real_images))
    fake_scores, _ = _critic_scores(disc(fake_images))

    terms = {
        'critic_real': check_finite('critic_real', real_scores.mean()),
        'critic_fake': check_finite('critic_fake', fake_scores.mean()),
    }
    terms['wasserstein'] = terms['critic_fake'] - terms['critic_real']
    terms['gp'] = (check_finite('gp', gradient_penalty(disc, real_images, fake_images, generator))
                   if w_gp > 0 else real_scores.new_zeros(()))
    terms['cls_real'] = (check_finite('cls_real', attribute_bce(real_logits, real_attrs))
                         if real_logits is not None else real_scores.new_zeros(()))
    loss = terms['wasserstein'] + w_gp * terms['gp'] + terms['cls_real']
    return loss, terms


def generator_adversarial_loss(disc: Callable, fake_images: torch.Tensor,
                               target_attrs: torch.Tensor) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    Generator side: -E[D(x_t)] + CE(a_t | x_t)

    Returns:
        Tuple of (loss, {'adv', 'cls'})
    """
    scores, logits = _critic_scores(disc(fake_images))
    adv = check_finite('adv', -scores.mean())
    cls = check_finite('cls', attribute_bce(logits, target_attrs)) if logits is not None else adv.new_zeros(())
    return adv + cls, {'adv': adv, 'cls': cls}


def reconstruction_loss(gen: Callable, x_i: torch.Tensor, a_i: torch.Tensor, x_t: torch.Tensor,
                        x_rec: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Cycle L1(G(x_t, a_i), x_i) and identity L1(G(x_i, a_i), x_i)

    Args:
        gen: Generator callable (image, attrs) -> image
        x_i: Input images
        a_i: Their original attributes
        x_t: Translations produced this step
        x_rec: Precomputed G(x_t, a_i), reused when given

    Returns:
        Tuple of (cycle, identity)
    """
    if x_t.shape != x_i.shape:
        raise ShapeError(f"translation {tuple(x_t.shape)} and input {tuple(x_i.shape)} differ")
    if x_rec is None:
        x_rec = gen(x_t, a_i)
    if x_rec.shape != x_i.shape:
        raise ShapeError(f"reconstruction {tuple(x_rec.shape)} and input {tuple(x_i.shape)} differ")
    cycle = check_finite('cycle', F.l1_loss(x_rec, x_i))
    identity = check_finite('identity', F.l1_loss(gen(x_i, a_i), x_i))
    return cycle, identity


def fair_representation_loss(tac1: TargetAttributeClassifier, tac2: TargetAttributeClassifier,
                             latents: LatentPair, a_t: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Returns:
        (enc_tac1_term, tac2_term): -log p_TAC1(a_t | h_tr) and log p_TAC2(a_t | h_tu), each a sum of
        per-attribute binary log-likelihoods averaged over the batch
    """
    if getattr(tac1, 'role', 'tac1') != 'tac1' or getattr(tac2, 'role', 'tac2') != 'tac2':
        raise ShapeError(f"TAC roles swapped: got '{tac1.role}' and '{tac2.role}'")
    enc_tac1_term = check_finite('frl_tac1', attribute_bce(tac1(latents.h_tr), a_t))
    tac2_term = check_finite('frl_tac2', -attribute_bce(tac2(latents.h_tu), a_t))
    return enc_tac1_term, tac2_term


def frl_role_objectives(enc_tac1_term: torch.Tensor, tac2_term: torch.Tensor) -> Dict[str, torch.Tensor]:
    """
    What each player minimizes

    TAC1 and the encoder both descend -log p_TAC1. TAC2 ascends log p_TAC2 (descends its
    negation) while the encoder descends it.
    """
    return {
        'tac1': enc_tac1_term,
        'tac2': -tac2_term,
        'encoder': enc_tac1_term + tac2_term,
    }


def feature_l1_distance(phi_i: torch.Tensor, phi_g: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over feature dimensions, averaged over the batch"""
    if phi_i.shape != phi_g.shape:
        raise ShapeError(f"feature shapes {tuple(phi_i.shape)} and {tuple(phi_g.shape)} differ")
    return (phi_i - phi_g).abs().mean(dim=-1).mean()


def protected_attribute_distance_loss(pac: PacModel, x_i: torch.Tensor, x_t: torch.Tensor,
                                      allow_untrained: bool = False) -> torch.Tensor:
    """L1 between PAC features of inputs and translations; the PAC receives no gradient"""
    with frozen_parameters(pac):
        phi_i = extract_protected_features(pac, x_i, allow_untrained=allow_untrained)
        phi_g = extract_protected_features(pac, x_t, allow_untrained=allow_untrained, differentiable=True)
        return check_finite('pad', feature_l1_distance(phi_i, phi_g))


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, C, C), normalized by C*H*W"""
    b, c, h, w = features.shape
    flat = features.reshape(b, c, h * w)
    return torch.bmm(flat, flat.transpose(1, 2)) / (c * h * w)


class PacPerceptualEmbedder:
    """Perceptual feature source backed by a trained PAC's encoder blocks"""

    embedder_id = 'pac-encoder'

    def __init__(self, pac: PacModel, content_layers: Sequence[str] = ('block2',),
                 style_layers: Sequence[str] = ('block1', 'block2')):
        self.pac = pac
        self.content_layers = list(content_layers)
        self.style_layers = list(style_layers)
        missing = [name for name in self.content_layers + self.style_layers if name not in pac.layer_names]
        if missing:
            raise MissingLayerError(f"PAC has no layer(s) {', '.join(missing)}; "
                                    f"available: {', '.join(pac.layer_names)}")

    @property
    def layer_names(self) -> List[str]:
        return self.pac.layer_names

    def feature_maps(self, images: torch.Tensor) -> Dict[str, torch.Tensor]:
        was_training = self.pac.training
        self.pac.eval()
        try:
            with frozen_parameters(self.pac):
                return self.pac.feature_maps(images)
        finally:
            self.pac.train(was_training)


def perceptual_loss(embedder, x_i: torch.Tensor, x_t: torch.Tensor, x_rec: torch.Tensor,
                    content_layers: Optional[Iterable[str]] = None,
                    style_layers: Optional[Iterable[str]] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Content distance (x_i vs x_t) and Gram style distance (x_i vs x_rec)

    Args:
        embedder: Object exposing `layer_names` and `feature_maps(images)`
        x_i: Inputs
        x_t: Translations
        x_rec: Reconstructions
        content_layers: Layers for the content term (embedder default when omitted)
        style_layers: Layers for the style term (embedder default when omitted)

    Returns:
        Tuple of (content, style), each a sum over layers of mean squared differences
    """
    names = list(getattr(embedder, 'layer_names', []))
    if len(names) < 2:
        raise MissingLayerError(f"perceptual embedder must expose at least 2 layers, found {len(names)}")
    content_layers = list(content_layers if content_layers is not None else embedder.content_layers)
    style_layers = list(style_layers if style_layers is not None else embedder.style_layers)
    missing = [n for n in content_layers + style_layers if n not in names]
    if missing:
        raise MissingLayerError(f"embedder has no layer(s) {', '.join(missing)}; available: {', '.join(names)}")

    feats_i = {k: v.detach() for k, v in embedder.feature_maps(x_i).items()}
    feats_t = embedder.feature_maps(x_t)
    feats_r = embedder.feature_maps(x_rec)

    content = sum(F.mse_loss(feats_t[n], feats_i[n]) for n in content_layers) if content_layers \
        else x_i.new_zeros(())
    style = sum(F.mse_loss(gram_matrix(feats_r[n]), gram_matrix(feats_i[n])) for n in style_layers) \
        if style_layers else x_i.new_zeros(())
    return check_finite('content', content), check_finite('style', style)


@dataclass
class LossReport:
    """Named loss terms, their weights and the weighted total"""

    terms: Dict[str, float]
    weights: Dict[str, float]
    total: float
    aux: Dict[str, float] = field(default_factory=dict)
    loss: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> Dict:
        return {'terms': dict(self.terms), 'weights': dict(self.weights), 'total': self.total,
                'aux': dict(self.aux)}

    def to_log_record(self, step: int, epoch: int) -> Dict:
        record = self.to_dict()
        record.update({'step': step, 'epoch': epoch})
        return record


def total_generator_loss(weights: LossWeights, terms: Dict[str, Optional[torch.Tensor]]) -> LossReport:
    """
    Weighted sum of the generator terms

    Terms with weight zero are skipped (their value may be None) and reported as 0.

    Returns:
        LossReport whose `total` equals the sum of weight * term over the report
    """
    unknown = sorted(set(terms) - set(TERM_WEIGHTS))
    if unknown:
        raise ShapeError(f"unknown loss term '{unknown[0]}'")

    loss = None
    report_terms = {}
    report_weights = {}
    total = 0.0
    for name, value in terms.items():
        weight = float(getattr(weights, TERM_WEIGHTS[name]))
        report_weights[name] = weight
        if weight == 0.0 or value is None:
            report_terms[name] = 0.0
            continue
        check_finite(name, value)
        report_terms[name] = float(value.detach().item())
        total += weight * report_terms[name]
        loss = weight * value if loss is None else loss + weight * value

    if not math.isfinite(total):
        raise NonFiniteLossError('total', total)
    return LossReport(terms=report_terms, weights=report_weights, total=total, loss=loss)
