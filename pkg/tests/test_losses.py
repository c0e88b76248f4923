import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as strat

from src.config_schema import LossWeights
from src.errors import MissingLayerError, NonFiniteLossError, ShapeError
from src.losses import (PacPerceptualEmbedder, attribute_bce, check_finite, critic_loss, fair_representation_loss,
                        feature_l1_distance, frl_role_objectives, generator_adversarial_loss, gradient_penalty,
                        gram_matrix, perceptual_loss, protected_attribute_distance_loss, reconstruction_loss,
                        total_generator_loss)
from src.pac import PacModel
from src.translator import LatentPair, TargetAttributeClassifier


def _constant_tac(role, channels, bias):
    tac = TargetAttributeClassifier(role, channels, 5, hidden=4)
    with torch.no_grad():
        tac.net[-1].weight.zero_()
        tac.net[-1].bias.fill_(bias)
    return tac


def _latents(batch=3):
    torch.manual_seed(0)
    return LatentPair(torch.randn(batch, 4, 2, 2, requires_grad=True), torch.randn(batch, 6, 2, 2, requires_grad=True))


def test_uniform_logits_give_k_ln2():
    targets = torch.randint(0, 2, (4, 5)).float()
    assert attribute_bce(torch.zeros(4, 5), targets).item() == pytest.approx(5 * math.log(2))


def test_attribute_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        attribute_bce(torch.zeros(4, 5), torch.zeros(4, 4))


def test_gradient_penalty_of_linear_critic():
    real = torch.randn(2, 3, 4, 4)
    fake = torch.randn(2, 3, 4, 4)
    penalty = gradient_penalty(lambda x: x.flatten(1).sum(dim=1), real, fake, torch.Generator().manual_seed(0))
    assert penalty.item() == pytest.approx((math.sqrt(48) - 1) ** 2, rel=1e-5)


def test_gradient_penalty_zero_for_unit_gradient():
    real, fake = torch.randn(3, 1, 2, 2), torch.randn(3, 1, 2, 2)
    penalty = gradient_penalty(lambda x: x[:, 0, 0, 0], real, fake)
    assert penalty.item() == pytest.approx(0.0, abs=1e-7)


def test_gradient_penalty_needs_input_dependence():
    weight = torch.ones(1, requires_grad=True)
    with pytest.raises(ShapeError):
        gradient_penalty(lambda x: weight.expand(x.shape[0]), torch.randn(2, 3), torch.randn(2, 3))
    with pytest.raises(ShapeError):
        gradient_penalty(lambda x: torch.zeros(x.shape[0]), torch.randn(2, 3), torch.randn(2, 3))
    with pytest.raises(ShapeError):
        gradient_penalty(lambda x: x.sum(dim=1), torch.randn(2, 3), torch.randn(3, 3))


def test_critic_loss_with_zero_critic_is_ce_only():
    def zero_critic(x):
        return torch.zeros(x.shape[0]), torch.zeros(x.shape[0], 5)

    attrs = torch.randint(0, 2, (4, 5)).float()
    loss, terms = critic_loss(zero_critic, torch.randn(4, 3, 4, 4), attrs, torch.randn(4, 3, 4, 4), w_gp=0.0)
    assert loss.item() == pytest.approx(5 * math.log(2))
    assert terms['gp'].item() == 0.0
    assert terms['wasserstein'].item() == 0.0


def test_critic_loss_matches_per_sample_sum():
    torch.manual_seed(1)
    weight = torch.randn(48)

    def critic(x):
        return x.flatten(1) @ weight, torch.zeros(x.shape[0], 2)

    real, fake = torch.randn(4, 3, 4, 4), torch.randn(4, 3, 4, 4)
    loss, terms = critic_loss(critic, real, torch.zeros(4, 2), fake, w_gp=0.0)
    expected = sum(float(fake[i].flatten() @ weight) for i in range(4)) / 4 \
        - sum(float(real[i].flatten() @ weight) for i in range(4)) / 4 + 2 * math.log(2)
    assert loss.item() == pytest.approx(expected, rel=1e-5, abs=1e-5)


def test_generator_adversarial_terms():
    def critic(x):
        return torch.full((x.shape[0],), 2.0), torch.zeros(x.shape[0], 5)

    loss, terms = generator_adversarial_loss(critic, torch.randn(3, 3, 4, 4), torch.ones(3, 5))
    assert terms['adv'].item() == pytest.approx(-2.0)
    assert terms['cls'].item() == pytest.approx(5 * math.log(2))
    assert loss.item() == pytest.approx(-2.0 + 5 * math.log(2))


def test_reconstruction_identity_generator_is_zero():
    x = torch.rand(2, 3, 4, 4)
    cycle, identity = reconstruction_loss(lambda image, attrs: image, x, torch.zeros(2, 5), x.clone())
    assert cycle.item() == 0.0 and identity.item() == 0.0


def test_reconstruction_constant_generator():
    x = torch.full((2, 3, 4, 4), 0.5)
    gray = lambda image, attrs: torch.zeros_like(image)  # noqa: E731
    cycle, identity = reconstruction_loss(gray, x, torch.zeros(2, 5), torch.zeros_like(x))
    assert cycle.item() == pytest.approx(0.5)
    assert identity.item() == pytest.approx(0.5)
    with pytest.raises(ShapeError):
        reconstruction_loss(gray, x, torch.zeros(2, 5), torch.zeros(2, 3, 2, 2))


def test_confident_tac1_term_vanishes():
    latents = _latents()
    tac1 = _constant_tac('tac1', 4, 50.0)
    tac2 = _constant_tac('tac2', 6, 0.0)
    enc_tac1_term, _ = fair_representation_loss(tac1, tac2, latents, torch.ones(3, 5))
    assert enc_tac1_term.item() == pytest.approx(0.0, abs=1e-6)


def test_uniform_tac2_term():
    latents = _latents()
    _, tac2_term = fair_representation_loss(_constant_tac('tac1', 4, 0.0), _constant_tac('tac2', 6, 0.0),
                                            latents, torch.randint(0, 2, (3, 5)).float())
    assert tac2_term.item() == pytest.approx(5 * math.log(0.5))


def test_tac_roles_must_not_swap():
    latents = _latents()
    with pytest.raises(ShapeError):
        fair_representation_loss(_constant_tac('tac2', 4, 0.0), _constant_tac('tac1', 6, 0.0), latents,
                                 torch.ones(3, 5))


def test_tac2_gradient_opposes_encoder_gradient():
    latents = _latents()
    tac1 = TargetAttributeClassifier('tac1', 4, 5, hidden=4)
    tac2 = TargetAttributeClassifier('tac2', 6, 5, hidden=4)
    a_t = torch.randint(0, 2, (3, 5)).float()
    objectives = frl_role_objectives(*fair_representation_loss(tac1, tac2, latents, a_t))
    grad_encoder = torch.autograd.grad(objectives['encoder'], latents.h_tu, retain_graph=True)[0]
    grad_tac2 = torch.autograd.grad(objectives['tac2'], latents.h_tu)[0]
    assert torch.allclose(grad_encoder, -grad_tac2)
    assert grad_encoder.abs().sum() > 0


def test_feature_distance_uses_mean_over_dimensions():
    assert feature_l1_distance(torch.tensor([[1.0, 2.0]]), torch.zeros(1, 2)).item() == pytest.approx(1.5)
    with pytest.raises(ShapeError):
        feature_l1_distance(torch.zeros(1, 2), torch.zeros(1, 3))


def test_padl_is_zero_for_identical_images(tiny_pac):
    x = torch.randn(2, 3, 16, 16)
    assert protected_attribute_distance_loss(tiny_pac, x, x.clone()).item() == pytest.approx(0.0, abs=1e-7)


def test_padl_gives_pac_no_gradient():
    torch.manual_seed(0)
    pac = PacModel(resolution=16, base_channels=4)
    pac.trained = True
    x_i = torch.randn(2, 3, 16, 16)
    x_t = torch.randn(2, 3, 16, 16, requires_grad=True)
    protected_attribute_distance_loss(pac, x_i, x_t).backward()
    assert all(p.grad is None for p in pac.parameters())
    assert all(p.requires_grad for p in pac.parameters())
    assert x_t.grad is not None and x_t.grad.abs().sum() > 0


@given(c=strat.floats(min_value=-10, max_value=10, allow_nan=False))
def test_gram_of_constant_map(c):
    gram = gram_matrix(torch.full((1, 1, 3, 3), c, dtype=torch.float64))
    assert gram.shape == (1, 1, 1)
    assert gram.item() == pytest.approx(c * c, rel=1e-9, abs=1e-12)


def test_gram_matches_nested_loops():
    features = torch.arange(8, dtype=torch.float64).reshape(1, 2, 2, 2)
    expected = torch.zeros(2, 2, dtype=torch.float64)
    for i in range(2):
        for j in range(2):
            for h in range(2):
                for w in range(2):
                    expected[i, j] += features[0, i, h, w] * features[0, j, h, w]
    assert torch.allclose(gram_matrix(features)[0], expected / 8)


def test_perceptual_loss_identical_images(tiny_pac):
    embedder = PacPerceptualEmbedder(tiny_pac)
    x = torch.randn(2, 3, 16, 16)
    content, style = perceptual_loss(embedder, x, x.clone(), x.clone())
    assert content.item() == pytest.approx(0.0, abs=1e-7)
    assert style.item() == pytest.approx(0.0, abs=1e-7)
    different, _ = perceptual_loss(embedder, x, torch.randn(2, 3, 16, 16), x)
    assert different.item() > 0


def test_perceptual_layers_must_exist(tiny_pac):
    with pytest.raises(MissingLayerError):
        PacPerceptualEmbedder(tiny_pac, content_layers=['block9'])

    class OneLayer:
        layer_names = ['only']

    with pytest.raises(MissingLayerError):
        perceptual_loss(OneLayer(), torch.zeros(1), torch.zeros(1), torch.zeros(1))


def test_total_with_all_weights_zero():
    weights = LossWeights(**{name: 0.0 for name in ('w_adv', 'w_cls', 'w_rec', 'w_frl', 'w_pad', 'w_percept')})
    report = total_generator_loss(weights, {'adv': torch.tensor(3.0), 'pad': None})
    assert report.total == 0.0
    assert report.loss is None
    assert report.terms == {'adv': 0.0, 'pad': 0.0}


def test_total_is_weighted_sum():
    weights = LossWeights(w_adv=1.0, w_cls=2.0, w_rec=10.0, w_pad=0.5)
    terms = {'adv': torch.tensor(-1.0), 'cls': torch.tensor(0.25), 'cycle': torch.tensor(0.1),
             'identity': torch.tensor(0.05), 'pad': torch.tensor(2.0)}
    report = total_generator_loss(weights, terms)
    expected = -1.0 + 2.0 * 0.25 + 10.0 * 0.1 + 10.0 * 0.05 + 0.5 * 2.0
    assert report.total == pytest.approx(expected)
    assert report.loss.item() == pytest.approx(expected)
    assert report.weights['cycle'] == 10.0
    assert set(report.to_dict()) == {'terms', 'weights', 'total', 'aux'}


def test_total_rejects_unknown_and_non_finite_terms():
    with pytest.raises(ShapeError):
        total_generator_loss(LossWeights(), {'vgg': torch.tensor(1.0)})
    with pytest.raises(NonFiniteLossError) as info:
        total_generator_loss(LossWeights(), {'pad': torch.tensor(float('nan'))})
    assert info.value.term == 'pad'
    with pytest.raises(NonFiniteLossError):
        check_finite('style', torch.tensor(float('inf')))


def test_analytic_gradients_match_finite_differences():
    torch.manual_seed(0)
    logits = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    targets = torch.randint(0, 2, (3, 2)).double()
    assert torch.autograd.gradcheck(lambda z: attribute_bce(z, targets), (logits,), eps=1e-6, atol=1e-4)

    phi = (torch.rand(2, 3, dtype=torch.float64) + 1.0).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda p: feature_l1_distance(p, torch.zeros_like(p)), (phi,),
                                    eps=1e-6, atol=1e-4)

    features = torch.randn(1, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(gram_matrix, (features,), eps=1e-6, atol=1e-4)


def test_gradient_penalty_matches_finite_differences(central_difference):
    torch.manual_seed(4)
    real = torch.randn(4, 3, dtype=torch.float64)
    fake = torch.randn(4, 3, dtype=torch.float64)
    epsilon = torch.tensor([0.1, 0.4, 0.6, 0.9], dtype=torch.float64)

    def penalty(theta):
        return gradient_penalty(lambda x: torch.tanh(x @ theta[:3] + theta[3]), real, fake, epsilon=epsilon)

    theta = torch.tensor([0.7, -0.4, 1.1, 0.2], dtype=torch.float64, requires_grad=True)
    analytic, = torch.autograd.grad(penalty(theta), theta)
    numeric = central_difference(penalty, theta)
    assert torch.allclose(analytic, numeric, rtol=1e-4, atol=1e-9)


def test_frl_roles_match_finite_differences(central_difference):
    torch.manual_seed(5)
    tac1 = TargetAttributeClassifier('tac1', 4, 5, hidden=4).double()
    tac2 = TargetAttributeClassifier('tac2', 6, 5, hidden=4).double()
    base_tr = torch.randn(3, 4, 2, 2, dtype=torch.float64)
    base_tu = torch.randn(3, 6, 2, 2, dtype=torch.float64)
    a_t = torch.tensor([[1, 0, 1, 0, 1], [0, 0, 1, 1, 0], [1, 1, 0, 0, 1]], dtype=torch.float64)

    def terms(theta):
        # two-parameter encoder scaling each latent half
        return fair_representation_loss(tac1, tac2, LatentPair(theta[0] * base_tr, theta[1] * base_tu), a_t)

    theta = torch.tensor([0.9, 1.4], dtype=torch.float64, requires_grad=True)
    objectives = frl_role_objectives(*terms(theta))
    grad_encoder, = torch.autograd.grad(objectives['encoder'], theta, retain_graph=True)
    grad_tac2, = torch.autograd.grad(objectives['tac2'], theta, retain_graph=True)
    grad_tac1, = torch.autograd.grad(objectives['tac1'], theta)

    numeric_tac1 = central_difference(lambda t: terms(t)[0], theta)
    numeric_tac2 = central_difference(lambda t: terms(t)[1], theta)
    assert numeric_tac2[1].abs() > 0
    assert torch.allclose(grad_tac1, numeric_tac1, rtol=1e-4, atol=1e-9)
    assert torch.allclose(grad_encoder, numeric_tac1 + numeric_tac2, rtol=1e-4, atol=1e-9)
    assert torch.allclose(grad_tac2, -numeric_tac2, rtol=1e-4, atol=1e-9)
    # h_tu only moves with the second parameter; the two roles pull it in opposite directions
    assert torch.sign(grad_encoder[1] - numeric_tac1[1]) == -torch.sign(grad_tac2[1])


def test_padl_matches_finite_differences(tiny_pac, central_difference):
    pac = tiny_pac.double()
    torch.manual_seed(6)
    x_i = torch.rand(2, 3, 16, 16, dtype=torch.float64) * 2 - 1

    def distance(theta):
        # affine toy generator
        return protected_attribute_distance_loss(pac, x_i, theta[0] * x_i + theta[1])

    theta = torch.tensor([1.3, 0.2], dtype=torch.float64, requires_grad=True)
    analytic, = torch.autograd.grad(distance(theta), theta)
    numeric = central_difference(distance, theta)
    assert numeric.abs().sum() > 0
    assert torch.allclose(analytic, numeric, rtol=1e-4, atol=1e-9)
