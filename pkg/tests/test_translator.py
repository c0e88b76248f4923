import pytest
import torch

from src.config_schema import TrainConfig
from src.errors import ShapeError
from src.translator import (Discriminator, Generator, LatentPair, TargetAttributeClassifier, build_translator,
                            discriminate, tac_predict, translate_batched)


@pytest.fixture
def generator():
    torch.manual_seed(0)
    return Generator(num_attrs=5, base_channels=4, num_res_blocks=2, resolution=16)


def test_encoder_reads_image_plus_tiled_attributes(generator):
    assert generator.encoder[0].in_channels == 3 + 5


def test_latent_split_bookkeeping(generator):
    latents = generator.encode(torch.randn(2, 3, 16, 16), torch.ones(2, 5))
    assert latents.h_tr.shape == (2, 8, 4, 4)
    assert latents.h_tu.shape == (2, 8, 4, 4)
    assert latents.concat().shape == (2, 16, 4, 4)


def test_uneven_latent_split():
    gen = Generator(num_attrs=3, base_channels=4, num_res_blocks=0, channels_tr=4, resolution=16)
    latents = gen.encode(torch.randn(1, 3, 16, 16), torch.zeros(1, 3))
    assert (latents.h_tr.shape[1], latents.h_tu.shape[1]) == (4, 12)
    with pytest.raises(ShapeError):
        Generator(num_attrs=3, base_channels=4, channels_tr=16, resolution=16)


def test_output_shape_and_range(generator):
    out = generator(torch.randn(3, 3, 16, 16) * 5, torch.zeros(3, 5))
    assert out.shape == (3, 3, 16, 16)
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_decode_rejects_mismatched_halves(generator):
    latents = generator.encode(torch.randn(2, 3, 16, 16), torch.zeros(2, 5))
    with pytest.raises(ShapeError):
        generator.decode(LatentPair(latents.h_tu[:, :4], latents.h_tr))
    with pytest.raises(ShapeError):
        generator.decode(LatentPair(latents.h_tr[:1], latents.h_tu))


@pytest.mark.parametrize('images, attrs', [
    (torch.randn(2, 3, 16, 16), torch.zeros(2, 4)),
    (torch.randn(2, 3, 18, 18), torch.zeros(2, 5)),
    (torch.randn(2, 1, 16, 16), torch.zeros(2, 5)),
    (torch.randn(2, 3, 16, 16), torch.zeros(3, 5)),
])
def test_encode_validates_inputs(generator, images, attrs):
    with pytest.raises(ShapeError):
        generator.encode(images, attrs)


def test_attribute_vector_changes_output(generator):
    generator.eval()
    image = torch.randn(1, 3, 16, 16)
    a = generator(image, torch.zeros(1, 5))
    b = generator(image, torch.ones(1, 5))
    assert not torch.allclose(a, b)


def test_batched_translation_matches_per_item(generator):
    images = torch.randn(5, 3, 16, 16)
    attrs = torch.randint(0, 2, (5, 5)).float()
    batched = translate_batched(generator, images, attrs, batch_size=2)
    generator.eval()
    with torch.no_grad():
        single = torch.cat([generator(images[i:i + 1], attrs[i:i + 1]) for i in range(5)])
    assert torch.allclose(batched, single, atol=1e-5)


def test_discriminator_heads():
    disc = Discriminator(num_attrs=5, resolution=16, base_channels=4, num_layers=4)
    scores, logits = discriminate(disc, torch.randn(3, 3, 16, 16))
    assert scores.shape == (3,)
    assert logits.shape == (3, 5)
    with pytest.raises(ShapeError):
        disc(torch.randn(3, 3, 32, 32))
    with pytest.raises(ShapeError):
        Discriminator(num_attrs=5, resolution=16, num_layers=5)


def test_tac_routes_latent_pair_by_role(generator):
    latents = generator.encode(torch.randn(2, 3, 16, 16), torch.zeros(2, 5))
    tac1 = TargetAttributeClassifier('tac1', generator.channels_tr, 5, hidden=8)
    tac2 = TargetAttributeClassifier('tac2', generator.channels_tu, 5, hidden=8)
    assert torch.equal(tac_predict(tac1, latents), tac1(latents.h_tr))
    assert torch.equal(tac_predict(tac2, latents), tac2(latents.h_tu))
    assert tac_predict(tac1, latents).shape == (2, 5)
    with pytest.raises(ShapeError):
        tac1(latents.concat())
    with pytest.raises(ShapeError):
        TargetAttributeClassifier('tac3', 8, 5)


def test_build_translator_from_config():
    config = TrainConfig(resolution=16, gen_base_channels=4, num_res_blocks=2, disc_base_channels=4,
                         disc_layers=4, tac_hidden=8, latent_split=0.25)
    models = build_translator(config, num_attrs=3)
    assert models.generator.channels_tr == config.channels_tr == 4
    assert models.tac1.in_channels == 4
    assert models.tac2.in_channels == 12
