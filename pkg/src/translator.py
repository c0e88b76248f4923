"""
Translator networks
Split-latent conditional generator, WGAN critic with an auxiliary attribute head, and the
two target attribute classifiers (TACs) that read the latent halves
"""
from typing import NamedTuple, Tuple, Union

import torch
import torch.nn as nn

from src.config_schema import TrainConfig
from src.errors import ShapeError

TAC_ROLES = ('tac1', 'tac2')


class LatentPair(NamedTuple):
    """Target-relevant and target-unrelated halves of the encoder output"""

    h_tr: torch.Tensor
    h_tu: torch.Tensor

    def concat(self) -> torch.Tensor:
        return torch.cat([self.h_tr, self.h_tu], dim=1)


class ResidualBlock(nn.Module):
    """conv - norm - relu - conv - norm, plus the skip"""

    def __init__(self, channels: int):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=3, stride=1, padding=1, bias=False),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, kernel_size=3, stride=1, padding=1, bias=False),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.main(x)


def _conv_norm_relu(in_channels: int, out_channels: int, kernel: int, stride: int, padding: int) -> list:
    return [
        nn.Conv2d(in_channels, out_channels, kernel_size=kernel, stride=stride, padding=padding, bias=False),
        nn.InstanceNorm2d(out_channels, affine=True),
        nn.ReLU(inplace=True),
    ]


class Generator(nn.Module):
    """
    Encoder-decoder generator conditioned on a target attribute vector

    The encoder reads the image depth-concatenated with the attribute vector tiled to HxW
    and produces 4*base channels at 1/4 resolution, split channel-wise into (h_tr, h_tu).
    """

    def __init__(self, num_attrs: int, base_channels: int = 32, num_res_blocks: int = 4,
                 channels_tr: int = None, resolution: int = 64):
        super().__init__()
        if resolution % 4 != 0:
            raise ShapeError(f"generator resolution must be a multiple of 4, got {resolution}")
        self.num_attrs = num_attrs
        self.resolution = resolution
        self.latent_channels = 4 * base_channels
        self.channels_tr = self.latent_channels // 2 if channels_tr is None else channels_tr
        self.channels_tu = self.latent_channels - self.channels_tr
        if not 0 < self.channels_tr < self.latent_channels:
            raise ShapeError(f"latent split {self.channels_tr}/{self.channels_tu} leaves an empty half")

        enc_blocks = num_res_blocks // 2
        layers = _conv_norm_relu(3 + num_attrs, base_channels, 7, 1, 3)
        layers += _conv_norm_relu(base_channels, 2 * base_channels, 4, 2, 1)
        layers += _conv_norm_relu(2 * base_channels, 4 * base_channels, 4, 2, 1)
        layers += [ResidualBlock(self.latent_channels) for _ in range(enc_blocks)]
        self.encoder = nn.Sequential(*layers)

        layers = [ResidualBlock(self.latent_channels) for _ in range(num_res_blocks - enc_blocks)]
        for channels in (4 * base_channels, 2 * base_channels):
            layers += [
                nn.ConvTranspose2d(channels, channels // 2, kernel_size=4, stride=2, padding=1, bias=False),
                nn.InstanceNorm2d(channels // 2, affine=True),
                nn.ReLU(inplace=True),
            ]
        layers += [nn.Conv2d(base_channels, 3, kernel_size=7, stride=1, padding=3, bias=False), nn.Tanh()]
        self.decoder = nn.Sequential(*layers)

    def encode(self, image: torch.Tensor, target_attrs: torch.Tensor) -> LatentPair:
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[2] != image.shape[3]:
            raise ShapeError(f"expected images of shape (B, 3, R, R), got {tuple(image.shape)}")
        if image.shape[2] % 4 != 0:
            raise ShapeError(f"image size {image.shape[2]} is not a multiple of 4")
        if target_attrs.dim() != 2 or target_attrs.shape[1] != self.num_attrs:
            raise ShapeError(f"expected attribute vectors of length {self.num_attrs}, "
                             f"got shape {tuple(target_attrs.shape)}")
        if target_attrs.shape[0] != image.shape[0]:
            raise ShapeError(f"{image.shape[0]} images but {target_attrs.shape[0]} attribute vectors")

        condition = target_attrs.to(image.dtype).view(*target_attrs.shape, 1, 1)
        condition = condition.expand(-1, -1, image.shape[2], image.shape[3])
        h = self.encoder(torch.cat([image, condition], dim=1))
        return split_latent(h, self.channels_tr)

    def decode(self, latents: LatentPair) -> torch.Tensor:
        if latents.h_tr.shape[1] != self.channels_tr or latents.h_tu.shape[1] != self.channels_tu:
            raise ShapeError(f"latent halves have {latents.h_tr.shape[1]}/{latents.h_tu.shape[1]} channels, "
                             f"generator expects {self.channels_tr}/{self.channels_tu}")
        if latents.h_tr.shape[0] != latents.h_tu.shape[0] or latents.h_tr.shape[2:] != latents.h_tu.shape[2:]:
            raise ShapeError("latent halves disagree in batch or spatial size")
        return self.decoder(latents.concat())

    def forward(self, image: torch.Tensor, target_attrs: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(image, target_attrs))


def split_latent(h: torch.Tensor, channels_tr: int) -> LatentPair:
    return LatentPair(h[:, :channels_tr], h[:, channels_tr:])


class Discriminator(nn.Module):
    """Stride-2 conv trunk without normalization; critic and attribute heads span the final map"""

    def __init__(self, num_attrs: int, resolution: int = 64, base_channels: int = 32, num_layers: int = 5):
        super().__init__()
        if resolution % (2 ** num_layers) != 0:
            raise ShapeError(f"resolution {resolution} is not divisible by 2**{num_layers}")
        self.num_attrs = num_attrs
        self.resolution = resolution

        layers = []
        in_channels, out_channels = 3, base_channels
        for _ in range(num_layers):
            layers += [nn.Conv2d(in_channels, out_channels, kernel_size=4, stride=2, padding=1),
                       nn.LeakyReLU(0.01)]
            in_channels, out_channels = out_channels, out_channels * 2
        self.trunk = nn.Sequential(*layers)

        final_size = resolution // 2 ** num_layers
        self.critic_head = nn.Conv2d(in_channels, 1, kernel_size=final_size, bias=False)
        self.attr_head = nn.Conv2d(in_channels, num_attrs, kernel_size=final_size, bias=False)

    def forward(self, image: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if image.dim() != 4 or tuple(image.shape[1:]) != (3, self.resolution, self.resolution):
            raise ShapeError(f"critic expects (B, 3, {self.resolution}, {self.resolution}), "
                             f"got {tuple(image.shape)}")
        features = self.trunk(image)
        return self.critic_head(features).view(-1), self.attr_head(features).view(-1, self.num_attrs)


class TargetAttributeClassifier(nn.Module):
    """Average-pooled latent half -> hidden layer -> K logits"""

    def __init__(self, role: str, in_channels: int, num_attrs: int, hidden: int = 64):
        super().__init__()
        if role not in TAC_ROLES:
            raise ShapeError(f"unknown TAC role '{role}'")
        self.role = role
        self.in_channels = in_channels
        self.net = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(in_channels, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, num_attrs),
        )

    def forward(self, latent_half: torch.Tensor) -> torch.Tensor:
        if latent_half.dim() != 4 or latent_half.shape[1] != self.in_channels:
            raise ShapeError(f"{self.role} expects {self.in_channels}-channel latents, "
                             f"got shape {tuple(latent_half.shape)}")
        return self.net(latent_half)


class TranslatorModels(NamedTuple):
    generator: Generator
    discriminator: Discriminator
    tac1: TargetAttributeClassifier
    tac2: TargetAttributeClassifier


def build_translator(config: TrainConfig, num_attrs: int) -> TranslatorModels:
    """Instantiate all four networks from a training config"""
    generator = Generator(num_attrs, config.gen_base_channels, config.num_res_blocks,
                          config.channels_tr, config.resolution)
    return TranslatorModels(
        generator=generator,
        discriminator=Discriminator(num_attrs, config.resolution, config.disc_base_channels, config.disc_layers),
        tac1=TargetAttributeClassifier('tac1', generator.channels_tr, num_attrs, config.tac_hidden),
        tac2=TargetAttributeClassifier('tac2', generator.channels_tu, num_attrs, config.tac_hidden),
    )


def encode(gen: Generator, image: torch.Tensor, target_attrs: torch.Tensor) -> LatentPair:
    return gen.encode(image, target_attrs)


def decode(gen: Generator, latents: LatentPair) -> torch.Tensor:
    return gen.decode(latents)


def translate(gen: Generator, image: torch.Tensor, target_attrs: torch.Tensor) -> torch.Tensor:
    return gen(image, target_attrs)


def discriminate(disc: Discriminator, image: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return disc(image)


def tac_predict(tac: TargetAttributeClassifier, latent: Union[LatentPair, torch.Tensor]) -> torch.Tensor:
    """TAC logits; a LatentPair is routed to the half matching the TAC's role"""
    if isinstance(latent, LatentPair):
        latent = latent.h_tr if tac.role == 'tac1' else latent.h_tu
    return tac(latent)


@torch.no_grad()
def translate_batched(gen: Generator, images: torch.Tensor, target_attrs: torch.Tensor,
                      batch_size: int = 64) -> torch.Tensor:
    """Eval-mode translation in chunks"""
    was_training = gen.training
    gen.eval()
    try:
        parts = [gen(images[i:i + batch_size], target_attrs[i:i + batch_size])
                 for i in range(0, len(images), batch_size)]
    finally:
        gen.train(was_training)
    return torch.cat(parts) if parts else images.new_empty((0,) + tuple(images.shape[1:]))
