"""Learnable cast: shared place and occlusion encoders, a domain-conditioned
appearance encoder, a generator modulated per layer by the appearance code,
per-occlusion-side image discriminators with auxiliary domain heads, a shared
appearance discriminator, and a feature-level place discriminator.

Forward passes are deterministic given (params, inputs, recorded noise) and
read-only in the parameters; parameter updates require exclusive access.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError

PIXEL_RANGE_TOL = 1e-5
# sigmoid saturates to exact 0/1 in float32; keep realness strictly inside (0,1)
REALNESS_EPS = 1e-6

ENCODER_RES_BLOCKS = 1
GENERATOR_RES_BLOCKS = 2
DISCRIMINATOR_BASE_CHANNELS = 24
APPEARANCE_ENCODER_CHANNELS = (16, 32, 64, 64)
STYLE_MLP_HIDDEN = 64


# ---------------------------------------------------------------------------
# batch / code containers


@dataclass
class ImageBatch:
    """Batch of RGB images in [-1, 1] with per-item domain labels."""

    pixels: torch.Tensor  # B x 3 x H x W
    appearance_domain: torch.Tensor  # B, integer in [0, k)
    occlusion_flag: torch.Tensor  # B, bool; True = "with occlusion" side

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise ShapeError(f"pixels must be BxCxHxW, got {tuple(self.pixels.shape)}")
        b = self.pixels.shape[0]
        if self.appearance_domain.shape != (b,) or self.occlusion_flag.shape != (b,):
            raise ShapeError("per-item labels must match the batch size")
        if not torch.isfinite(self.pixels).all():
            raise ValidationError("pixels contain non-finite values")
        bound = 1.0 + PIXEL_RANGE_TOL
        if self.pixels.abs().max().item() > bound:
            raise ValidationError("pixel values fall outside [-1, 1]")

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass
class AppearanceEncoding:
    """Gaussian appearance posterior plus the reparameterized sample."""

    mean: torch.Tensor  # B x C_a
    logvar: torch.Tensor  # B x C_a
    sample: torch.Tensor  # B x C_a
    eps: torch.Tensor  # recorded noise; zeros in deterministic mode

    def __iter__(self):
        return iter((self.mean, self.logvar, self.sample))


@dataclass
class FactorCodes:
    """The (place, occlusion, appearance) latent triple for one batch."""

    place: torch.Tensor  # B x C_p x h x h
    occlusion: torch.Tensor  # B x C_o x h x h
    appearance: AppearanceEncoding

    @property
    def appearance_mean(self) -> torch.Tensor:
        return self.appearance.mean

    @property
    def appearance_logvar(self) -> torch.Tensor:
        return self.appearance.logvar

    @property
    def appearance_sample(self) -> torch.Tensor:
        return self.appearance.sample


def domain_one_hot(domain: torch.Tensor, domain_count: int) -> torch.Tensor:
    """One-hot rows (exactly one 1 per row) for integer domain labels."""
    if domain.dim() != 1:
        raise ShapeError("domain labels must be a 1-D integer tensor")
    if domain.numel() and (domain.min().item() < 0 or domain.max().item() >= domain_count):
        raise ValidationError(
            f"domain index out of range [0, {domain_count}): {domain.tolist()}"
        )
    return F.one_hot(domain.long(), num_classes=domain_count).float()


# ---------------------------------------------------------------------------
# building blocks


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.norm1 = nn.InstanceNorm2d(channels, affine=True)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.norm2 = nn.InstanceNorm2d(channels, affine=True)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return x + h


class ModulatedResBlock(nn.Module):
    """Residual block whose normalized activations get a per-channel affine
    (scale, shift) computed from the appearance/domain style vector."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.norm1 = nn.InstanceNorm2d(channels, affine=False)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.norm2 = nn.InstanceNorm2d(channels, affine=False)

    @staticmethod
    def _modulate(x, gamma, beta):
        return x * (1.0 + gamma[:, :, None, None]) + beta[:, :, None, None]

    def forward(self, x, g1, b1, g2, b2):
        h = F.relu(self._modulate(self.norm1(self.conv1(x)), g1, b1))
        h = self._modulate(self.norm2(self.conv2(h)), g2, b2)
        return x + h


class ContentEncoder(nn.Module):
    """Two stride-2 convolutions then residual blocks; spatial size /4."""

    def __init__(self, out_channels: int):
        super().__init__()
        c1 = max(out_channels // 4, 4)
        c2 = max(out_channels // 2, 8)
        self.stem = nn.Sequential(
            nn.Conv2d(3, c1, 7, 1, 3),
            nn.InstanceNorm2d(c1, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 4, 2, 1),
            nn.InstanceNorm2d(c2, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(c2, out_channels, 4, 2, 1),
            nn.InstanceNorm2d(out_channels, affine=True),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.Sequential(*[ResBlock(out_channels) for _ in range(ENCODER_RES_BLOCKS)])

    def forward(self, x):
        size = x.shape[-1]
        if x.shape[-2] != size:
            raise ShapeError(f"encoder requires square input, got {tuple(x.shape[-2:])}")
        if size % 4 != 0:
            raise ShapeError(f"input size {size} is not divisible by 4")
        return self.blocks(self.stem(x))


class AppearanceEncoder(nn.Module):
    """Convolutions then fully-connected heads producing a global
    (mean, logvar) pair; the domain one-hot enters as tiled input planes."""

    def __init__(self, appearance_dim: int, domain_count: int):
        super().__init__()
        chans = APPEARANCE_ENCODER_CHANNELS
        layers = []
        prev = 3 + domain_count
        for c in chans:
            layers += [nn.Conv2d(prev, c, 4, 2, 1), nn.ReLU(inplace=True)]
            prev = c
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Sequential(nn.Linear(prev, STYLE_MLP_HIDDEN), nn.ReLU(inplace=True))
        self.mean_head = nn.Linear(STYLE_MLP_HIDDEN, appearance_dim)
        self.logvar_head = nn.Linear(STYLE_MLP_HIDDEN, appearance_dim)

    def forward(self, x, one_hot):
        planes = one_hot[:, :, None, None].expand(-1, -1, x.shape[-2], x.shape[-1])
        h = self.conv(torch.cat([x, planes], dim=1))
        h = self.fc(torch.flatten(F.adaptive_avg_pool2d(h, 1), 1))
        return self.mean_head(h), self.logvar_head(h)


class Generator(nn.Module):
    """Concatenates place and occlusion codes, refines them through
    appearance-modulated residual blocks, and upsamples back to image size."""

    def __init__(self, place_channels: int, occlusion_channels: int,
                 appearance_dim: int, domain_count: int):
        super().__init__()
        g = place_channels
        self.fuse = nn.Sequential(
            nn.Conv2d(place_channels + occlusion_channels, g, 3, 1, 1),
            nn.InstanceNorm2d(g, affine=True),
            nn.ReLU(inplace=True),
        )
        self.blocks = nn.ModuleList([ModulatedResBlock(g) for _ in range(GENERATOR_RES_BLOCKS)])
        self.style_mlp = nn.Sequential(
            nn.Linear(appearance_dim + domain_count, STYLE_MLP_HIDDEN),
            nn.ReLU(inplace=True),
            nn.Linear(STYLE_MLP_HIDDEN, GENERATOR_RES_BLOCKS * 4 * g),
        )
        c1 = max(g // 2, 8)
        c2 = max(g // 4, 8)
        self.up = nn.Sequential(
            nn.ConvTranspose2d(g, c1, 4, 2, 1),
            nn.InstanceNorm2d(c1, affine=True),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(c1, c2, 4, 2, 1),
            nn.InstanceNorm2d(c2, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(c2, 3, 7, 1, 3),
            nn.Tanh(),
        )
        self._g = g

    def forward(self, place, occlusion, appearance, one_hot):
        if place.shape[-2:] != occlusion.shape[-2:] or place.shape[0] != occlusion.shape[0]:
            raise ShapeError(
                f"place {tuple(place.shape)} and occlusion {tuple(occlusion.shape)} "
                "codes are not spatially aligned"
            )
        h = self.fuse(torch.cat([place, occlusion], dim=1))
        style = self.style_mlp(torch.cat([appearance, one_hot], dim=1))
        chunks = style.chunk(GENERATOR_RES_BLOCKS * 4, dim=1)
        for i, block in enumerate(self.blocks):
            g1, b1, g2, b2 = chunks[4 * i : 4 * i + 4]
            h = block(h, g1, b1, g2, b2)
        return self.up(h)


class ImageDiscriminator(nn.Module):
    """Patch realness map plus an auxiliary domain-classification head."""

    def __init__(self, domain_count: int):
        super().__init__()
        d = DISCRIMINATOR_BASE_CHANNELS
        self.features = nn.Sequential(
            nn.Conv2d(3, d, 4, 2, 1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(d, 2 * d, 4, 2, 1),
            nn.InstanceNorm2d(2 * d, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * d, 4 * d, 4, 2, 1),
            nn.InstanceNorm2d(4 * d, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.realness_head = nn.Conv2d(4 * d, 1, 3, 1, 1)
        self.domain_head = nn.Linear(4 * d, domain_count)

    def forward(self, x):
        h = self.features(x)
        realness = torch.sigmoid(self.realness_head(h))
        realness = realness.clamp(REALNESS_EPS, 1.0 - REALNESS_EPS)
        logits = self.domain_head(torch.flatten(F.adaptive_avg_pool2d(h, 1), 1))
        return realness, logits


class PlaceDiscriminator(nn.Module):
    """Convolutional head over the spatial place code; one logit per item."""

    def __init__(self, place_channels: int):
        super().__init__()
        d = 64
        self.net = nn.Sequential(
            nn.Conv2d(place_channels, d, 3, 2, 1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(d, d, 3, 2, 1),
            nn.LeakyReLU(0.2, inplace=True),
        )
        self.head = nn.Linear(d, 1)

    def forward(self, code):
        h = self.net(code)
        return self.head(torch.flatten(F.adaptive_avg_pool2d(h, 1), 1)).squeeze(1)


# ---------------------------------------------------------------------------
# the assembled model


OCCLUSION_SIDE_KEYS = {False: "occlusion_without", True: "occlusion_with"}


class FactorModel(nn.Module):
    """All learnable parameters, grouped into generator-side and
    discriminator-side collections for alternating optimization."""

    def __init__(self, crop_size: int, place_channels: int, occlusion_channels: int,
                 appearance_dim: int, domain_count: int):
        super().__init__()
        if crop_size % 4 != 0:
            raise ValidationError(f"crop_size {crop_size} must be divisible by 4")
        if domain_count < 2:
            raise ValidationError("need at least two appearance domains")
        self.crop_size = crop_size
        self.place_channels = place_channels
        self.occlusion_channels = occlusion_channels
        self.appearance_dim = appearance_dim
        self.domain_count = domain_count

        self.place_encoder = ContentEncoder(place_channels)
        self.occlusion_encoder = ContentEncoder(occlusion_channels)
        self.appearance_encoder = AppearanceEncoder(appearance_dim, domain_count)
        self.generator = Generator(place_channels, occlusion_channels,
                                   appearance_dim, domain_count)
        self.image_discriminators = nn.ModuleDict({
            "appearance": ImageDiscriminator(domain_count),
            OCCLUSION_SIDE_KEYS[False]: ImageDiscriminator(domain_count),
            OCCLUSION_SIDE_KEYS[True]: ImageDiscriminator(domain_count),
        })
        self.place_discriminator = PlaceDiscriminator(place_channels)
        self.apply(_init_weights)

    def generator_side_parameters(self):
        mods = [self.place_encoder, self.occlusion_encoder,
                self.appearance_encoder, self.generator]
        for m in mods:
            yield from m.parameters()

    def discriminator_side_parameters(self):
        yield from self.image_discriminators.parameters()
        yield from self.place_discriminator.parameters()


def _init_weights(module):
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.InstanceNorm2d) and module.affine:
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_model(cfg) -> FactorModel:
    """Construct the model from any config carrying the five size fields."""
    return FactorModel(
        crop_size=cfg.crop_size,
        place_channels=cfg.place_channels,
        occlusion_channels=cfg.occlusion_channels,
        appearance_dim=cfg.appearance_dim,
        domain_count=cfg.domain_count,
    )


# ---------------------------------------------------------------------------
# operations


def encode_place(model, img: ImageBatch) -> torch.Tensor:
    return model.place_encoder(img.pixels)


def encode_occlusion(model, img: ImageBatch) -> torch.Tensor:
    return model.occlusion_encoder(img.pixels)


def encode_appearance(model, img: ImageBatch, domain: torch.Tensor,
                      rng: Optional[torch.Generator] = None) -> AppearanceEncoding:
    """Encode the global appearance posterior for `img` conditioned on its
    domain label. With `rng` the sample is reparameterized mean + std * eps;
    without it the encoding is deterministic (sample == mean, eps == 0)."""
    if not torch.equal(domain.long(), img.appearance_domain.long()):
        raise ValidationError("domain label disagrees with the batch's appearance domains")
    one_hot = domain_one_hot(domain, model.domain_count)
    mean, logvar = model.appearance_encoder(img.pixels, one_hot)
    if rng is None:
        eps = torch.zeros_like(mean)
    else:
        eps = torch.randn(mean.shape, generator=rng, dtype=mean.dtype, device=mean.device)
    sample = mean + torch.exp(0.5 * logvar) * eps
    return AppearanceEncoding(mean=mean, logvar=logvar, sample=sample, eps=eps)


def encode_all(model, img: ImageBatch, rng: Optional[torch.Generator] = None) -> FactorCodes:
    return FactorCodes(
        place=encode_place(model, img),
        occlusion=encode_occlusion(model, img),
        appearance=encode_appearance(model, img, img.appearance_domain, rng=rng),
    )


def generate(model, place: torch.Tensor, occlusion: torch.Tensor,
             appearance_sample: torch.Tensor, domain: torch.Tensor,
             occlusion_flag: Optional[torch.Tensor] = None) -> ImageBatch:
    """Synthesize an image batch from the three codes and the target domain."""
    if appearance_sample.shape[-1] != model.appearance_dim:
        raise ShapeError(
            f"appearance code length {appearance_sample.shape[-1]} != {model.appearance_dim}"
        )
    one_hot = domain_one_hot(domain, model.domain_count)
    pixels = model.generator(place, occlusion, appearance_sample, one_hot)
    if occlusion_flag is None:
        occlusion_flag = torch.zeros(pixels.shape[0], dtype=torch.bool)
    return ImageBatch(pixels=pixels, appearance_domain=domain.long(),
                      occlusion_flag=occlusion_flag)


def discriminate_image(model, img: ImageBatch, occlusion_side: bool):
    """Realness map and domain logits from the given side's discriminator."""
    d = model.image_discriminators[OCCLUSION_SIDE_KEYS[bool(occlusion_side)]]
    return d(img.pixels)


def discriminate_appearance(model, img: ImageBatch):
    """Realness map and domain logits from the shared appearance discriminator."""
    return model.image_discriminators["appearance"](img.pixels)


def discriminate_place(model, place_code: torch.Tensor) -> torch.Tensor:
    return model.place_discriminator(place_code)


def flatten_place_descriptor(code: torch.Tensor) -> torch.Tensor:
    """Row-major flattening followed by L2 normalization.

    Accepts one code (CxHxW) or a batch (BxCxHxW); the all-zero code is
    rejected because its direction is undefined.
    """
    if code.dim() == 3:
        flat = code.reshape(1, -1)
        squeeze = True
    elif code.dim() == 4:
        flat = code.reshape(code.shape[0], -1)
        squeeze = False
    else:
        raise ShapeError(f"expected CxHxW or BxCxHxW code, got {tuple(code.shape)}")
    norms = flat.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise ValidationError("cannot normalize an all-zero place code")
    out = flat / norms
    return out[0] if squeeze else out
