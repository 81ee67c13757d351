"""SPADE generator, normalization-free style encoder and multiscale patch discriminator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

BN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``num_spade_blocks=None`` picks a 4x4 initial grid, i.e.
    log2(image_size / 4) upsampling stages plus one.
    """

    num_classes: int = 4
    image_size: int = 128
    base_channels: int = 512
    num_spade_blocks: int | None = None
    latent_dim: int = 256
    use_vae: bool = False
    modulation_hidden_channels: int = 128
    discriminator_scales: int = 2
    leaky_slope: float = 0.2
    min_channels: int = 16
    encoder_channels: int = 64
    encoder_max_channels: int = 512
    discriminator_channels: int = 64
    discriminator_layers: int = 4

    def __post_init__(self):
        errors = []
        counts = (
            "num_classes", "image_size", "base_channels", "latent_dim",
            "modulation_hidden_channels", "discriminator_scales", "min_channels",
            "encoder_channels", "encoder_max_channels", "discriminator_channels",
            "discriminator_layers",
        )
        for name in counts:
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.num_spade_blocks is not None and self.num_spade_blocks < 1:
            errors.append("num_spade_blocks must be >= 1")
        if not errors:
            ups = self.num_blocks - 1
            if self.image_size % (2 ** ups) or self.image_size // 2 ** ups < 1:
                errors.append(
                    f"image_size {self.image_size} is not a power-of-two multiple of the "
                    f"initial grid for {self.num_blocks} blocks"
                )
            if self.use_vae and (self.image_size < 4 or self.image_size & (self.image_size - 1)):
                errors.append("use_vae requires a power-of-two image_size >= 4")
        if errors:
            raise ValueError("invalid ModelConfig: " + "; ".join(errors))

    @property
    def num_blocks(self):
        if self.num_spade_blocks is not None:
            return self.num_spade_blocks
        return max(int(round(math.log2(max(self.image_size, 4) / 4))), 0) + 1

    @property
    def init_grid(self):
        return self.image_size // 2 ** (self.num_blocks - 1)

    def block_channels(self, i):
        return max(self.base_channels // 2 ** i, self.min_channels)

    def to_dict(self):
        return asdict(self)


def one_hot(labels, num_classes=4, dtype=torch.float32):
    """One-hot encode integer label maps [N][H][W] (or [H][W]) into [N][C][H][W]."""
    labels = torch.as_tensor(labels)
    squeeze = labels.dim() == 2
    if squeeze:
        labels = labels[None]
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"out-of-range label: values must lie in [0, {num_classes})")
    out = F.one_hot(labels, num_classes).permute(0, 3, 1, 2).to(dtype)
    return out[0] if squeeze else out


def reparameterize(mu, logvar, generator=None):
    """z = mu + exp(logvar / 2) * n with n ~ N(0, I) drawn from ``generator``."""
    noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(0.5 * logvar) * noise


class SPADE(nn.Module):
    """Parameter-free batch normalization modulated by mask-dependent scale and bias maps."""

    def __init__(self, norm_channels, label_channels, hidden=128):
        super().__init__()
        self.label_channels = label_channels
        self.param_free_norm = nn.BatchNorm2d(norm_channels, affine=False, eps=BN_EPS)
        self.mlp_shared = nn.Sequential(nn.Conv2d(label_channels, hidden, 3, padding=1), nn.ReLU())
        self.mlp_gamma = nn.Conv2d(hidden, norm_channels, 3, padding=1)
        self.mlp_beta = nn.Conv2d(hidden, norm_channels, 3, padding=1)

    def modulation(self, mask):
        actv = self.mlp_shared(mask)
        return self.mlp_gamma(actv), self.mlp_beta(actv)

    def forward(self, x, mask):
        if mask.dim() != 4 or mask.shape[0] != x.shape[0] or mask.shape[1] != self.label_channels:
            raise ValueError(
                f"shape mismatch: mask {tuple(mask.shape)} for activations {tuple(x.shape)}"
            )
        normalized = self.param_free_norm(x)
        if mask.shape[2:] != x.shape[2:]:
            mask = F.interpolate(mask, size=x.shape[2:], mode="nearest")
        gamma, beta = self.modulation(mask)
        return normalized * (1 + gamma) + beta


def spade_normalize(x, mask, spade):
    return spade(x, mask)


class SPADEResBlock(nn.Module):
    def __init__(self, fin, fout, config):
        super().__init__()
        self.learned_shortcut = fin != fout
        fmiddle = min(fin, fout)
        hidden = config.modulation_hidden_channels
        k = config.num_classes
        self.slope = config.leaky_slope
        self.conv_0 = nn.Conv2d(fin, fmiddle, 3, padding=1)
        self.conv_1 = nn.Conv2d(fmiddle, fout, 3, padding=1)
        self.norm_0 = SPADE(fin, k, hidden)
        self.norm_1 = SPADE(fmiddle, k, hidden)
        if self.learned_shortcut:
            self.conv_s = nn.Conv2d(fin, fout, 1, bias=False)
            self.norm_s = SPADE(fin, k, hidden)

    def shortcut(self, x, mask):
        if self.learned_shortcut:
            return self.conv_s(self.norm_s(x, mask))
        return x

    def forward(self, x, mask):
        dx = self.conv_0(F.leaky_relu(self.norm_0(x, mask), self.slope))
        dx = self.conv_1(F.leaky_relu(self.norm_1(dx, mask), self.slope))
        return self.shortcut(x, mask) + dx


class SPADEGenerator(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        g = config.init_grid
        c0 = config.block_channels(0)
        self.fc = nn.Linear(config.latent_dim, c0 * g * g)
        self.blocks = nn.ModuleList(
            SPADEResBlock(config.block_channels(max(i - 1, 0)), config.block_channels(i), config)
            for i in range(config.num_blocks)
        )
        self.conv_img = nn.Conv2d(config.block_channels(config.num_blocks - 1), 1, 3, padding=1)

    def forward(self, z, mask):
        cfg = self.config
        if mask.shape[2:] != (cfg.image_size, cfg.image_size):
            raise ValueError(f"label size {tuple(mask.shape[2:])} != model size {cfg.image_size}")
        if z.shape != (mask.shape[0], cfg.latent_dim):
            raise ValueError(f"latent shape {tuple(z.shape)} != ({mask.shape[0]}, {cfg.latent_dim})")
        g = cfg.init_grid
        x = self.fc(z).view(z.shape[0], -1, g, g)
        for i, block in enumerate(self.blocks):
            if i:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(x, mask)
        x = self.conv_img(F.leaky_relu(x, cfg.leaky_slope))
        return torch.tanh(x)


class StyleEncoder(nn.Module):
    """Strided conv stack with leaky ReLUs and no normalization layers, then mu/logvar heads.

    Without per-instance normalization the latent keeps both the global
    contrast and the spatial layout of the input image.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.slope = config.leaky_slope
        n_down = int(math.log2(config.image_size // 4))
        layers = []
        cin = 1
        for i in range(n_down):
            cout = min(config.encoder_channels * 2 ** i, config.encoder_max_channels)
            layers.append(nn.Conv2d(cin, cout, 3, stride=2, padding=1))
            cin = cout
        self.convs = nn.ModuleList(layers)
        self.fc_mu = nn.Linear(cin * 16, config.latent_dim)
        self.fc_logvar = nn.Linear(cin * 16, config.latent_dim)

    def forward(self, image):
        size = self.config.image_size
        if image.dim() != 4 or image.shape[1:] != (1, size, size):
            raise ValueError(f"wrong input size {tuple(image.shape)}; expected (N, 1, {size}, {size})")
        x = image
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.slope)
        x = x.flatten(1)
        return self.fc_mu(x), self.fc_logvar(x)


def patch_logit_size(size, n_layers):
    """Spatial size of the patch logit map for a square input of ``size``."""
    strides = [2] + [2 if n < n_layers - 1 else 1 for n in range(1, n_layers)] + [1]
    for stride in strides:
        size = size // stride + 1  # kernel 4, padding 2
    return size


class NLayerDiscriminator(nn.Module):
    def __init__(self, in_channels, config):
        super().__init__()
        nf = config.discriminator_channels
        n_layers = config.discriminator_layers
        slope = config.leaky_slope
        seq = [nn.Sequential(nn.Conv2d(in_channels, nf, 4, stride=2, padding=2), nn.LeakyReLU(slope))]
        for n in range(1, n_layers):
            nf_prev, nf = nf, min(nf * 2, 512)
            stride = 2 if n < n_layers - 1 else 1
            seq.append(nn.Sequential(
                nn.Conv2d(nf_prev, nf, 4, stride=stride, padding=2),
                nn.InstanceNorm2d(nf, affine=False),
                nn.LeakyReLU(slope),
            ))
        self.layers = nn.ModuleList(seq)
        self.logits = nn.Conv2d(nf, 1, 4, stride=1, padding=2)

    def forward(self, x):
        features = []
        for layer in self.layers:
            x = layer(x)
            features.append(x)
        return self.logits(x), features


class MultiscaleDiscriminator(nn.Module):
    """Patch discriminators over the image+mask at successively 2x average-pooled scales."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.scales = nn.ModuleList(
            NLayerDiscriminator(1 + config.num_classes, config) for _ in range(config.discriminator_scales)
        )

    def forward(self, image, mask):
        if image.shape[0] != mask.shape[0] or image.shape[2:] != mask.shape[2:]:
            raise ValueError(f"shape mismatch: image {tuple(image.shape)} vs mask {tuple(mask.shape)}")
        x = torch.cat([image, mask], dim=1)
        outputs = []
        for k, disc in enumerate(self.scales):
            if k:
                x = F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
            outputs.append(disc(x))
        return outputs


class SpadeGAN(nn.Module):
    """Bundle of generator, optional style encoder and discriminator sharing one config."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.generator = SPADEGenerator(config)
        self.encoder = StyleEncoder(config) if config.use_vae else None
        self.discriminator = MultiscaleDiscriminator(config)

    def generator_parameters(self):
        params = list(self.generator.parameters())
        if self.encoder is not None:
            params += list(self.encoder.parameters())
        return params

    def sample_latent(self, n, generator=None, dtype=torch.float32):
        return torch.randn((n, self.config.latent_dim), generator=generator, dtype=dtype)


def count_normalization_layers(module):
    norm_types = (nn.modules.batchnorm._NormBase, nn.GroupNorm, nn.LayerNorm, nn.LocalResponseNorm)
    return sum(isinstance(m, norm_types) for m in module.modules())
