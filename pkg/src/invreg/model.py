"""Networks: a dual-decoder flow generator and a patch discriminator.

The generator encodes a concatenated source/target patch pair once and
decodes it twice, once per flow direction. The two decoders share the
encoder's skip features but fuse them with opposite signs (addition for
the source-to-target flow, subtraction for the reverse), which couples
the directions through a shared representation while keeping separate
decoding weights.

The discriminator is a plain stack of strided convolutions over a
conditioning patch and a candidate patch; spatial logits from the last
1x1x1 convolution are averaged into one score per pair.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError

ENCODER_DEPTH = 4
DISC_DEPTH = 6


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 64
    base_channels: int = 32
    leaky_slope: float = 0.2
    flow_init_std: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        p = self.patch_size
        if p < 16 or (p & (p - 1)) != 0:
            raise ConfigError(f"patch_size must be a power of two >= 16, got {p}")
        c = self.base_channels
        if c < 4 or c % 4 != 0:
            raise ConfigError(f"base_channels must be a multiple of 4 and >= 4, got {c}")
        if not (0.0 < self.leaky_slope < 1.0):
            raise ConfigError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")
        if self.flow_init_std <= 0:
            raise ConfigError(f"flow_init_std must be > 0, got {self.flow_init_std}")


def encoder_spatial_sizes(patch_size: int) -> list[int]:
    """Spatial edge length after each stride-2 encoder level."""
    sizes = []
    n = patch_size
    for _ in range(ENCODER_DEPTH):
        n //= 2
        sizes.append(n)
    return sizes


def discriminator_spatial_sizes(patch_size: int) -> list[int]:
    """Spatial edge length after each strided discriminator convolution."""
    sizes = []
    n = patch_size
    for _ in range(DISC_DEPTH):
        n = -(-n // 2)
        sizes.append(n)
    return sizes


def _conv(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv3d:
    return nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)


def _up(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)


class _Decoder(nn.Module):
    """One deepest-level convolution, three fusion blocks, flow head.

    Each block upsamples the running feature map, fuses it with the
    matching encoder skip by signed addition, concatenates the upsampled
    and fused maps and mixes them with one convolution.
    """

    def __init__(self, config: ModelConfig, sign: float):
        super().__init__()
        c = config.base_channels
        self.sign = sign
        self.slope = config.leaky_slope
        self.bottom = _conv(c, c)
        self.blocks = nn.ModuleList(
            [_conv(2 * c, c), _conv(2 * c, c), _conv(2 * c, c // 4)]
        )
        self.head = _conv(c // 4, c // 4)
        self.flow = _conv(c // 4, 3)

    def forward(self, deepest: torch.Tensor, skips: list[torch.Tensor]) -> torch.Tensor:
        x = F.leaky_relu(self.bottom(deepest), self.slope)
        for block, skip in zip(self.blocks, skips):
            u = _up(x)
            fused = u + self.sign * skip
            x = F.leaky_relu(block(torch.cat([u, fused], dim=1)), self.slope)
        x = F.leaky_relu(self.head(x), self.slope)
        return _up(self.flow(x))


class Generator(nn.Module):
    """Maps a source/target patch pair to both dense flows in voxel units."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.slope = config.leaky_slope
        self.encoder = nn.ModuleList(
            [_conv(2, c, stride=2)] + [_conv(c, c, stride=2) for _ in range(ENCODER_DEPTH - 1)]
        )
        self.decoder_fwd = _Decoder(config, sign=1.0)
        self.decoder_bwd = _Decoder(config, sign=-1.0)
        _init_parameters(self, config)

    def forward(self, source: torch.Tensor, target: torch.Tensor):
        if source.shape != target.shape:
            raise ValueError(f"shape mismatch: {tuple(source.shape)} vs {tuple(target.shape)}")
        p = self.config.patch_size
        if tuple(source.shape[-3:]) != (p, p, p):
            raise ValueError(f"expected {p}^3 patches, got {tuple(source.shape[-3:])}")
        x = torch.cat([source, target], dim=1)
        feats = []
        for layer in self.encoder:
            x = F.leaky_relu(layer(x), self.slope)
            feats.append(x)
        skips = feats[-2::-1]
        flow_st = self.decoder_fwd(feats[-1], skips)
        flow_ts = self.decoder_bwd(feats[-1], skips)
        return flow_st, flow_ts


class Discriminator(nn.Module):
    """Scores a (conditioning, candidate) patch pair with one logit."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.slope = config.leaky_slope
        widths = [c, 2 * c, 4 * c, 8 * c, 8 * c, 8 * c]
        layers = []
        prev = 2
        for w in widths:
            layers.append(_conv(prev, w, stride=2))
            prev = w
        self.features = nn.ModuleList(layers)
        self.score = nn.Conv3d(prev, 1, kernel_size=1)
        _init_parameters(self, config)

    def forward(self, cond: torch.Tensor, cand: torch.Tensor) -> torch.Tensor:
        if cond.shape != cand.shape:
            raise ValueError(f"shape mismatch: {tuple(cond.shape)} vs {tuple(cand.shape)}")
        x = torch.cat([cond, cand], dim=1)
        for layer in self.features:
            x = F.leaky_relu(layer(x), self.slope)
        return self.score(x).mean(dim=(1, 2, 3, 4))


def _init_parameters(module: nn.Module, config: ModelConfig) -> None:
    """Deterministic fan-in-scaled normal init from a local generator.

    Flow output convolutions get a much tighter distribution and zero
    bias so the model starts from a near-identity deformation.
    """
    gen = torch.Generator().manual_seed(config.seed)
    gain = math.sqrt(2.0 / (1.0 + config.leaky_slope**2))
    with torch.no_grad():
        for name, m in module.named_modules():
            if not isinstance(m, nn.Conv3d):
                continue
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] * m.kernel_size[2]
            if name.endswith("flow"):
                std = config.flow_init_std
            else:
                std = gain / math.sqrt(fan_in)
            m.weight.normal_(0.0, std, generator=gen)
            m.bias.zero_()


def build_models(config: ModelConfig):
    """Construct the generator and both discriminators with offset seeds."""
    gen = Generator(config)
    disc_s = Discriminator(dataclasses.replace(config, seed=config.seed + 1))
    disc_t = Discriminator(dataclasses.replace(config, seed=config.seed + 2))
    return gen, disc_s, disc_t
