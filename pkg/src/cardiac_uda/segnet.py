"""Attention U-Net with a dilated bottleneck and pyramid pooling."""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .types import NUM_CLASSES, ConfigError


@dataclass
class SegNetConfig:
    base_channels: int = 16
    multipliers: Tuple[int, ...] = (1, 2, 4, 8)
    dilation_rate: int = 2
    ppm_bin_sizes: List[int] = field(default_factory=lambda: [1, 2, 3, 6])
    num_classes: int = NUM_CLASSES
    input_size: int = 96
    head_prior: Optional[Tuple[float, ...]] = (0.9, 0.05, 0.05, 0.05)

    def __post_init__(self):
        if self.input_size % 8 or self.input_size < 16:
            raise ConfigError(f"input_size must be a multiple of 8 and >= 16, got {self.input_size}")
        if len(self.multipliers) != 4:
            raise ConfigError("need exactly four channel multipliers")
        bins = list(self.ppm_bin_sizes)
        if not bins or any(b <= 0 for b in bins) or any(a >= b for a, b in zip(bins, bins[1:])):
            raise ConfigError(f"ppm_bin_sizes must be positive and strictly increasing: {bins}")
        if bins[-1] > self.bottleneck_size:
            raise ConfigError(
                f"pyramid bin {bins[-1]} exceeds the {self.bottleneck_size}x{self.bottleneck_size} bottleneck"
            )
        if self.head_prior is not None:
            if len(self.head_prior) != self.num_classes or not all(0 < p < 1 for p in self.head_prior):
                raise ConfigError("head_prior needs one probability in (0, 1) per class")
            self.head_prior = tuple(self.head_prior)
        bottleneck = self.base_channels * self.multipliers[3]
        if bottleneck % len(bins):
            raise ConfigError("bottleneck channels must divide evenly among pyramid bins")

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 8

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.multipliers)

    @property
    def pyramid_channels(self) -> Tuple[int, ...]:
        c = self.channels
        return (2 * c[3], c[2], c[1], c[0])


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, dilation=1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=dilation, dilation=dilation),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=dilation, dilation=dilation),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class AttentionGate(nn.Module):
    """Gate encoder skip features with a single-channel map computed from both paths.

    alpha = sigmoid(conv1x1(relu(conv3x3(enc) + conv3x3(dec)))) and the output is
    ``enc * alpha`` broadcast over channels.
    """

    def __init__(self, enc_ch, dec_ch, inter_ch=None):
        super().__init__()
        inter_ch = inter_ch or max(enc_ch // 2, 1)
        self.theta = nn.Conv2d(enc_ch, inter_ch, 3, padding=1)
        self.phi = nn.Conv2d(dec_ch, inter_ch, 3, padding=1)
        self.psi = nn.Conv2d(inter_ch, 1, 1)

    def attention(self, enc, dec):
        if enc.shape[-2:] != dec.shape[-2:]:
            raise RuntimeError(f"attention gate spatial mismatch {tuple(enc.shape)} vs {tuple(dec.shape)}")
        return torch.sigmoid(self.psi(F.relu(self.theta(enc) + self.phi(dec))))

    def forward(self, enc, dec):
        return enc * self.attention(enc, dec)


class PyramidPooling(nn.Module):
    """Adaptive-average-pool branches, projected and upsampled, concatenated onto the input."""

    def __init__(self, in_ch, bins):
        super().__init__()
        self.bins = list(bins)
        branch_ch = in_ch // len(self.bins)
        self.branches = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(b), nn.Conv2d(in_ch, branch_ch, 1)) for b in self.bins
        )

    def forward(self, x):
        h, w = x.shape[-2:]
        if max(self.bins) > min(h, w):
            raise ConfigError(f"pyramid bin {max(self.bins)} exceeds feature size {h}x{w}")
        outs = [x]
        for branch in self.branches:
            outs.append(F.interpolate(branch(x), size=(h, w), mode="bilinear", align_corners=False))
        return torch.cat(outs, dim=1)


class UpStage(nn.Module):
    def __init__(self, in_ch, skip_ch):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, skip_ch, 4, stride=2, padding=1)
        self.gate = AttentionGate(skip_ch, skip_ch)
        self.conv = ConvBlock(2 * skip_ch, skip_ch)

    def forward(self, x, skip):
        up = self.up(x)
        return self.conv(torch.cat([self.gate(skip, up), up], dim=1))


class SegNet(nn.Module):
    """Segmentation network G.

    ``forward`` returns the sigmoid probability map [B, 4, H, W] and the decoder
    feature pyramid ordered coarse to fine (H/8, H/4, H/2, H).
    """

    def __init__(self, config: SegNetConfig = None):
        super().__init__()
        self.config = config or SegNetConfig()
        c1, c2, c3, c4 = self.config.channels
        self.enc1 = ConvBlock(1, c1)
        self.enc2 = ConvBlock(c1, c2)
        self.enc3 = ConvBlock(c2, c3)
        self.bottleneck = ConvBlock(c3, c4, dilation=self.config.dilation_rate)
        self.ppm = PyramidPooling(c4, self.config.ppm_bin_sizes)
        self.up3 = UpStage(2 * c4, c3)
        self.up2 = UpStage(c3, c2)
        self.up1 = UpStage(c2, c1)
        self.head = nn.Conv2d(c1, self.config.num_classes, 1)
        if self.config.head_prior:
            # start each sigmoid channel at its class prior instead of 0.5
            prior = torch.tensor(self.config.head_prior, dtype=torch.float32)
            with torch.no_grad():
                self.head.bias.copy_(torch.log(prior / (1 - prior)))

    def forward(self, x):
        size = self.config.input_size
        if x.shape[-2:] != (size, size):
            raise ConfigError(f"model built for {size}x{size} input, got {tuple(x.shape[-2:])}")
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        b = self.ppm(self.bottleneck(F.max_pool2d(e3, 2)))
        d3 = self.up3(b, e3)
        d2 = self.up2(d3, e2)
        d1 = self.up1(d2, e1)
        probs = torch.sigmoid(self.head(d1))
        return probs, [b, d3, d2, d1]
