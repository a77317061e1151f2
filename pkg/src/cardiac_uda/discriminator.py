"""PatchGAN discriminator returning a map of raw logits."""

from torch import nn

from .types import ConfigError

CHANNELS = (64, 128, 256, 256, 1)
STRIDES = (2, 2, 2, 1, 1)
KERNEL = 4
PADDING = 1
LEAKY_SLOPE = 0.2


def score_map_size(size: int) -> int:
    """Closed-form spatial size of the score map for a square input."""
    for s in STRIDES:
        size = (size + 2 * PADDING - KERNEL) // s + 1
    return size


class PatchDiscriminator(nn.Module):
    def __init__(self, in_channels: int):
        super().__init__()
        layers = []
        prev = in_channels
        for i, (ch, stride) in enumerate(zip(CHANNELS, STRIDES)):
            layers.append(nn.Conv2d(prev, ch, KERNEL, stride=stride, padding=PADDING))
            if i < len(CHANNELS) - 1:
                layers.append(nn.LeakyReLU(LEAKY_SLOPE, inplace=True))
            prev = ch
        self.model = nn.Sequential(*layers)
        self.in_channels = in_channels

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ConfigError(f"discriminator expects {self.in_channels} channels, got {x.shape[1]}")
        if min(x.shape[-2:]) < 8:
            raise ConfigError(f"input {tuple(x.shape[-2:])} too small for three stride-2 layers")
        return self.model(x)
