"""Group-wise feature recalibration over the fused decoder pyramid."""

import torch
import torch.nn.functional as F
from torch import nn

from .types import NUM_CLASSES, ConfigError


class PyramidFusion(nn.Module):
    """Project each pyramid level to ``width // 4`` channels, upsample to full size, concatenate.

    Level ``i`` lands in channel block ``i``, which is also GFRM group ``i``.
    """

    def __init__(self, level_channels, width=32):
        super().__init__()
        if width % NUM_CLASSES:
            raise ConfigError(f"fused width must be divisible by {NUM_CLASSES}, got {width}")
        if len(level_channels) != NUM_CLASSES:
            raise ConfigError("expected four pyramid levels")
        self.width = width
        self.proj = nn.ModuleList(nn.Conv2d(c, width // NUM_CLASSES, 1) for c in level_channels)

    def forward(self, pyramid):
        size = pyramid[-1].shape[-2:]
        outs = []
        for proj, feat in zip(self.proj, pyramid):
            y = proj(feat)
            if y.shape[-2:] != size:
                y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
            outs.append(y)
        return torch.cat(outs, dim=1)


class GroupAttention(nn.Module):
    """Channel and spatial attention on one group, fused by addition."""

    def __init__(self, channels, reduction=2):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.spatial = nn.Conv2d(channels, 1, 1)
        # zero output layers make the module start as an exact identity
        for layer in (self.fc2, self.spatial):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x):
        squeeze = x.mean(dim=(2, 3))
        channel_gate = torch.sigmoid(self.fc2(F.relu(self.fc1(squeeze))))[:, :, None, None]
        spatial_gate = torch.sigmoid(self.spatial(x))
        return x * channel_gate + x * spatial_gate


class GFRM(nn.Module):
    def __init__(self, width=32, groups=NUM_CLASSES, reduction=2):
        super().__init__()
        if width % groups:
            raise ConfigError(f"width {width} not divisible into {groups} groups")
        self.width = width
        self.groups = groups
        self.blocks = nn.ModuleList(GroupAttention(width // groups, reduction) for _ in range(groups))

    def group_of_channel(self, channel: int) -> int:
        return channel // (self.width // self.groups)

    def forward(self, x):
        if x.shape[1] != self.width:
            raise ConfigError(f"expected {self.width} channels, got {x.shape[1]}")
        chunks = torch.split(x, self.width // self.groups, dim=1)
        return torch.cat([blk(c) for blk, c in zip(self.blocks, chunks)], dim=1)


class FeatureBranch(nn.Module):
    """Pyramid fusion followed by optional recalibration; this is what D_f sees."""

    def __init__(self, level_channels, width=32, use_gfrm=True, reduction=2):
        super().__init__()
        self.fusion = PyramidFusion(level_channels, width)
        self.gfrm = GFRM(width, reduction=reduction) if use_gfrm else None

    def forward(self, pyramid):
        fused = self.fusion(pyramid)
        return self.gfrm(fused) if self.gfrm is not None else fused
