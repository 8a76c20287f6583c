"""Attention building blocks: channel and spatial attention, the composed
block (channel first, then spatial), and the auxiliary-classifier attention
used by the image translator.

All modules take batched feature maps (N, C, H, W) and are stateless given
their parameters; forward passes are pure.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn
import torch.nn.functional as F


class ChannelAttention(nn.Module):
    """Per-channel gate from pooled descriptors.

    Global max pooling and global average pooling of each channel are
    concatenated into a 2C vector and passed through two fully connected
    layers; the sigmoid output is one weight per channel in (0, 1). The
    hidden width is 2C divided by ``reduction``.
    """

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if channels < 1:
            raise ValueError("channels must be >= 1")
        hidden = max(1, (2 * channels) // reduction)
        self.channels = channels
        self.fc1 = nn.Linear(2 * channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected (N, {self.channels}, H, W) input, got {tuple(x.shape)}")
        max_pool = x.amax(dim=(2, 3))
        avg_pool = x.mean(dim=(2, 3))
        descriptor = torch.cat([max_pool, avg_pool], dim=1)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(descriptor))))


class SpatialAttention(nn.Module):
    """Per-pixel gate from cross-channel pooled maps.

    The channelwise average map and max map are each passed through their own
    same-padded convolution; the two responses are added and squashed by a
    sigmoid into an (N, 1, H, W) map in (0, 1).
    """

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd for same padding")
        pad = kernel_size // 2
        self.conv_avg = nn.Conv2d(1, 1, kernel_size, padding=pad)
        self.conv_max = nn.Conv2d(1, 1, kernel_size, padding=pad)

    def forward(self, x: Tensor) -> Tensor:
        avg_map = x.mean(dim=1, keepdim=True)
        max_map = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.conv_avg(avg_map) + self.conv_max(max_map))


class Cbam(nn.Module):
    """Channel attention followed by spatial attention, each applied
    multiplicatively. Output shape equals input shape."""

    def __init__(self, channels: int, reduction: int = 4, kernel_size: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(kernel_size)

    def forward(self, x: Tensor) -> Tensor:
        weights = self.channel(x)
        x = x * weights[:, :, None, None]
        return x * self.spatial(x)


def minmax_normalize(raw: Tensor) -> Tensor:
    """Min-max normalize each (H, W) map of an (N, H, W) batch into [0, 1].

    A constant map has no dynamic range and normalizes to uniform 0.5.
    """
    flat = raw.reshape(raw.shape[0], -1)
    lo = flat.min(dim=1).values[:, None, None]
    hi = flat.max(dim=1).values[:, None, None]
    span = hi - lo
    scaled = (raw - lo) / span.clamp(min=1e-12)
    return torch.where(span > 1e-12, scaled, torch.full_like(raw, 0.5))


class CamAttention(nn.Module):
    """Auxiliary-classifier attention.

    A bias-free linear head over the globally average-pooled features produces
    a domain logit; its weight vector, contracted against the feature map,
    gives a raw activation map. The map is min-max normalized into [0, 1] and
    multiplies every channel of the input.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.fc = nn.Linear(channels, 1, bias=False)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Returns (logit (N,), attended (N, C, H, W), heatmap (N, H, W))."""
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected (N, {self.channels}, H, W) input, got {tuple(x.shape)}")
        pooled = x.mean(dim=(2, 3))
        logit = self.fc(pooled).squeeze(-1)
        weight = self.fc.weight.squeeze(0)
        raw_map = torch.einsum("c,nchw->nhw", weight, x)
        heatmap = minmax_normalize(raw_map)
        attended = x * heatmap[:, None]
        return logit, attended, heatmap
