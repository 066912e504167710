"""Small temporal-shift video network with optional W3 attention after each block."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError
from .primitives import kaiming_uniform_, temporal_shift
from .w3 import W3Attention

ATTENTION_KINDS = ("none", "w2", "w3")


@dataclass
class BackboneConfig:
    V: int = 8
    N: int = 12
    T: int = 8
    widths: tuple = (16, 32, 32)
    shift_fraction: float = 0.25
    attention: str = "w3"  # none | w2 | w3
    reduction: int = 4
    temporal_kernel: int = 3
    spatial_kernel: int = 7

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if not 3 <= len(self.widths) + 1 <= 4:
            raise ConfigError("the toy backbone has 3-4 convolution blocks (stem + 2-3 residual blocks)")


class ShiftBlock(nn.Module):
    """Residual block: temporal shift, two 3x3 convs, projection skip, 2x2 pooling."""

    def __init__(self, c_in, c_out, shift_fraction):
        super().__init__()
        self.shift_fraction = shift_fraction
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1, bias=False)
        self.relu = nn.ReLU()

    def forward(self, x):
        B, T, C, H, W = x.shape
        h = temporal_shift(x, self.shift_fraction).reshape(B * T, C, H, W)
        h = self.relu(self.bn1(self.conv1(h)))
        h = self.bn2(self.conv2(h))
        h = self.relu(h + self.skip(x.reshape(B * T, C, H, W)))
        return h.reshape(B, T, -1, H, W)


class ToyBackbone(nn.Module):
    """Stem conv, residual shift blocks each optionally followed by W3/W2, verb and noun heads.

    Input ``(B, T, 3, H, W)``; features are average-pooled over space and concatenated
    over time before the two linear heads, so both heads share one trunk.
    """

    def __init__(self, config: BackboneConfig = BackboneConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        w = config.widths
        self.stem = nn.Sequential(nn.Conv2d(3, w[0], 5, stride=2, padding=2, bias=False),
                                  nn.BatchNorm2d(w[0]), nn.ReLU())
        self.blocks = nn.ModuleList()
        self.attn = nn.ModuleList()
        for c_in, c_out in zip(w[:-1], w[1:]):
            self.blocks.append(ShiftBlock(c_in, c_out, config.shift_fraction))
            if config.attention == "none":
                self.attn.append(nn.Identity())
            else:
                self.attn.append(W3Attention(c_out, config.reduction, config.temporal_kernel,
                                             config.spatial_kernel, temporal=config.attention == "w3"))
        self.pool = nn.MaxPool2d(2)
        # attention can shrink features toward zero; the neck restores a fixed scale for the heads
        self.neck = nn.BatchNorm1d(config.T * w[-1])
        self.verb_head = nn.Linear(config.T * w[-1], config.V)
        self.noun_head = nn.Linear(config.T * w[-1], config.N)
        gen = torch.Generator().manual_seed(seed)
        kaiming_uniform_(self, gen)
        for m in self.attn:
            if isinstance(m, W3Attention):
                m.reset_parameters(gen)

    def features(self, x):
        B, T = x.shape[:2]
        if T != self.config.T:
            raise ConfigError(f"backbone built for T={self.config.T}, got clips with T={T}")
        h = self.stem(x.reshape(B * T, *x.shape[2:]))
        h = h.reshape(B, T, *h.shape[1:])
        for i, (block, attn) in enumerate(zip(self.blocks, self.attn)):
            h = attn(block(h))
            if i < len(self.blocks) - 1:
                Bt = h.shape[0] * h.shape[1]
                h = self.pool(h.reshape(Bt, *h.shape[2:])).reshape(B, T, *h.shape[2:3], *(s // 2 for s in h.shape[3:]))
        return self.neck(h.mean(dim=(-2, -1)).reshape(B, -1))

    def forward(self, x):
        f = self.features(x)
        return self.verb_head(f), self.noun_head(f)
