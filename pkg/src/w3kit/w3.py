"""What-Where-When (W3) factorized video attention.

A feature map ``F`` of layout ``(..., T, C, H, W)`` is refined in two sequential steps:
a channel-temporal mask ``(T, C)`` gates the channels of every frame, then a
spatial-temporal mask ``(T, H, W)`` computed from the channel-gated map gates the
positions. Each mask is produced by a frame-level network shared across frames and a
temporal network that reasons across neighbouring frames. Disabling the temporal
networks gives the W2 ablation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn

from .errors import ConfigError
from .primitives import channel_pool, kaiming_uniform_, sigmoid, spatial_pool


@dataclass
class W3Masks:
    channel_frame: torch.Tensor   # (..., T, C)
    channel: torch.Tensor         # (..., T, C)
    spatial_frame: torch.Tensor   # (..., T, 1, H, W)
    spatial: torch.Tensor         # (..., T, H, W)

    def numel(self):
        """Elements in the two masks that are actually applied."""
        return self.channel.numel() + self.spatial.numel()


def mask_element_count(T, C, H, W):
    """Factorized mask size T(C + HW), against T*C*H*W for a dense 4D mask."""
    return T * (C + H * W)


def apply_masks(x, channel_mask, spatial_mask):
    """Hadamard products of the two-step refinement; masks broadcast over omitted axes."""
    xc = channel_mask[..., None, None] * x
    return spatial_mask[..., None, :, :] * xc


class W3Attention(nn.Module):
    """W3 attention block for feature maps with ``channels`` channels.

    Args:
        channels: C of the incoming feature map.
        reduction: bottleneck ratio r of the shared channel MLP (hidden width ceil(C/r)).
        temporal_kernel: K_c-vid, window of the two depthwise temporal convolutions.
        spatial_kernel: kernel of the per-frame 2D spatial convolution.
        video_kernel: kernel of the 3D spatio-temporal convolution.
        temporal: False gives the W2 variant (frame-level masks only).
        seed: seed for the fan-in uniform initialisation.
    """

    def __init__(self, channels: int, reduction: int = 16, temporal_kernel: int = 3,
                 spatial_kernel: int = 7, video_kernel: int = 3, temporal: bool = True,
                 seed: Optional[int] = None):
        super().__init__()
        if channels < 1:
            raise ConfigError(f"channels must be positive, got {channels}")
        if reduction < 1:
            raise ConfigError(f"reduction ratio must be a positive integer, got {reduction}")
        for name, k in (("temporal_kernel", temporal_kernel), ("spatial_kernel", spatial_kernel),
                        ("video_kernel", video_kernel)):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be odd and positive, got {k}")
        self.channels = channels
        self.reduction = reduction
        self.hidden = max(1, math.ceil(channels / reduction))
        self.temporal_kernel = temporal_kernel
        self.temporal = temporal

        # theta_c-frm: shared across frames and across the avg/max descriptors
        self.channel_mlp = nn.Sequential(
            nn.Linear(channels, self.hidden, bias=False),
            nn.ReLU(),
            nn.Linear(self.hidden, channels),
        )
        # theta_c-vid: each channel's time series is convolved on its own
        self.channel_temporal = nn.Sequential(
            nn.Conv1d(channels, channels, temporal_kernel, padding=temporal_kernel // 2, groups=channels),
            nn.ReLU(),
            nn.Conv1d(channels, channels, temporal_kernel, padding=temporal_kernel // 2, groups=channels),
        )
        # theta_s-frm and theta_s-vid
        self.spatial_conv = nn.Conv2d(2, 1, spatial_kernel, padding=spatial_kernel // 2)
        self.video_conv = nn.Conv3d(1, 1, video_kernel, padding=video_kernel // 2)

        # test hook: callable(name, mask) -> mask, applied to the video-level masks
        self.mask_override: Optional[Callable[[str, torch.Tensor], torch.Tensor]] = None

        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        self.reset_parameters(gen)

    def reset_parameters(self, generator=None):
        # a 1/sqrt(fan_in) bound keeps the initial mask logits small, away from sigmoid saturation
        kaiming_uniform_(self, generator, gain=1.0 / math.sqrt(3.0))

    def extra_repr(self):
        return (f"channels={self.channels}, hidden={self.hidden}, "
                f"temporal_kernel={self.temporal_kernel}, temporal={self.temporal}")

    def _check(self, x):
        if x.dim() < 4:
            raise ConfigError(f"expected (..., T, C, H, W), got shape {tuple(x.shape)}")
        if x.shape[-3] != self.channels:
            raise ConfigError(f"expected {self.channels} channels, got {x.shape[-3]}")

    def channel_frame_attention(self, x):
        """Per-frame channel mask sigma(MLP(avg) + MLP(max)), shape (..., T, C)."""
        self._check(x)
        d_avg = spatial_pool(x, "avg")
        d_max = spatial_pool(x, "max")
        return sigmoid(self.channel_mlp(d_avg) + self.channel_mlp(d_max))

    def channel_video_attention(self, frame_masks):
        """Temporal reasoning over per-frame channel masks, (..., T, C) -> (..., T, C)."""
        if not self.temporal:
            return frame_masks
        lead, (T, C) = frame_masks.shape[:-2], frame_masks.shape[-2:]
        seq = frame_masks.reshape(-1, T, C).transpose(1, 2)
        out = self.channel_temporal(seq).transpose(1, 2)
        return sigmoid(out).reshape(*lead, T, C)

    def spatial_frame_attention(self, x):
        """Per-frame spatial mask from stacked channel-avg/max maps, shape (..., T, 1, H, W)."""
        self._check(x)
        desc = torch.cat([channel_pool(x, "avg"), channel_pool(x, "max")], dim=-3)
        lead, (H, W) = desc.shape[:-3], desc.shape[-2:]
        out = self.spatial_conv(desc.reshape(-1, 2, H, W))
        return sigmoid(out).reshape(*lead, 1, H, W)

    def spatial_video_attention(self, frame_masks):
        """3D convolution over the stacked frame masks, (..., T, 1, H, W) -> (..., T, H, W)."""
        masks = frame_masks.squeeze(-3)
        if not self.temporal:
            return masks
        lead, (T, H, W) = masks.shape[:-3], masks.shape[-3:]
        out = self.video_conv(masks.reshape(-1, 1, T, H, W))
        return sigmoid(out).reshape(*lead, T, H, W)

    def apply_w3(self, x):
        """Return the refined map and the masks that produced it."""
        self._check(x)
        cf = self.channel_frame_attention(x)
        mc = self.channel_video_attention(cf)
        if self.mask_override is not None:
            mc = self.mask_override("channel", mc)
        xc = mc[..., None, None] * x
        sf = self.spatial_frame_attention(xc)
        ms = self.spatial_video_attention(sf)
        if self.mask_override is not None:
            ms = self.mask_override("spatial", ms)
        out = ms[..., None, :, :] * xc
        return out, W3Masks(cf, mc, sf, ms)

    def forward(self, x):
        return self.apply_w3(x)[0]


def apply_w3(x, module: W3Attention):
    return module.apply_w3(x)
