"""Iterative mutual refinement: the gated recurrent state update and the
prediction head that consumes the state and the previous mask estimate."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .correlation import resize_maps
from .errors import ConfigError, ShapeError
from .mask_init import MaskEstimate

CELL_VARIANTS = ("none", "plain_conv", "group_conv")


def cell_groups(channels, requested=16):
    g = min(requested, channels)
    if channels % g:
        raise ConfigError(f"state channels {channels} not divisible by {g} groups")
    return g


class RecurrentCell(nn.Module):
    """Holds the three gate convolutions (update, reset, candidate)."""

    def __init__(self, x_channels, h_channels, variant="group_conv", groups=16):
        super().__init__()
        if variant not in CELL_VARIANTS:
            raise ConfigError(f"cell variant must be one of {CELL_VARIANTS}, got {variant!r}")
        self.variant = variant
        self.x_channels = x_channels
        self.h_channels = h_channels
        cin = x_channels + h_channels
        if variant == "none":
            self.update_gate = self.reset_gate = self.candidate = None
            return

        def make():
            if variant == "plain_conv":
                return nn.Conv2d(cin, h_channels, 3, padding=1)
            return nn.Sequential(
                nn.Conv2d(cin, h_channels, 1),
                nn.Conv2d(h_channels, h_channels, 3, padding=1,
                          groups=cell_groups(h_channels, groups)),
            )

        self.update_gate = make()
        self.reset_gate = make()
        self.candidate = make()

    def forward(self, x, h_prev):
        if self.variant == "none":
            return bypass_update(x, h_prev)
        return gru_update(x, h_prev, self)


def gru_update(x, h_prev, cell):
    if cell.variant == "none":
        raise ConfigError("gru_update called with the 'none' variant; use bypass_update")
    if x.shape[0] != h_prev.shape[0] or x.shape[-2:] != h_prev.shape[-2:]:
        raise ShapeError(f"input {tuple(x.shape)} and state {tuple(h_prev.shape)} disagree")
    xh = torch.cat([x, h_prev], dim=1)
    z = torch.sigmoid(cell.update_gate(xh))
    r = torch.sigmoid(cell.reset_gate(xh))
    h_tilde = torch.tanh(cell.candidate(torch.cat([r * h_prev, x], dim=1)))
    return (1 - z) * h_prev + z * h_tilde


def bypass_update(x, h_prev, variant="none"):
    if variant != "none":
        raise ConfigError("bypass_update only applies to the 'none' variant")
    return torch.zeros_like(h_prev)


class Head(nn.Module):
    """The original four-conv head followed by the two 1x1 layers that fuse
    its output with the previous foreground estimate."""

    def __init__(self, in_channels=32, mid_channels=16, fuse_channels=16):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(in_channels, mid_channels, 3, padding=1)
        self.conv3 = nn.Conv2d(mid_channels, mid_channels, 3, padding=1)
        self.conv4 = nn.Conv2d(mid_channels, 2, 3, padding=1)
        self.fuse1 = nn.Conv2d(3, fuse_channels, 1)    # W_h1
        self.fuse2 = nn.Conv2d(fuse_channels, 2, 1)    # W_h2

    def head0(self, x, out_size):
        x = F.relu(self.conv2(F.relu(self.conv1(x))))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.conv4(F.relu(self.conv3(x)))
        return resize_maps(x, out_size)

    def forward(self, corr, h, mask_prev):
        """Returns 2-channel logits (B, 2, H, W) at the resolution of ``mask_prev``."""
        if corr.shape != h.shape:
            raise ShapeError(f"correlation {tuple(corr.shape)} and state {tuple(h.shape)} differ")
        out_size = mask_prev.shape[-2:]
        coarse = self.head0(corr + h, out_size)
        fused = torch.cat([coarse, mask_prev[:, None].to(coarse.dtype)], dim=1)
        return self.fuse2(F.gelu(self.fuse1(fused)))


def head_forward(corr, h, mask_prev, head):
    """Batch of one or more: returns a MaskEstimate with soft foreground
    probability and the 2-channel logits retained."""
    prev = mask_prev.soft if isinstance(mask_prev, MaskEstimate) else mask_prev
    squeeze = prev.ndim == 2
    if squeeze:
        prev = prev[None]
    logits = head(corr, h, prev)
    soft = torch.softmax(logits, dim=1)[:, 1]
    if squeeze:
        return MaskEstimate(soft=soft[0], logits=logits[0])
    return MaskEstimate(soft=soft, logits=logits)
