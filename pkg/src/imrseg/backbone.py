"""Frozen, seeded feature extractor producing a three-level pyramid (strides
4, 8, 16) that stands in for pretrained bottleneck outputs.

Pixels are first encoded by RBF detectors centred on seeded random colours
(uniform in the RGB cube, unrelated to any class colour), average-pooled to
stride 4; the two coarser levels are random 3x3 stride-2 convolutions with
ReLU.  A sparse non-negative code keeps cosine similarity colour-selective,
which is what a pretrained backbone provides to the correlation layers.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F


class ToyBackbone(nn.Module):
    def __init__(self, level_channels=(24, 32, 48), seed=0, rbf_width=0.2):
        super().__init__()
        c3, c4, c5 = level_channels
        gen = torch.Generator().manual_seed(seed)
        # weights are buffers: never trained, still moved by .to()/.double()
        self.register_buffer("anchors", torch.rand(c3, 3, generator=gen))
        self.register_buffer("w4", torch.randn(c4, c3, 3, 3, generator=gen) * (2.0 / (c3 * 9)) ** 0.5)
        self.register_buffer("w5", torch.randn(c5, c4, 3, 3, generator=gen) * (2.0 / (c4 * 9)) ** 0.5)
        self.rbf_width = rbf_width
        self.level_channels = tuple(level_channels)

    @torch.no_grad()
    def forward(self, images):
        """images (B, 3, H, W) in [0, 1] -> [F3, F4, F5], finest first."""
        diff = images[:, None] - self.anchors[None, :, :, None, None]
        code = torch.exp(-(diff ** 2).sum(2) / (2 * self.rbf_width ** 2))
        f3 = F.avg_pool2d(code, 4, ceil_mode=True)
        f4 = F.relu(F.conv2d(f3, self.w4, stride=2, padding=1))
        f5 = F.relu(F.conv2d(f4, self.w5, stride=2, padding=1))
        return [f3, f4, f5]
