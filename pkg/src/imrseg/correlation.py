"""Masked multi-level hypercorrelation and the center-pivot 4D convolution neck.

Tensor layout: feature maps are ``(B, C, h, w)``; correlation volumes are
``(B, C, h_q, w_q, h_s, w_s)``.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


def resize_maps(x, size):
    """Bilinear resize of ``(B, C, h, w)`` maps; no-op when already sized."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def mask_support_features(pyramid, mask):
    """Multiply every level by the soft mask resized to that level.

    ``mask`` is ``(B, H, W)`` at image resolution.
    """
    if mask.ndim != 3:
        raise ShapeError(f"mask must be (B, H, W), got {tuple(mask.shape)}")
    m = mask[:, None].to(pyramid[0].dtype)
    out = []
    for level in pyramid:
        if level.shape[0] != m.shape[0]:
            raise ShapeError(f"batch mismatch: features {level.shape[0]} vs mask {m.shape[0]}")
        if level.shape[-2] > m.shape[-2] or level.shape[-1] > m.shape[-1]:
            raise ShapeError(f"mask {tuple(m.shape[-2:])} is coarser than features {tuple(level.shape[-2:])}")
        out.append(level * resize_maps(m, level.shape[-2:]))
    return out


def build_hypercorrelation(feat_q, feat_s):
    """Clamped cosine similarity between every query and support position.

    (B, C, hq, wq), (B, C, hs, ws) -> (B, 1, hq, wq, hs, ws) with entries in
    [0, 1]; zero-norm sites give 0.
    """
    if feat_q.shape[:2] != feat_s.shape[:2]:
        raise ShapeError(f"channel/batch mismatch: {tuple(feat_q.shape)} vs {tuple(feat_s.shape)}")
    q = F.normalize(feat_q, dim=1, eps=1e-12)
    s = F.normalize(feat_s, dim=1, eps=1e-12)
    corr = torch.einsum("bchw,bcxy->bhwxy", q, s)
    return corr.clamp(min=0)[:, None]


@dataclass(frozen=True)
class Conv4DSpec:
    in_channels: int
    out_channels: int
    kernel_q: int = 3
    kernel_s: int = 3
    stride_q: int = 1
    stride_s: int = 1
    groups: int = 4

    def __post_init__(self):
        if self.kernel_q % 2 == 0 or self.kernel_s % 2 == 0:
            raise ConfigError(f"center-pivot kernels must be odd, got {self.kernel_q}, {self.kernel_s}")
        if self.stride_q < 1 or self.stride_s < 1:
            raise ConfigError("strides must be positive")


def center_pivot_conv4d(x, weight_q, weight_s, bias=None, stride_q=1, stride_s=1):
    """Sum of a 2D conv over the query axes (support held at the kernel
    center) and a 2D conv over the support axes (query held at the kernel
    center).  ``weight_q``/``weight_s`` are ``(C_out, C_in, k, k)``."""
    kq, ks = weight_q.shape[-1], weight_s.shape[-1]
    if kq % 2 == 0 or ks % 2 == 0:
        raise ConfigError("center-pivot kernels must be odd")
    if x.ndim != 6:
        raise ShapeError(f"expected (B, C, hq, wq, hs, ws), got {tuple(x.shape)}")
    b, c, hq, wq, hs, ws = x.shape
    if weight_q.shape[1] != c or weight_s.shape[1] != c:
        raise ShapeError(f"input has {c} channels, weights expect {weight_q.shape[1]}")
    cout = weight_q.shape[0]

    # query-axis conv at strided support centres
    xs = x[..., ::stride_s, ::stride_s]
    hs2, ws2 = xs.shape[-2:]
    xs = xs.permute(0, 4, 5, 1, 2, 3).reshape(b * hs2 * ws2, c, hq, wq)
    out_q = F.conv2d(xs, weight_q, stride=stride_q, padding=kq // 2)
    hq2, wq2 = out_q.shape[-2:]
    out_q = out_q.reshape(b, hs2, ws2, cout, hq2, wq2).permute(0, 3, 4, 5, 1, 2)

    # support-axis conv at strided query centres
    xq = x[:, :, ::stride_q, ::stride_q]
    xq = xq.permute(0, 2, 3, 1, 4, 5).reshape(b * hq2 * wq2, c, hs, ws)
    out_s = F.conv2d(xq, weight_s, stride=stride_s, padding=ks // 2)
    out_s = out_s.reshape(b, hq2, wq2, cout, hs2, ws2).permute(0, 3, 1, 2, 4, 5)

    out = out_q + out_s
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1, 1, 1)
    return out


class CenterPivotConv4d(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        cin, cout = spec.in_channels, spec.out_channels
        self.weight_q = nn.Parameter(torch.empty(cout, cin, spec.kernel_q, spec.kernel_q))
        self.weight_s = nn.Parameter(torch.empty(cout, cin, spec.kernel_s, spec.kernel_s))
        self.bias = nn.Parameter(torch.zeros(cout))
        nn.init.kaiming_uniform_(self.weight_q, a=5 ** 0.5)
        nn.init.kaiming_uniform_(self.weight_s, a=5 ** 0.5)

    def forward(self, x):
        return center_pivot_conv4d(x, self.weight_q, self.weight_s, self.bias,
                                   self.spec.stride_q, self.spec.stride_s)


def upsample_query(x, size):
    """Bilinear resize over the query axes of a 6D volume."""
    b, c, hq, wq, hs, ws = x.shape
    if (hq, wq) == tuple(size):
        return x
    y = x.permute(0, 1, 4, 5, 2, 3).reshape(b, c * hs * ws, hq, wq)
    y = F.interpolate(y, size=tuple(size), mode="bilinear", align_corners=False)
    return y.reshape(b, c, hs, ws, *size).permute(0, 1, 4, 5, 2, 3)


def _block(specs):
    layers = []
    for spec in specs:
        layers += [CenterPivotConv4d(spec), nn.GroupNorm(spec.groups, spec.out_channels), nn.ReLU()]
    return nn.Sequential(*layers)


class Neck(nn.Module):
    """Per-level squeezing stacks, coarse-to-fine fusion, support pooling.

    ``branch_specs`` lists the Conv4DSpec stacks finest level first.
    """

    def __init__(self, branch_specs, mix_specs):
        super().__init__()
        if len(branch_specs) != 3 or len(mix_specs) != 2:
            raise ConfigError("neck expects three branches and two mixing convolutions")
        self.branches = nn.ModuleList(_block(s) for s in branch_specs)
        self.mix_coarse = CenterPivotConv4d(mix_specs[0])
        self.mix_fine = CenterPivotConv4d(mix_specs[1])
        self.out_channels = mix_specs[1].out_channels

    @staticmethod
    def _add(a, b, name):
        if a.shape != b.shape:
            raise ShapeError(f"cannot add {name}: {tuple(a.shape)} vs {tuple(b.shape)}")
        return a + b

    def forward(self, corrs):
        """corrs: [C3, C4, C5] each (B, 1, hq, wq, hs, ws) -> (B, C_c, H_c, W_c)."""
        if len(corrs) != 3:
            raise ShapeError(f"expected three correlation levels, got {len(corrs)}")
        b3, b4, b5 = (branch(c) for branch, c in zip(self.branches, corrs))
        x = self._add(upsample_query(b5, b4.shape[2:4]), b4, "branch 1 into branch 2")
        x = self.mix_coarse(x)
        x = self._add(upsample_query(x, b3.shape[2:4]), b3, "branches 1+2 into branch 3")
        x = self.mix_fine(x)
        return x.mean(dim=(-2, -1))


def correlate(neck, pyr_q, pyr_s, mask_s):
    """Mask support features, build all three hypercorrelations, run the neck."""
    masked = mask_support_features(pyr_s, mask_s)
    corrs = [build_hypercorrelation(fq, fs) for fq, fs in zip(pyr_q, masked)]
    return neck(corrs)


def neck_forward(pyramid_correlations, neck):
    return neck(pyramid_correlations)
