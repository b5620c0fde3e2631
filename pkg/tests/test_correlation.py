import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import bilinear_resize, dense_conv4d, dense_kernel4d
from imrseg.correlation import (
    CenterPivotConv4d, Conv4DSpec, Neck, build_hypercorrelation, center_pivot_conv4d,
    mask_support_features, neck_forward, upsample_query,
)
from imrseg.errors import ConfigError, ShapeError
from imrseg.pipeline import ArchConfig, PipelineConfig, build_model


def _pyramid(seed=0, b=1):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(b, c, s, s, generator=g, dtype=torch.float64) for c, s in ((4, 8), (6, 4), (8, 2))]


def test_mask_all_ones_and_zeros():
    pyr = _pyramid()
    ones = mask_support_features(pyr, torch.ones(1, 32, 32, dtype=torch.float64))
    zeros = mask_support_features(pyr, torch.zeros(1, 32, 32, dtype=torch.float64))
    for a, m1, m0 in zip(pyr, ones, zeros):
        assert torch.equal(a, m1)
        assert torch.all(m0 == 0)


def test_mask_half_plane_against_numpy_resize():
    pyr = _pyramid(1)
    mask = np.zeros((32, 32))
    mask[:, :16] = 1.0
    out = mask_support_features(pyr, torch.as_tensor(mask)[None])
    for level, masked in zip(pyr, out):
        s = level.shape[-1]
        m = bilinear_resize(mask, s, s)
        np.testing.assert_allclose(masked[0].numpy(), level[0].numpy() * m[None], atol=1e-12)


def test_mask_shape_errors():
    pyr = _pyramid()
    with pytest.raises(ShapeError):
        mask_support_features(pyr, torch.ones(32, 32))
    with pytest.raises(ShapeError):
        mask_support_features(pyr, torch.ones(1, 4, 4))


def test_hypercorrelation_self_diagonal():
    f = torch.rand(1, 5, 3, 3, dtype=torch.float64) + 0.1
    c = build_hypercorrelation(f, f)
    assert c.shape == (1, 1, 3, 3, 3, 3)
    for y in range(3):
        for x in range(3):
            assert c[0, 0, y, x, y, x] == pytest.approx(1.0, abs=1e-12)


def test_hypercorrelation_orthogonal_is_zero():
    q = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    s = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    q[:, 0] = 1.0
    s[:, 1] = 1.0
    assert torch.all(build_hypercorrelation(q, s) == 0)


def test_hypercorrelation_against_double_loop():
    rng = np.random.default_rng(5)
    q, s = rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2, 2))
    c = build_hypercorrelation(torch.as_tensor(q)[None], torch.as_tensor(s)[None])[0, 0].numpy()
    for a in range(2):
        for b in range(2):
            for u in range(2):
                for v in range(2):
                    fq, fs = q[:, a, b], s[:, u, v]
                    ref = max(0.0, fq @ fs / (np.linalg.norm(fq) * np.linalg.norm(fs)))
                    assert abs(c[a, b, u, v] - ref) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_hypercorrelation_range_and_swap(seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(1, 4, 3, 2, generator=g, dtype=torch.float64)
    s = torch.randn(1, 4, 2, 3, generator=g, dtype=torch.float64)
    c = build_hypercorrelation(q, s)
    assert c.min() >= 0 and c.max() <= 1 + 1e-12
    swapped = build_hypercorrelation(s, q)
    assert torch.allclose(c.permute(0, 1, 4, 5, 2, 3), swapped, atol=1e-14)


def test_even_kernel_rejected():
    with pytest.raises(ConfigError):
        Conv4DSpec(1, 1, kernel_q=2)


def test_identity_kernel():
    x = torch.rand(1, 1, 3, 3, 3, 3, dtype=torch.float64)
    wq = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    ws = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
    assert torch.equal(center_pivot_conv4d(x, wq, ws), x)


def test_matches_dense_oracle():
    rng = np.random.default_rng(0)
    for case in range(10):
        shape = (2, 2, *rng.integers(1, 5, size=4))
        x = rng.standard_normal(shape)
        kq, ks = rng.choice([1, 3], size=2)
        sq, ss = rng.choice([1, 2], size=2)
        wq, ws = rng.standard_normal((3, 2, kq, kq)), rng.standard_normal((3, 2, ks, ks))
        bias = rng.standard_normal(3)
        got = center_pivot_conv4d(torch.as_tensor(x), torch.as_tensor(wq), torch.as_tensor(ws),
                                  torch.as_tensor(bias), int(sq), int(ss)).numpy()
        ref = dense_conv4d(x, dense_kernel4d(wq, ws), bias, int(sq), int(ss))
        np.testing.assert_allclose(got, ref, atol=1e-10)


def test_impulse_response_is_a_cross():
    x = torch.zeros(1, 1, 5, 5, 5, 5, dtype=torch.float64)
    x[0, 0, 2, 2, 2, 2] = 1.0
    wq = torch.arange(1.0, 10.0, dtype=torch.float64).reshape(1, 1, 3, 3)
    ws = 2 * torch.arange(1.0, 10.0, dtype=torch.float64).reshape(1, 1, 3, 3)
    out = center_pivot_conv4d(x, wq, ws)[0, 0]
    support = out[:, :, 2, 2]
    query = out[2, 2]
    # flipped kernel (cross-correlation), centre gets both terms
    expect_q = torch.flip(wq[0, 0], (0, 1))
    expect_s = torch.flip(ws[0, 0], (0, 1))
    centre = expect_q[1, 1] + expect_s[1, 1]
    eq = expect_q.clone()
    eq[1, 1] = centre
    es = expect_s.clone()
    es[1, 1] = centre
    assert torch.equal(support[1:4, 1:4], eq)
    assert torch.equal(query[1:4, 1:4], es)
    nonzero = (out != 0).sum()
    assert nonzero == 17


def test_upsample_query_shape():
    x = torch.rand(1, 2, 2, 2, 3, 3)
    assert upsample_query(x, (4, 4)).shape == (1, 2, 4, 4, 3, 3)
    assert upsample_query(x, (2, 2)) is x


def _neck(config=None):
    config = config or PipelineConfig()
    return build_model(config).neck


def _corrs(b=1, seed=0, size=16, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    sizes = (size, size // 2, size // 4)
    return [torch.rand(b, 1, s, s, s, s, generator=g, dtype=dtype) for s in sizes]


def test_neck_output_shape():
    out = _neck()(_corrs())
    assert out.shape == (1, 32, 16, 16)


def test_neck_zero_in_zero_out():
    neck = _neck()
    zeros = [torch.zeros_like(c) for c in _corrs()]
    assert torch.all(neck(zeros) == 0)


def test_neck_shape_mismatch_names_branch():
    neck = _neck()
    corrs = _corrs()
    corrs[1] = torch.rand(1, 1, 8, 8, 16, 16)
    with pytest.raises(ShapeError, match="branch 1 into branch 2"):
        neck(corrs)


def test_neck_pooling_constant_support():
    neck = _neck()
    corrs = _corrs()
    # constant along support axes at every level -> pooled output equals any support slice
    const = [c[..., :1, :1].expand_as(c).contiguous() for c in corrs]
    out = neck_forward(const, neck)
    assert out.shape == (1, 32, 16, 16)
    assert torch.isfinite(out).all()


def _tiny_neck():
    arch = ArchConfig(image_size=16, level_channels=(4, 4, 4), branch_channels=(2, 2, 4),
                      support_strides=((2, 2, 1), (2, 1, 1), (1, 1, 1)), mix_channels=4,
                      corr_channels=4, gn_groups=1, feat_proj_channels=2, cell_groups=2,
                      head_mid_channels=4, fuse_channels=4)
    return _neck(PipelineConfig(arch=arch)).double()


def test_neck_gradient_finite_difference():
    neck = _tiny_neck()
    corrs = _corrs(size=4, dtype=torch.float64)
    corrs = [c.requires_grad_(True) for c in corrs]
    weight = torch.randn(1, 4, 4, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda a, b, c: (neck([a, b, c]) * weight).sum(), corrs,
                                    eps=1e-6, atol=1e-6)
