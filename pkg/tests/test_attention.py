import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pabnet.attention import (
    AttentionOrder,
    Mlp,
    PoseAttentionBlock,
    SpatialConv,
    SpatialHead,
    SpamVariant,
    acam_forward,
    apply_pab,
    global_pool_stats,
    spam_channel_refine,
    spam_forward,
)
from pabnet.errors import InvalidInputError, ShapeError

D = torch.float64


def _params(mlp):
    return [t.detach().numpy() for t in (mlp.w1, mlp.b1, mlp.w2, mlp.b2)]


def _block(c_pose, c_target, hidden, seed, variant="conv3_stride2"):
    pab = PoseAttentionBlock(c_pose, c_target, hidden, spam_variant=variant, dtype=D)
    pab.reset_parameters(torch.Generator().manual_seed(seed))
    return pab


def test_pool_constant():
    avg, mx = global_pool_stats(torch.full((4, 3, 3), 3.0))
    assert torch.equal(avg, torch.full((4,), 3.0))
    assert torch.equal(mx, torch.full((4,), 3.0))


def test_pool_hand_values():
    avg, mx = global_pool_stats(torch.tensor([[[1.0, 2.0], [3.0, 4.0]]]))
    assert avg.item() == 2.5
    assert mx.item() == 4.0


def test_pool_full_shape():
    avg, mx = global_pool_stats(torch.randn(2048, 7, 7))
    assert avg.shape == mx.shape == (2048,)


def test_pool_rejects_empty():
    with pytest.raises(InvalidInputError):
        global_pool_stats(torch.zeros(3, 0, 4))


def test_acam_full_shape():
    mlp = Mlp(2048, 1792, 128)
    mlp.reset_parameters(torch.Generator().manual_seed(0))
    assert acam_forward(torch.randn(2048, 7, 7), mlp).shape == (1792,)


def test_acam_zero_params_half():
    mlp = Mlp(5, 7, 3, dtype=D)
    out = acam_forward(torch.randn(5, 4, 4, dtype=D), mlp)
    assert torch.equal(out, torch.full((7,), 0.5, dtype=D))


def test_acam_constant_channels_dense_oracle():
    mlp = Mlp(4, 6, 3, dtype=D)
    mlp.reset_parameters(torch.Generator().manual_seed(3))
    c = torch.tensor([0.5, -1.0, 2.0, 0.0], dtype=D)
    x = c[:, None, None].expand(4, 5, 5).clone()
    w1, b1, w2, b2 = _params(mlp)
    # avg = max = c, so both MLP terms coincide
    dense = 2 * (w2 @ np.maximum(w1 @ c.numpy() + b1, 0) + b2)
    np.testing.assert_allclose(acam_forward(x, mlp).detach().numpy(), 1 / (1 + np.exp(-dense)), atol=1e-14)


def test_acam_channel_mismatch():
    with pytest.raises(ShapeError):
        acam_forward(torch.zeros(3, 4, 4), Mlp(5, 2, 2))


def test_refine_zero_params_half():
    x = torch.randn(3, 4, 4, dtype=D)
    assert torch.equal(spam_channel_refine(x, Mlp(3, 3, 2, dtype=D)), 0.5 * x)


def test_refine_zero_input():
    mlp = Mlp(3, 3, 2, dtype=D)
    mlp.reset_parameters(torch.Generator().manual_seed(1))
    assert torch.equal(spam_channel_refine(torch.zeros(3, 2, 2, dtype=D), mlp), torch.zeros(3, 2, 2, dtype=D))


def test_refine_small_oracle():
    mlp = Mlp(3, 3, 4, dtype=D)
    mlp.reset_parameters(torch.Generator().manual_seed(2))
    x = torch.randn(3, 2, 2, dtype=D, generator=torch.Generator().manual_seed(5))
    ref = oracles.channel_refine(x.numpy(), _params(mlp))
    np.testing.assert_allclose(spam_channel_refine(x, mlp).detach().numpy(), ref, atol=1e-12)


def test_spam_full_shape():
    pab = PoseAttentionBlock(2048, 1792, 128)
    pab.reset_parameters(torch.Generator().manual_seed(0))
    assert spam_forward(torch.randn(2048, 7, 7), pab.mlp2, pab.spam).shape == (3, 3)


def test_spam_zero_conv_half():
    mlp = Mlp(2, 2, 2, dtype=D)
    mlp.reset_parameters(torch.Generator().manual_seed(0))
    ms = spam_forward(torch.randn(2, 7, 7, dtype=D), mlp, SpatialConv(dtype=D))
    assert torch.equal(ms, torch.full((3, 3), 0.5, dtype=D))


@pytest.mark.parametrize("variant", ["conv3_stride2", "conv1_maxpool"])
def test_spam_sliding_window_oracle(variant):
    pab = _block(2, 2, 3, seed=4, variant=variant)
    x = torch.randn(2, 5, 5, dtype=D, generator=torch.Generator().manual_seed(9))
    ref = oracles.spam(x.numpy(), _params(pab.mlp2), pab.spam.conv.w.detach().numpy(),
                       pab.spam.conv.b.detach().numpy(), variant)
    np.testing.assert_allclose(spam_forward(x, pab.mlp2, pab.spam).detach().numpy(), ref, atol=1e-12)
    assert pab.spam.output_size(5) == 2


def test_spam_conv1_variant_shape():
    head = SpatialHead(SpamVariant.CONV1_MAXPOOL)
    assert head.conv.w.shape == (1, 2, 1, 1)
    assert head.output_size(7) == 3


def test_spam_too_small():
    with pytest.raises(InvalidInputError):
        spam_forward(torch.zeros(2, 2, 2), Mlp(2, 2, 2), SpatialConv())


def test_apply_identity():
    f = torch.randn(5, 3, 3)
    assert torch.equal(apply_pab(f, torch.ones(5), torch.ones(3, 3)), f)


def test_apply_full_shape():
    out = apply_pab(torch.randn(1792, 3, 3), torch.rand(1792), torch.rand(3, 3))
    assert out.shape == (1792, 3, 3)


def test_apply_ones_is_outer_product():
    mc, ms = torch.rand(4, dtype=D), torch.rand(2, 3, dtype=D)
    out = apply_pab(torch.ones(4, 2, 3, dtype=D), mc, ms)
    for c in range(4):
        for h in range(2):
            for w in range(3):
                assert out[c, h, w].item() == pytest.approx(mc[c].item() * ms[h, w].item(), abs=1e-15)


def test_apply_orders_agree():
    f, mc, ms = torch.randn(4, 3, 3, dtype=D), torch.rand(4, dtype=D), torch.rand(3, 3, dtype=D)
    a = apply_pab(f, mc, ms, AttentionOrder.CHANNEL_THEN_SPATIAL)
    b = apply_pab(f, mc, ms, "spatial_then_channel")
    torch.testing.assert_close(a, b, atol=1e-15, rtol=0)


def test_apply_shape_errors():
    with pytest.raises(ShapeError):
        apply_pab(torch.ones(4, 3, 3), torch.ones(5), torch.ones(3, 3))
    with pytest.raises(ShapeError):
        apply_pab(torch.ones(4, 3, 3), torch.ones(4), torch.ones(2, 2))


def test_zero_parameter_gate_quarter():
    pab = PoseAttentionBlock(4, 6, 3, dtype=D)
    f = torch.randn(6, 3, 3, dtype=D)
    out = pab(f, torch.randn(4, 7, 7, dtype=D))
    assert torch.equal(out, 0.25 * f)


def test_parameter_names():
    names = [n for n, _ in PoseAttentionBlock(4, 4, 3).named_parameters()]
    assert names == [
        "mlp1.w1", "mlp1.b1", "mlp1.w2", "mlp1.b2",
        "mlp2.w1", "mlp2.b1", "mlp2.w2", "mlp2.b2",
        "spam.conv.w", "spam.conv.b",
    ]


def test_batched_matches_single():
    pab = _block(3, 4, 5, seed=1)
    x = torch.randn(2, 3, 7, 7, dtype=D)
    mc, ms = pab.maps(x)
    for i in range(2):
        mci, msi = pab.maps(x[i])
        torch.testing.assert_close(mc[i], mci, atol=1e-15, rtol=0)
        torch.testing.assert_close(ms[i], msi, atol=1e-15, rtol=0)


dims = st.integers(1, 8)
sides = st.integers(3, 7)


@settings(max_examples=40, deadline=None)
@given(c=dims, h=sides, w=sides, seed=st.integers(0, 2**16), scale=st.floats(0.1, 5.0))
def test_maps_strictly_inside_unit_interval(c, h, w, seed, scale):
    pab = _block(c, c, 3, seed)
    x = scale * torch.randn(c, h, w, dtype=D, generator=torch.Generator().manual_seed(seed))
    mc, ms = pab.maps(x)
    assert bool(((mc > 0) & (mc < 1)).all()) and bool(((ms > 0) & (ms < 1)).all())


@settings(max_examples=40, deadline=None)
@given(c=dims, h=sides, w=sides, seed=st.integers(0, 2**16))
def test_shape_contract(c, h, w, seed):
    pab = _block(c, c + 1, 2, seed)
    mc, ms = pab.maps(torch.randn(c, h, w, dtype=D))
    assert mc.shape == (c + 1,)
    assert ms.shape == ((h - 3) // 2 + 1, (w - 3) // 2 + 1)


@settings(max_examples=40, deadline=None)
@given(c=dims, h=sides, w=sides, seed=st.integers(0, 2**16))
def test_acam_spatial_permutation_invariance(c, h, w, seed):
    pab = _block(c, 3, 4, seed)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(c, h, w, dtype=D, generator=g)
    perm = torch.randperm(h * w, generator=g)
    xp = x.flatten(1)[:, perm].reshape(c, h, w)
    torch.testing.assert_close(acam_forward(x, pab.mlp1), acam_forward(xp, pab.mlp1),
                               atol=1e-14, rtol=0)
