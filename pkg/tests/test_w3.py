import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import channel_pool_loop, conv_loop, conv_multi_loop, matmul_loop, sigmoid_scalar, spatial_pool_loop
from w3kit.errors import ConfigError
from w3kit.primitives import grad_check
from w3kit.w3 import W3Attention, apply_masks, apply_w3, mask_element_count


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def make(C, seed=0, **kw):
    return W3Attention(C, seed=seed, **kw).double()


def randF(rng, shape):
    return torch.as_tensor(rng.normal(size=shape))


# --- channel-temporal --------------------------------------------------------------------

def test_channel_frame_zero_network_gives_half():
    m = make(4)
    zero_(m.channel_mlp)
    out = m.channel_frame_attention(torch.randn(3, 4, 2, 2, dtype=torch.float64))
    assert torch.equal(out, torch.full((3, 4), 0.5, dtype=torch.float64))


def test_channel_frame_constant_input_same_for_every_frame():
    m = make(6, seed=3)
    out = m.channel_frame_attention(torch.full((5, 6, 3, 3), 0.7, dtype=torch.float64))
    for t in range(1, 5):
        assert torch.equal(out[t], out[0])


def test_channel_frame_matches_composed_oracle():
    rng = np.random.default_rng(0)
    m = make(4, seed=1, reduction=2)
    F = rng.normal(size=(2, 4, 3, 3))
    W1 = m.channel_mlp[0].weight.detach().numpy()
    W2 = m.channel_mlp[2].weight.detach().numpy()
    b2 = rng.normal(size=4)
    with torch.no_grad():
        m.channel_mlp[2].bias.copy_(torch.as_tensor(b2))

    def mlp(d):
        h = np.maximum(matmul_loop(d, W1, np.zeros(W1.shape[0])), 0.0)
        return matmul_loop(h, W2, b2)

    avg, mx = spatial_pool_loop(F, "avg"), spatial_pool_loop(F, "max")
    expected = np.array([[sigmoid_scalar(z) for z in mlp(avg[t]) + mlp(mx[t])] for t in range(2)])
    got = m.channel_frame_attention(torch.as_tensor(F)).detach().numpy()
    np.testing.assert_allclose(got, expected, rtol=1e-6)


def test_channel_video_w2_bypass_exact():
    m = make(3, temporal=False)
    x = torch.rand(4, 3, dtype=torch.float64)
    assert m.channel_video_attention(x) is x


def test_channel_video_zero_kernels_give_half():
    m = make(2)
    zero_(m.channel_temporal)
    out = m.channel_video_attention(torch.rand(4, 2, dtype=torch.float64))
    assert torch.equal(out, torch.full((4, 2), 0.5, dtype=torch.float64))


def test_channel_video_delta_kernels_reduce_to_sigmoid():
    m = make(2)
    zero_(m.channel_temporal)
    with torch.no_grad():
        m.channel_temporal[0].weight[:, 0, 1] = 1.0
        m.channel_temporal[2].weight[:, 0, 1] = 1.0
    x = torch.rand(4, 2, dtype=torch.float64)  # frame masks live in (0, 1), so the ReLU passes them
    got = m.channel_video_attention(x).detach().numpy()
    expected = np.vectorize(sigmoid_scalar)(x.numpy())
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_even_temporal_kernel_rejected():
    with pytest.raises(ConfigError):
        W3Attention(4, temporal_kernel=4)


# --- spatial-temporal --------------------------------------------------------------------

def test_spatial_frame_zero_kernel_gives_half():
    m = make(3)
    zero_(m.spatial_conv)
    out = m.spatial_frame_attention(torch.randn(2, 3, 4, 4, dtype=torch.float64))
    assert torch.equal(out, torch.full((2, 1, 4, 4), 0.5, dtype=torch.float64))


def test_spatial_frame_single_channel_sum_kernel():
    m = make(1)
    zero_(m.spatial_conv)
    with torch.no_grad():
        m.spatial_conv.weight[0, :, 3, 3] = 1.0  # centred delta on both descriptor maps
    F = torch.randn(2, 1, 3, 5, dtype=torch.float64)
    expected = np.vectorize(sigmoid_scalar)(2.0 * F.numpy())
    np.testing.assert_allclose(m.spatial_frame_attention(F).detach().numpy(), expected, rtol=1e-12)


def test_spatial_frame_matches_composed_oracle():
    rng = np.random.default_rng(1)
    m = make(3, seed=2)
    with torch.no_grad():
        m.spatial_conv.bias.fill_(0.3)
    F = rng.normal(size=(2, 3, 5, 4))
    w = m.spatial_conv.weight.detach().numpy()
    expected = np.zeros((2, 1, 5, 4))
    for t in range(2):
        desc = np.concatenate([channel_pool_loop(F[t:t + 1], "avg")[0], channel_pool_loop(F[t:t + 1], "max")[0]])
        expected[t] = np.vectorize(sigmoid_scalar)(conv_multi_loop(desc, w, [0.3]))
    got = m.spatial_frame_attention(torch.as_tensor(F)).detach().numpy()
    np.testing.assert_allclose(got, expected, rtol=1e-6)


def test_spatial_video_w2_bypass_squeezes_exactly():
    m = make(3, temporal=False)
    x = torch.rand(3, 1, 4, 4, dtype=torch.float64)
    assert torch.equal(m.spatial_video_attention(x), x[:, 0])


def test_spatial_video_zero_kernel_gives_half():
    m = make(3)
    zero_(m.video_conv)
    out = m.spatial_video_attention(torch.rand(3, 1, 4, 4, dtype=torch.float64))
    assert torch.equal(out, torch.full((3, 4, 4), 0.5, dtype=torch.float64))


def test_spatial_video_delta_kernel_is_sigmoid():
    m = make(3)
    zero_(m.video_conv)
    with torch.no_grad():
        m.video_conv.weight[0, 0, 1, 1, 1] = 1.0
    x = torch.rand(3, 1, 4, 4, dtype=torch.float64)
    expected = np.vectorize(sigmoid_scalar)(x[:, 0].numpy())
    np.testing.assert_allclose(m.spatial_video_attention(x).detach().numpy(), expected, rtol=1e-12)


def test_spatial_video_matches_conv3d_loop():
    m = make(2, seed=4)
    x = torch.rand(3, 1, 4, 4, dtype=torch.float64)
    k = m.video_conv.weight[0, 0].detach().numpy()
    b = m.video_conv.bias.item()
    expected = np.vectorize(sigmoid_scalar)(conv_loop(x[:, 0].numpy(), k) + b)
    np.testing.assert_allclose(m.spatial_video_attention(x).detach().numpy(), expected, rtol=1e-6)


# --- full module ---------------------------------------------------------------------

def test_zero_input_gives_zero_output():
    m = make(3, seed=5)
    out, _ = apply_w3(torch.zeros(2, 3, 4, 4, dtype=torch.float64), m)
    assert torch.equal(out, torch.zeros(2, 3, 4, 4, dtype=torch.float64))


def test_all_ones_masks_give_identity():
    m = make(3, seed=6)
    m.mask_override = lambda name, mask: torch.ones_like(mask)
    F = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    out, _ = m.apply_w3(F)
    assert torch.equal(out, F)


def test_apply_w3_matches_broadcast_product_oracle():
    rng = np.random.default_rng(7)
    m = make(3, seed=7)
    F = randF(rng, (2, 3, 2, 2))
    out, masks = m.apply_w3(F)
    Mc, Ms, Fn = masks.channel.detach().numpy(), masks.spatial.detach().numpy(), F.numpy()
    expected = np.zeros_like(Fn)
    for t in range(2):
        for c in range(3):
            for h in range(2):
                for w in range(2):
                    expected[t, c, h, w] = Mc[t, c] * Ms[t, h, w] * Fn[t, c, h, w]
    np.testing.assert_allclose(out.detach().numpy(), expected, rtol=1e-12)
    # the spatial mask is computed from the channel-refined map, not from F
    xc = masks.channel[..., None, None] * F
    torch.testing.assert_close(m.spatial_frame_attention(xc), masks.spatial_frame, rtol=0, atol=0)


def test_batched_matches_unbatched():
    m = make(4, seed=8)
    F = torch.randn(3, 5, 4, 3, 3, dtype=torch.float64)
    out = m(F)
    for b in range(3):
        torch.testing.assert_close(out[b], m(F[b]), rtol=1e-12, atol=1e-14)


def test_mask_element_count_arithmetic():
    assert mask_element_count(8, 64, 7, 7) == 904
    assert 8 * 64 * 7 * 7 == 25088
    m = W3Attention(64, seed=0)
    _, masks = m.apply_w3(torch.randn(8, 64, 7, 7))
    assert masks.numel() == 904


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000),
       st.booleans())
def test_invariants_random_shapes(T, C, H, W, seed, temporal):
    rng = np.random.default_rng(seed)
    m = make(C, seed=seed % 7, temporal=temporal, reduction=2)
    F = randF(rng, (T, C, H, W))
    out, masks = m.apply_w3(F)
    assert out.shape == F.shape
    for mask in (masks.channel_frame, masks.channel, masks.spatial_frame, masks.spatial):
        assert ((mask > 0) & (mask < 1)).all()
    nz = F != 0
    assert (out.abs()[nz] < F.abs()[nz]).all()


def test_w2_equals_frame_level_masks_only():
    F = torch.randn(4, 5, 3, 3, dtype=torch.float64)
    m = make(5, seed=9, temporal=False)
    out, masks = m.apply_w3(F)
    cf = m.channel_frame_attention(F)
    sf = m.spatial_frame_attention(cf[..., None, None] * F)
    assert torch.equal(out, apply_masks(F, cf, sf[:, 0]))


def test_frame_permutation_permutes_frame_masks():
    m = make(4, seed=10)
    F = torch.randn(5, 4, 3, 3, dtype=torch.float64)
    perm = torch.tensor([3, 0, 4, 1, 2])
    cf, cfp = m.channel_frame_attention(F), m.channel_frame_attention(F[perm])
    assert torch.equal(cfp, cf[perm])
    sf, sfp = m.spatial_frame_attention(F), m.spatial_frame_attention(F[perm])
    assert torch.equal(sfp, sf[perm])


@pytest.mark.parametrize("temporal", [True, False])
def test_gradcheck_apply_w3(temporal):
    torch.manual_seed(0)
    m = make(4, seed=11, reduction=2, temporal=temporal)
    F = torch.randn(2, 4, 3, 3, dtype=torch.float64)
    rep = grad_check(m, [F], params=list(m.named_parameters()), epsilon=1e-4, tolerance=1e-3)
    assert rep.passed, rep
