import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from sidgan.nets import (
    ModelBundle,
    PatchGanSpec,
    RandomFeatureNet,
    UNetSpec,
    build_patchgan,
    build_unet,
    coverage_ratio,
    effective_context,
    parameter_count,
    random_patch,
    receptive_field,
)


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def test_unet_shape_default_and_divisibility():
    net = build_unet(UNetSpec(levels=5, base_width=4))
    with torch.no_grad():
        assert net(torch.zeros(1, 3, 256, 256)).shape == (1, 3, 256, 256)
    with pytest.raises(ValueError, match="divisible"):
        net(torch.zeros(1, 3, 100, 100))


def test_parameter_count_oracle():
    w = 8
    expected = (
        conv_params(3, w, 3) + conv_params(w, w, 3)              # encoder level 1
        + conv_params(w, 2 * w, 3) + conv_params(2 * w, 2 * w, 3)  # bottleneck
        + conv_params(2 * w, w, 1)                                # upsample projection
        + conv_params(2 * w, w, 3) + conv_params(w, w, 3)        # decoder block
        + conv_params(w, 3, 1)                                   # head
    )
    assert expected == 6203
    assert parameter_count(build_unet(UNetSpec(levels=2, base_width=8))) == expected


@settings(max_examples=20, deadline=None)
@given(
    st.integers(1, 4), st.integers(1, 6), st.integers(1, 4), st.integers(1, 4),
    st.integers(1, 3), st.integers(1, 3), st.sampled_from(["bilinear", "nearest"]),
    st.sampled_from(["tanh", "none"]),
)
def test_unet_preserves_shape(levels, width, cin, cout, mh, mw, mode, act):
    spec = UNetSpec(cin, cout, levels, width, mode, act)
    d = spec.divisor
    x = torch.randn(2, cin, d * mh * (2 if d < 4 else 1), d * mw * (2 if d < 4 else 1))
    with torch.no_grad():
        y = build_unet(spec)(x)
    assert y.shape == (2, cout) + x.shape[2:]
    if act == "tanh":
        assert y.abs().max() < 1


def test_tanh_bound_with_large_weights():
    net = build_unet(UNetSpec(levels=2, base_width=4), init_std=1.0)
    with torch.no_grad():
        y = net(10 * torch.randn(1, 3, 16, 16))
    assert y.abs().max() <= 1


def test_skip_ablation_changes_output():
    torch.manual_seed(0)
    net = build_unet(UNetSpec(levels=3, base_width=4), init_std=0.3)
    x = torch.randn(1, 3, 16, 16)
    with torch.no_grad():
        ref = net(x)
        for level in (0, 1):
            assert not torch.allclose(net(x, skip_mask={level: 0.0}), ref)


def test_unet_gradcheck_16px_base4():
    # float64, every parameter. A step of 1e-3 straddles ReLU / max-pool kinks
    # for a sizeable fraction of coordinates, so the central difference uses 1e-5.
    torch.manual_seed(1)
    net = build_unet(UNetSpec(levels=2, base_width=4), init_std=0.3).double()
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                # zero biases put dead-region pre-activations exactly on the ReLU kink
                p.uniform_(-0.5, 0.5)
            p.clamp_(-1, 1)
    x = torch.rand(1, 3, 16, 16, dtype=torch.double)
    # targets outside tanh's range keep the L1 residuals away from zero
    target = 1.5 + torch.rand(1, 3, 16, 16, dtype=torch.double)
    params = list(net.parameters())

    def loss():
        return (net(x) - target).abs().mean()

    grads = torch.autograd.grad(loss(), params)
    eps = 1e-5
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                dn = loss().item()
                flat[i] = old
                fd = (up - dn) / (2 * eps)
                an = g.view(-1)[i].item()
                assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-3), (i, fd, an)


def test_patchgan_grid_and_errors():
    spec = PatchGanSpec()
    d = build_patchgan(PatchGanSpec(base_width=4))
    with torch.no_grad():
        out = d(torch.zeros(1, 3, 192, 192))
    assert out.shape == (1, 1, 12, 12)
    assert d.grid_size() == 12 == build_patchgan(spec).grid_size()
    with pytest.raises(ValueError):
        PatchGanSpec(input_patch=190)


def test_patchgan_zero_weights():
    d = build_patchgan(PatchGanSpec(base_width=4, downsample_layers=2, input_patch=32), init_std=None)
    for p in d.parameters():
        nn.init.zeros_(p)
    with torch.no_grad():
        logits = d(torch.randn(2, 3, 32, 32))
    assert not logits.any()
    assert torch.all(torch.sigmoid(logits) == 0.5)


def test_receptive_field():
    assert receptive_field(nn.Conv2d(1, 1, 3)) == 3
    assert receptive_field(nn.Sequential(nn.Conv2d(1, 1, 3), nn.ReLU(), nn.Conv2d(1, 1, 3))) == 5
    # 4x4 stride-2 convs x4 then a 1x1 head: 1 + 3 * (1 + 2 + 4 + 8)
    assert receptive_field(build_patchgan(PatchGanSpec(base_width=4))) == 46
    with pytest.raises(TypeError):
        receptive_field(build_unet(UNetSpec(levels=2, base_width=2)))


def test_default_context_is_three_quarters():
    spec = PatchGanSpec()
    assert effective_context(spec, 256) == 192
    assert coverage_ratio(spec, 256) == 0.75


def test_random_patch():
    g = torch.Generator().manual_seed(0)
    x = torch.arange(64.0).reshape(1, 1, 8, 8)
    p = random_patch(x, 4, g)
    assert p.shape == (1, 1, 4, 4)
    assert random_patch(x, 8, g) is x


def test_feature_net_fixed():
    a, b = RandomFeatureNet(seed=3, pooled=True), RandomFeatureNet(seed=3, pooled=True)
    x = torch.randn(2, 3, 16, 16)
    assert torch.equal(a(x), b(x))
    assert a(x).shape == (2, a.dim)
    assert not any(p.requires_grad for p in a.parameters())


def test_bundle_type_checks():
    b = ModelBundle.build(UNetSpec(levels=2, base_width=2), PatchGanSpec(base_width=2, downsample_layers=2,
                                                                         input_patch=16))
    assert set(b.modules()) == {"g_ab", "g_ba", "g_bc", "g_cb", "d_a", "d_b", "d_c", "forward_model"}
    with pytest.raises(ValueError):
        ModelBundle(g_ab=build_unet(UNetSpec(in_channels=4, levels=2, base_width=2)))
    with pytest.raises(ValueError):
        ModelBundle(d_a=build_patchgan(PatchGanSpec(in_channels=1, base_width=2)))
