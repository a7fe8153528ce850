"""U-Net generators, PatchGAN discriminators and a fixed random feature net.

Networks use PyTorch and the NCHW layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int = 3
    out_channels: int = 3
    levels: int = 5
    base_width: int = 32
    upsample_mode: str = "bilinear"
    final_activation: str = "tanh"

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.levels, self.base_width) < 1:
            raise ValueError("UNetSpec sizes must be positive")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ValueError(f"unknown upsample mode {self.upsample_mode!r}")
        if self.final_activation not in ("tanh", "none"):
            raise ValueError(f"unknown final activation {self.final_activation!r}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


@dataclass(frozen=True)
class PatchGanSpec:
    in_channels: int = 3
    downsample_layers: int = 4
    base_width: int = 64
    input_patch: int = 192
    kernel_size: int = 4
    instance_norm: bool = True
    max_width_mult: int = 8

    def __post_init__(self):
        if min(self.in_channels, self.downsample_layers, self.base_width, self.input_patch) < 1:
            raise ValueError("PatchGanSpec sizes must be positive")
        if self.input_patch % (2**self.downsample_layers):
            raise ValueError(
                f"input_patch {self.input_patch} not divisible by 2**{self.downsample_layers}"
            )


def conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class Upsample(nn.Module):
    """Interpolate x2 followed by a 1x1 convolution (no transposed convs)."""

    def __init__(self, cin: int, cout: int, mode: str = "bilinear"):
        super().__init__()
        self.mode = mode
        self.proj = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        if self.mode == "bilinear":
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        else:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.proj(x)


class UNet(nn.Module):
    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        widths = [spec.base_width * 2**i for i in range(spec.levels)]
        self.down = nn.ModuleList()
        cin = spec.in_channels
        for w in widths:
            self.down.append(conv_block(cin, w))
            cin = w
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w_hi, w_lo in zip(widths[:0:-1], widths[-2::-1]):
            self.up.append(Upsample(w_hi, w_lo, spec.upsample_mode))
            self.dec.append(conv_block(2 * w_lo, w_lo))
        self.head = nn.Conv2d(widths[0], spec.out_channels, 1)

    def forward(self, x, skip_mask: dict[int, float] | None = None):
        h, w = x.shape[-2:]
        d = self.spec.divisor
        if h % d or w % d:
            raise ValueError(f"input {h}x{w} not divisible by {d} for {self.spec.levels} levels")
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for up, dec in zip(self.up, self.dec):
            s = skips.pop()
            if skip_mask and len(skips) in skip_mask:
                s = s * skip_mask[len(skips)]
            x = dec(torch.cat([up(x), s], dim=1))
        x = self.head(x)
        return torch.tanh(x) if self.spec.final_activation == "tanh" else x


def build_unet(spec: UNetSpec, init_std: float | None = 0.02) -> UNet:
    net = UNet(spec)
    if init_std is not None:
        init_weights(net, init_std)
    return net


class PatchDiscriminator(nn.Module):
    """Stride-2 conv stack ending in a 1x1 head; one logit per receptive patch."""

    def __init__(self, spec: PatchGanSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        cin = spec.in_channels
        pad = (spec.kernel_size - 2) // 2
        for i in range(spec.downsample_layers):
            cout = spec.base_width * min(2**i, spec.max_width_mult)
            layers.append(nn.Conv2d(cin, cout, spec.kernel_size, stride=2, padding=pad))
            if spec.instance_norm and i > 0:
                layers.append(nn.InstanceNorm2d(cout))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 1))
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)

    def grid_size(self, patch: int | None = None) -> int:
        n = self.spec.input_patch if patch is None else patch
        k = self.spec.kernel_size
        pad = (k - 2) // 2
        for _ in range(self.spec.downsample_layers):
            n = (n + 2 * pad - k) // 2 + 1
        return n


def build_patchgan(spec: PatchGanSpec, init_std: float | None = 0.02) -> PatchDiscriminator:
    net = PatchDiscriminator(spec)
    if init_std is not None:
        init_weights(net, init_std)
    return net


def init_weights(net: nn.Module, std: float = 0.02) -> nn.Module:
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return net


def random_patch(x: torch.Tensor, size: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Random ``size`` x ``size`` crop of an NCHW batch; identity if already small enough."""
    h, w = x.shape[-2:]
    if h <= size and w <= size:
        return x
    size_h, size_w = min(size, h), min(size, w)
    y0 = int(torch.randint(0, h - size_h + 1, (1,), generator=generator))
    x0 = int(torch.randint(0, w - size_w + 1, (1,), generator=generator))
    return x[..., y0 : y0 + size_h, x0 : x0 + size_w]


_PASSTHROUGH = (nn.ReLU, nn.LeakyReLU, nn.Sigmoid, nn.Tanh, nn.InstanceNorm2d, nn.BatchNorm2d, nn.Identity)


def _layer_geometry(m: nn.Module):
    if isinstance(m, (nn.Conv2d, nn.MaxPool2d, nn.AvgPool2d)):
        k, s, d = m.kernel_size, m.stride, getattr(m, "dilation", 1)
        k = k[0] if isinstance(k, tuple) else k
        s = s[0] if isinstance(s, tuple) else s
        d = d[0] if isinstance(d, tuple) else d
        return d * (k - 1) + 1, s
    if isinstance(m, _PASSTHROUGH):
        return 1, 1
    return None


def _flatten_feedforward(net: nn.Module) -> list[nn.Module]:
    if isinstance(net, PatchDiscriminator):
        net = net.layers
    if isinstance(net, nn.Sequential):
        out = []
        for m in net:
            out.extend(_flatten_feedforward(m))
        return out
    if _layer_geometry(net) is not None:
        return [net]
    raise TypeError(f"{type(net).__name__} is not a feed-forward conv/pool stack")


def receptive_field(net: nn.Module) -> int:
    """Receptive field (input pixels) of one output unit of a conv/pool stack."""
    rf, jump = 1, 1
    for m in _flatten_feedforward(net):
        k, s = _layer_geometry(m)
        rf += (k - 1) * jump
        jump *= s
    return rf


def effective_context(spec: PatchGanSpec, input_size: int) -> int:
    """Pixels of an ``input_size`` image a discriminator sees per evaluation."""
    return min(spec.input_patch, input_size)


def coverage_ratio(spec: PatchGanSpec, input_size: int) -> float:
    return effective_context(spec, input_size) / input_size


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


class RandomFeatureNet(nn.Module):
    """Frozen, seeded shallow conv stack used as a stand-in feature extractor.

    Maps NCHW images to feature maps (``pooled=False``) or to vectors of mean
    and standard deviation per channel (``pooled=True``).
    """

    def __init__(self, in_channels: int = 3, widths=(16, 32), seed: int = 0, pooled: bool = False):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers: list[nn.Module] = []
        cin = in_channels
        for i, w in enumerate(widths):
            conv = nn.Conv2d(cin, w, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / (cin * 9)) ** 0.5)
                conv.bias.zero_()
            layers += [conv, nn.LeakyReLU(0.2)]
            cin = w
        self.body = nn.Sequential(*layers)
        self.pooled = pooled
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def dim(self) -> int:
        return 2 * self.body[-2].out_channels

    def forward(self, x):
        f = self.body(x)
        if not self.pooled:
            return f
        return torch.cat([f.mean(dim=(2, 3)), f.std(dim=(2, 3))], dim=1)


@dataclass
class ModelBundle:
    g_ab: nn.Module | None = None
    g_ba: nn.Module | None = None
    g_bc: nn.Module | None = None
    g_cb: nn.Module | None = None
    d_a: nn.Module | None = None
    d_b: nn.Module | None = None
    d_c: nn.Module | None = None
    forward_model: nn.Module | None = None

    def __post_init__(self):
        for name in ("g_ab", "g_ba", "g_bc", "g_cb", "forward_model"):
            m = getattr(self, name)
            if isinstance(m, UNet) and (m.spec.in_channels != 3 or m.spec.out_channels != 3):
                raise ValueError(f"{name} must map 3-channel RGB to 3-channel RGB")
        for name in ("d_a", "d_b", "d_c"):
            m = getattr(self, name)
            if isinstance(m, PatchDiscriminator) and m.spec.in_channels != 3:
                raise ValueError(f"{name} must consume 3-channel images")

    def modules(self) -> dict[str, nn.Module]:
        names = ("g_ab", "g_ba", "g_bc", "g_cb", "d_a", "d_b", "d_c", "forward_model")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    @classmethod
    def build(cls, gen: UNetSpec | None = None, disc: PatchGanSpec | None = None,
              forward: UNetSpec | None = None, seed: int = 0) -> "ModelBundle":
        gen = gen or UNetSpec()
        disc = disc or PatchGanSpec()
        torch.manual_seed(seed)
        kw = {n: build_unet(gen) for n in ("g_ab", "g_ba", "g_bc", "g_cb")}
        kw.update({n: build_patchgan(disc) for n in ("d_a", "d_b", "d_c")})
        kw["forward_model"] = build_unet(forward or gen)
        return cls(**kw)
