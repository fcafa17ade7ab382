"""Network definitions and the gradient contract.

All nets are plain float32 CPU modules; a 64-bit mode is used for gradient
checking. Convolution weights start from N(0, 0.02), biases at zero, and
instance normalization carries no learned affine, so parameter vectors are a
pure function of (kind, seed, arch).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .seeding import torch_gen

NETWORK_KINDS = ("generator", "discriminator", "guess", "segmenter")


@dataclass(frozen=True)
class ArchConfig:
    gen_filters: int = 16
    gen_blocks: int = 2
    disc_filters: int = 16
    disc_layers: int = 3
    seg_classes: int = 4
    seg_filters: int = 32
    seg_kernel: int = 7


def to_model(x: torch.Tensor) -> torch.Tensor:
    """[0,1] intensity -> [-1,1] model range."""
    return x * 2.0 - 1.0


def from_model(x: torch.Tensor) -> torch.Tensor:
    """[-1,1] model range -> [0,1] intensity."""
    return (x + 1.0) / 2.0


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels, eps=1e-5, affine=False),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels, eps=1e-5, affine=False),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """Encoder / residual / decoder translator, tanh output in (-1,1)."""

    def __init__(self, base_filters: int = 16, n_blocks: int = 2):
        super().__init__()
        f = base_filters
        layers = [
            nn.Conv2d(3, f, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(f, eps=1e-5, affine=False),
            nn.ReLU(),
            nn.Conv2d(f, 2 * f, 3, stride=2, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(2 * f, eps=1e-5, affine=False),
            nn.ReLU(),
            nn.Conv2d(2 * f, 4 * f, 3, stride=2, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(4 * f, eps=1e-5, affine=False),
            nn.ReLU(),
        ]
        layers += [ResidualBlock(4 * f) for _ in range(n_blocks)]
        layers += [
            nn.ConvTranspose2d(4 * f, 2 * f, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(2 * f, eps=1e-5, affine=False),
            nn.ReLU(),
            nn.ConvTranspose2d(2 * f, f, 3, stride=2, padding=1, output_padding=1),
            nn.InstanceNorm2d(f, eps=1e-5, affine=False),
            nn.ReLU(),
            nn.Conv2d(f, 3, 7, padding=3, padding_mode="reflect"),
            nn.Tanh(),
        ]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"generator expects (N,3,H,W), got {tuple(x.shape)}")
        if x.shape[2] % 4 != 0 or x.shape[3] % 4 != 0:
            raise ValueError(f"generator needs H,W divisible by 4, got "
                             f"{tuple(x.shape[2:])}")
        return self.model(x)


class PatchDiscriminator(nn.Module):
    """Strided conv patch classifier; raw score map, no squashing (LSGAN)."""

    def __init__(self, in_channels: int = 3, base_filters: int = 16,
                 n_layers: int = 3):
        super().__init__()
        self.in_channels = in_channels
        f = base_filters
        layers = [nn.Conv2d(in_channels, f, 4, stride=2, padding=1),
                  nn.LeakyReLU(0.2)]
        for _ in range(n_layers - 1):
            layers += [
                nn.Conv2d(f, 2 * f, 4, stride=2, padding=1),
                nn.InstanceNorm2d(2 * f, eps=1e-5, affine=False),
                nn.LeakyReLU(0.2),
            ]
            f *= 2
        layers += [nn.Conv2d(f, 1, 3, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"discriminator expects (N,{self.in_channels},H,W), "
                             f"got {tuple(x.shape)}")
        return self.model(x)


class GuessDiscriminator(nn.Module):
    """Patch classifier over a channel-concatenated image pair.

    Higher score means the first input is judged to be the reconstruction.
    """

    def __init__(self, base_filters: int = 16, n_layers: int = 3):
        super().__init__()
        self.net = PatchDiscriminator(6, base_filters, n_layers)

    def forward(self, first, second):
        if first.shape != second.shape:
            raise ValueError(f"guess inputs must match: {tuple(first.shape)} vs "
                             f"{tuple(second.shape)}")
        return self.net(torch.cat([first, second], dim=1))


class Segmenter(nn.Module):
    """Per-pixel classifier, 4 conv layers, no downsampling.

    The default 7x7 kernels give a 25-pixel receptive field, wide enough at
    32px that every shape pixel sees its own boundary.
    """

    def __init__(self, n_classes: int = 4, base_filters: int = 32,
                 kernel: int = 7):
        super().__init__()
        p = kernel // 2
        f = base_filters
        self.model = nn.Sequential(
            nn.Conv2d(3, f, kernel, padding=p, padding_mode="reflect"),
            nn.ReLU(),
            nn.Conv2d(f, f, kernel, padding=p, padding_mode="reflect"),
            nn.ReLU(),
            nn.Conv2d(f, f, kernel, padding=p, padding_mode="reflect"),
            nn.ReLU(),
            nn.Conv2d(f, n_classes, kernel, padding=p, padding_mode="reflect"),
        )

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"segmenter expects (N,3,H,W), got {tuple(x.shape)}")
        return self.model(x)


def init_params(kind: str, seed: int, arch: ArchConfig = ArchConfig()) -> nn.Module:
    """Build a network of the given kind with N(0, 0.02) conv weights."""
    if kind == "generator":
        net = ResnetGenerator(arch.gen_filters, arch.gen_blocks)
    elif kind == "discriminator":
        net = PatchDiscriminator(3, arch.disc_filters, arch.disc_layers)
    elif kind == "guess":
        net = GuessDiscriminator(arch.disc_filters, arch.disc_layers)
    elif kind == "segmenter":
        net = Segmenter(arch.seg_classes, arch.seg_filters, arch.seg_kernel)
    else:
        raise ValueError(f"unknown network kind {kind!r}")
    g = torch_gen(seed, "init", kind)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.normal_(0.0, 0.02, generator=g)
                if m.bias is not None:
                    m.bias.zero_()
    return net


def forward(net: nn.Module, *inputs: torch.Tensor) -> torch.Tensor:
    return net(*inputs)


def backward(loss: torch.Tensor, params: list[torch.Tensor],
             inputs: list[torch.Tensor] | None = None):
    """Gradients of a scalar loss for every parameter and, on request, inputs."""
    if loss.dim() != 0:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    targets = list(params) + list(inputs or [])
    grads = torch.autograd.grad(loss, targets, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(t)
             for g, t in zip(grads, targets)]
    if inputs:
        return grads[:len(params)], grads[len(params):]
    return grads


def numeric_gradients(loss_fn, params: list[torch.Tensor],
                      h: float = 1e-5) -> list[torch.Tensor]:
    """Central finite differences of loss_fn() w.r.t. each parameter element."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat_p, flat_g = p.view(-1), g.view(-1)
            for i in range(flat_p.numel()):
                orig = flat_p[i].item()
                flat_p[i] = orig + h
                up = loss_fn().item()
                flat_p[i] = orig - h
                down = loss_fn().item()
                flat_p[i] = orig
                flat_g[i] = (up - down) / (2.0 * h)
            grads.append(g)
    return grads


def max_relative_error(analytic: list[torch.Tensor],
                       numeric: list[torch.Tensor]) -> float:
    """Max |a - n| over all elements, scaled by the gradient's own magnitude."""
    diff, scale = 0.0, 0.0
    for a, n in zip(analytic, numeric):
        diff = max(diff, (a - n).abs().max().item())
        scale = max(scale, a.abs().max().item(), n.abs().max().item())
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / scale


_MICRO_ARCH = ArchConfig(gen_filters=2, gen_blocks=1, disc_filters=2,
                         disc_layers=3, seg_classes=3, seg_filters=3,
                         seg_kernel=3)


def gradcheck(net_kind: str, seed: int = 0, h: float = 1e-6) -> float:
    """Analytic-vs-numeric gradient check on a micro instance of the network.

    Runs in float64; h is small enough that float64 cancellation stays
    orders below the tolerance while ReLU kink crossings become rare.
    Returns the max relative error over all parameters.
    """
    if net_kind == "identity":
        return 0.0  # degenerate zero-parameter case
    net = init_params(net_kind, seed, _MICRO_ARCH).double()
    g = torch_gen(seed, "gradcheck", net_kind)
    # discriminators downsample 3x; 16px keeps instance norm off 1x1 maps
    size = 8 if net_kind in ("generator", "segmenter") else 16
    if net_kind == "guess":
        inputs = (torch.rand(1, 3, size, size, generator=g).double() * 2 - 1,
                  torch.rand(1, 3, size, size, generator=g).double() * 2 - 1)
    else:
        inputs = (torch.rand(1, 3, size, size, generator=g).double() * 2 - 1,)
    out_shape = net(*inputs).shape
    target = torch.rand(out_shape, generator=g).double()

    def loss_fn():
        return ((net(*inputs) - target) ** 2).mean()

    params = list(net.parameters())
    analytic = backward(loss_fn(), params)
    numeric = numeric_gradients(loss_fn, params, h=h)
    return max_relative_error(analytic, numeric)
