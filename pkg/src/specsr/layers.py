"""Small torch building blocks shared by the unfolding and fusion networks.

All spatial tensors are (batch, channels, height, width); pixel ``l`` of a
HyperCube maps to ``(l // width, l % width)``.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .cube import HyperCube

DTYPE = torch.float64


def cube_to_tensor(c: HyperCube, dtype=DTYPE) -> torch.Tensor:
    return torch.as_tensor(np.array(c.image()), dtype=dtype).unsqueeze(0)


def tensor_to_cube(t: torch.Tensor, like: HyperCube, wavelengths=None) -> HyperCube:
    img = t.detach().cpu().to(torch.float64).numpy()[0]
    wl = like.wavelengths if wavelengths is None else wavelengths
    return HyperCube.from_image(img, wl)


def seeded_normal(shape, std: float, gen: torch.Generator, dtype=DTYPE) -> torch.Tensor:
    return torch.randn(shape, generator=gen, dtype=dtype) * std


class ReflectConv(nn.Module):
    """``k x k`` convolution with reflective 'same' padding.

    Large images are convolved in row tiles so the unfolded-patch buffer of
    the CPU float64 kernel stays below ``tile_elems`` entries; without this
    a 512x512 input needs a ~700 MB buffer per call.
    """

    tile_elems = 2**20

    def __init__(self, c_in: int, c_out: int, k: int = 3, *, gen=None, gain: float = 1.0, dtype=DTYPE):
        super().__init__()
        gen = gen if gen is not None else torch.Generator().manual_seed(0)
        std = gain * math.sqrt(2.0 / (c_in * k * k))
        self.weight = nn.Parameter(seeded_normal((c_out, c_in, k, k), std, gen, dtype))
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=dtype))
        self.k = k

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = self.k // 2
        if p:
            x = F.pad(x, (p, p, p, p), mode="reflect")
        b, c, h, w = x.shape[0], x.shape[1], x.shape[2] - 2 * p, x.shape[3] - 2 * p
        rows = max(1, self.tile_elems // (c * self.k * self.k * w))
        if rows >= h:
            return F.conv2d(x, self.weight, self.bias)
        out = x.new_empty(b, self.weight.shape[0], h, w)
        for r in range(0, h, rows):
            out[:, :, r : r + rows] = F.conv2d(x[:, :, r : r + rows + 2 * p], self.weight, self.bias)
        return out


class ResBlock(nn.Module):
    """``x + conv(relu(conv(x)))`` with ``n_convs`` layers and ReLU between them."""

    def __init__(self, channels: int, n_convs: int = 2, *, gen=None, gain: float = 1.0, dtype=DTYPE):
        super().__init__()
        self.convs = nn.ModuleList(
            ReflectConv(channels, channels, 3, gen=gen, gain=gain, dtype=dtype) for _ in range(n_convs)
        )

    def forward(self, x):
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.relu(h)
        return x + h


class RirDenoiser(nn.Module):
    """Residual-in-residual denoiser ``z + tail(blocks(z))``.

    ``blocks`` is a chain of :class:`ResBlock` (inner skips); the outer skip
    wraps the chain and a tail conv. With every kernel and bias at zero the
    map is the identity.
    """

    def __init__(
        self,
        channels: int,
        blocks: int = 2,
        convs: int = 2,
        *,
        gen=None,
        gain: float = 0.1,
        dtype=DTYPE,
    ):
        super().__init__()
        self.channels = channels
        self.blocks = nn.ModuleList(
            ResBlock(channels, convs, gen=gen, gain=gain, dtype=dtype) for _ in range(blocks)
        )
        self.tail = ReflectConv(channels, channels, 3, gen=gen, gain=gain, dtype=dtype)

    def forward(self, z):
        h = z
        for blk in self.blocks:
            h = blk(h)
        return z + self.tail(h)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
