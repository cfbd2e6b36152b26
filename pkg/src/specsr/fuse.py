"""Attention-guided fusion of the unfolded HSI with the high-resolution MSI bands.

    y_dn   = 2x2 average pool of Y~_H
    w_spec = sigmoid(W v_spec + b),       v_spec = band means of y_dn
    w_spat = sigmoid(conv5x5(v_spat) + c), v_spat = per-pixel mean of the HR bands
    y_up   = 2x2 replication of y_dn
    Z      = relu(entry([w_spec * y_up * w_spat ; Y~_S]))  -> R residual blocks
    Y*     = y_up + proj(Z)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .cube import HyperCube, MultiResCube
from .errors import MissingHrBands, OddDimensions, ShapeMismatch
from .layers import DTYPE, ReflectConv, ResBlock, cube_to_tensor, tensor_to_cube


def select_hr_bands(y_s: MultiResCube, n_hr: int = 4) -> HyperCube:
    """HR-tagged bands of ``y_s`` in wavelength order."""
    idx = y_s.hr_indices
    if len(idx) != n_hr:
        raise MissingHrBands(f"expected {n_hr} HR bands, found {len(idx)}")
    c = y_s.cube
    return HyperCube(c.data[idx], c.width, c.height, c.wavelengths[idx])


def downsample_avg4(y: HyperCube) -> HyperCube:
    if y.width % 2 or y.height % 2:
        raise OddDimensions(f"{y.width}x{y.height} is not divisible by 2")
    img = y.image().reshape(y.n_bands, y.height // 2, 2, y.width // 2, 2).mean(axis=(2, 4))
    return HyperCube.from_image(img, y.wavelengths)


def upsample_kron4(y_down: HyperCube) -> HyperCube:
    img = np.repeat(np.repeat(y_down.image(), 2, axis=1), 2, axis=2)
    return HyperCube.from_image(img, y_down.wavelengths)


def emphasize(w_spec, y_up: HyperCube, w_spat) -> HyperCube:
    """``Diag(w_spec) @ Y_up @ Diag(w_spat)`` as an elementwise product."""
    w_spec = np.asarray(w_spec, dtype=float)
    w_spat = np.asarray(w_spat, dtype=float)
    if w_spec.shape != (y_up.n_bands,) or w_spat.shape != (y_up.n_pixels,):
        raise ShapeMismatch(
            f"weights {w_spec.shape}, {w_spat.shape} do not match cube ({y_up.n_bands}, {y_up.n_pixels})"
        )
    return y_up.with_data(w_spec[:, None] * y_up.data * w_spat[None, :])


@dataclass(frozen=True)
class FusionConfig:
    res_blocks: int = 2
    spectral_attention: bool = True
    spatial_attention: bool = True


class FusionNet(nn.Module):
    """Trainable fusion stage; holds every fusion parameter block."""

    def __init__(self, m: int, n_hr: int = 4, cfg: FusionConfig = FusionConfig(), seed: int = 0, dtype=DTYPE):
        super().__init__()
        self.m, self.n_hr, self.cfg = m, n_hr, cfg
        gen = torch.Generator().manual_seed(seed + 7)
        c = m + n_hr
        self.fc_weight = nn.Parameter(torch.randn(m, m, generator=gen, dtype=dtype) * (1.0 / np.sqrt(m)))
        self.fc_bias = nn.Parameter(torch.zeros(m, dtype=dtype))
        self.spat_conv = ReflectConv(1, 1, 5, gen=gen, gain=0.5, dtype=dtype)
        self.entry = ReflectConv(c, c, 3, gen=gen, dtype=dtype)
        self.res = nn.ModuleList(ResBlock(c, 2, gen=gen, gain=0.3, dtype=dtype) for _ in range(cfg.res_blocks))
        self.proj = ReflectConv(c, m, 3, gen=gen, gain=0.1, dtype=dtype)

    # individual pieces, exposed for tests and the ablation harness
    def spectral_weights(self, y_dn: torch.Tensor) -> torch.Tensor:
        v_spec = y_dn.mean(dim=(2, 3))
        w = torch.sigmoid(v_spec @ self.fc_weight.T + self.fc_bias)
        if not self.cfg.spectral_attention:
            w = w.mean(dim=1, keepdim=True).expand_as(w)
        return w

    def spatial_weights(self, ys_hr: torch.Tensor) -> torch.Tensor:
        v_spat = ys_hr.mean(dim=1, keepdim=True)
        w = torch.sigmoid(self.spat_conv(v_spat))
        if not self.cfg.spatial_attention:
            w = w.mean(dim=(2, 3), keepdim=True).expand_as(w)
        return w

    def forward(self, y_tilde: torch.Tensor, ys_hr: torch.Tensor, return_parts: bool = False):
        b, m, h, w = y_tilde.shape
        if m != self.m or ys_hr.shape[1] != self.n_hr or ys_hr.shape[2:] != y_tilde.shape[2:]:
            raise ShapeMismatch(
                f"fusion expects ({self.m}, {self.n_hr}) bands on one grid, got {tuple(y_tilde.shape)}, {tuple(ys_hr.shape)}"
            )
        if h % 2 or w % 2:
            raise OddDimensions(f"{h}x{w} is not divisible by 2")
        y_dn = F.avg_pool2d(y_tilde, 2)
        y_up = y_dn.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
        w_spec = self.spectral_weights(y_dn)
        w_spat = self.spatial_weights(ys_hr)
        emph = w_spec[:, :, None, None] * y_up * w_spat
        z = F.relu(self.entry(torch.cat([emph, ys_hr], dim=1)))
        for blk in self.res:
            z = blk(z)
        y_res = self.proj(z)
        out = y_up + y_res
        if return_parts:
            return out, dict(y_dn=y_dn, y_up=y_up, w_spec=w_spec, w_spat=w_spat, emph=emph, z=z, y_res=y_res)
        return out


def _check_fc(p: FusionNet, m: int):
    if p.fc_weight.shape != (m, m):
        raise ShapeMismatch(f"spectral FC is {tuple(p.fc_weight.shape)}, cube has {m} bands")


def spectral_attention(y_down: HyperCube, p: FusionNet) -> np.ndarray:
    _check_fc(p, y_down.n_bands)
    with torch.no_grad():
        w = p.spectral_weights(cube_to_tensor(y_down, p.fc_weight.dtype))
    return w[0].to(torch.float64).numpy()


def spatial_attention(y_s_hr: HyperCube, p: FusionNet) -> np.ndarray:
    if y_s_hr.n_bands != p.n_hr:
        raise ShapeMismatch(f"expected {p.n_hr} HR bands, got {y_s_hr.n_bands}")
    with torch.no_grad():
        w = p.spatial_weights(cube_to_tensor(y_s_hr, p.fc_weight.dtype))
    return w[0, 0].to(torch.float64).numpy().reshape(-1)


def fuse_forward(y_h_tilde: HyperCube, y_s_hr: HyperCube, p: FusionNet) -> HyperCube:
    if (y_h_tilde.width, y_h_tilde.height) != (y_s_hr.width, y_s_hr.height):
        raise ShapeMismatch("HSI and HR MSI must share a pixel grid")
    dt = p.fc_weight.dtype
    with torch.no_grad():
        out = p(cube_to_tensor(y_h_tilde, dt), cube_to_tensor(y_s_hr, dt))
    return tensor_to_cube(out, y_h_tilde)
