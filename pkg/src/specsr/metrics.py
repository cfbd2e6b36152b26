"""Reconstruction quality: PSNR, SAM, RMSE and SSIM.

PSNR and SSIM are computed per band and averaged over bands; the peak
value is 1 (normalized reflectance).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cube import HyperCube, write_envi
from .errors import ShapeMismatch, TooSmallForWindow, ZeroSpectrum

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_pair(x: HyperCube, ref: HyperCube) -> None:
    if (x.n_bands, x.height, x.width) != (ref.n_bands, ref.height, ref.width):
        raise ShapeMismatch(
            f"cube shapes differ: {(x.n_bands, x.height, x.width)} vs {(ref.n_bands, ref.height, ref.width)}"
        )


def psnr_bands(x: HyperCube, ref: HyperCube) -> np.ndarray:
    """Per-band PSNR in dB (``inf`` where the band matches exactly)."""
    _check_pair(x, ref)
    mse = np.mean((x.data - ref.data) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(1.0 / mse)


def psnr_details(x: HyperCube, ref: HyperCube) -> tuple[float, int]:
    """``(mean PSNR over bands with nonzero error, number of exact bands excluded)``."""
    per = psnr_bands(x, ref)
    finite = np.isfinite(per)
    if not finite.any():
        return math.inf, int(per.size)
    return float(per[finite].mean()), int((~finite).sum())


def psnr(x: HyperCube, ref: HyperCube) -> float:
    return psnr_details(x, ref)[0]


def sam(x: HyperCube, ref: HyperCube) -> tuple[float, HyperCube]:
    """Mean spectral angle (degrees) and the per-pixel angle map as a 1-band cube."""
    _check_pair(x, ref)
    nx = np.linalg.norm(x.data, axis=0)
    nr = np.linalg.norm(ref.data, axis=0)
    if np.any(nx == 0) or np.any(nr == 0):
        raise ZeroSpectrum("SAM is undefined for an all-zero pixel")
    # 2 atan2(|u - v|, |u + v|) on unit vectors: accurate near 0 and 180 degrees, unlike arccos
    u, v = x.data / nx, ref.data / nr
    ang = np.degrees(2.0 * np.arctan2(np.linalg.norm(u - v, axis=0), np.linalg.norm(u + v, axis=0)))
    ang = np.clip(ang, 0.0, 180.0)
    return float(ang.mean()), HyperCube(ang[None, :], x.width, x.height, np.array([1.0]))


def rmse(x: HyperCube, ref: HyperCube) -> float:
    _check_pair(x, ref)
    return float(np.sqrt(np.mean((x.data - ref.data) ** 2)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim_band(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over every fully contained 11x11 window of two 2-D images."""
    h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise TooSmallForWindow(f"{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window()

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def ssim(x: HyperCube, ref: HyperCube) -> float:
    _check_pair(x, ref)
    xi, ri = x.image(), ref.image()
    return float(np.mean([ssim_band(xi[k], ri[k]) for k in range(x.n_bands)]))


@dataclass(frozen=True, eq=False)
class MetricReport:
    psnr: float
    sam_mean: float
    rmse: float
    ssim: float
    sam_map: HyperCube
    psnr_excluded_bands: int = 0

    FIELDS = ("psnr_db", "sam_deg", "rmse", "ssim", "psnr_excluded_bands")
    HEADER_NOTE = "PSNR and SSIM are per-band means (peak 1.0); SAM is the mean per-pixel angle in degrees"

    def row(self) -> list[str]:
        return [repr(self.psnr), repr(self.sam_mean), repr(self.rmse), repr(self.ssim), str(self.psnr_excluded_bands)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        w.writerow(self.row())
        return buf.getvalue()

    def to_table(self) -> str:
        psnr_s = "inf" if math.isinf(self.psnr) else f"{self.psnr:.4f}"
        lines = [
            f"# {self.HEADER_NOTE}",
            f"{'PSNR [dB]':<12}{psnr_s:>12}",
            f"{'SAM [deg]':<12}{self.sam_mean:>12.4f}",
            f"{'RMSE':<12}{self.rmse:>12.6f}",
            f"{'SSIM':<12}{self.ssim:>12.4f}",
        ]
        if self.psnr_excluded_bands:
            lines.append(f"({self.psnr_excluded_bands} exact bands excluded from the PSNR mean)")
        return "\n".join(lines) + "\n"

    def write_sam_map(self, path):
        return write_envi(self.sam_map, path)


def evaluate(x: HyperCube, ref: HyperCube) -> MetricReport:
    p, excluded = psnr_details(x, ref)
    s, smap = sam(x, ref)
    return MetricReport(p, s, rmse(x, ref), ssim(x, ref), smap, excluded)
