"""Forward sensor model and synthetic scene generation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .cube import (
    RES_FACTORS,
    HyperCube,
    MultiResCube,
    SrtMatrix,
    validate_cube,
    validate_multires,
)
from .errors import DimensionMismatch, InvalidSpec, WavelengthOrder


@dataclass(frozen=True)
class Band:
    name: str
    center: float  # nm
    fwhm: float  # nm
    res: str


# Level-2A Sentinel-2 bands (B10 cirrus excluded).
SENTINEL2 = (
    Band("B1", 443.0, 20.0, "LOW"),
    Band("B2", 490.0, 65.0, "HR"),
    Band("B3", 560.0, 35.0, "HR"),
    Band("B4", 665.0, 30.0, "HR"),
    Band("B5", 705.0, 15.0, "MED"),
    Band("B6", 740.0, 15.0, "MED"),
    Band("B7", 783.0, 20.0, "MED"),
    Band("B8", 842.0, 115.0, "HR"),
    Band("B8A", 865.0, 20.0, "MED"),
    Band("B9", 945.0, 20.0, "LOW"),
    Band("B11", 1610.0, 90.0, "MED"),
    Band("B12", 2190.0, 180.0, "MED"),
)

# Six-band desk sensor: the four 10 m bands plus one 20 m and one 60 m band.
DESK6 = (
    SENTINEL2[1],
    SENTINEL2[2],
    SENTINEL2[3],
    SENTINEL2[7],
    Band("B11", 1610.0, 90.0, "MED"),
    Band("B12", 2190.0, 180.0, "LOW"),
)

SENSORS = {"sentinel2": SENTINEL2, "desk6": DESK6}


def sensor_for(bands_m: int) -> tuple[Band, ...]:
    if bands_m == 12:
        return SENTINEL2
    if bands_m == 6:
        return DESK6
    raise InvalidSpec(f"no built-in sensor with {bands_m} bands (have 6 and 12)")


def hsi_wavelengths(m: int, lo: float = 400.0, hi: float = 2500.0) -> np.ndarray:
    return np.linspace(lo, hi, m)


def gaussian_srt(wavelengths_h, bands: Sequence[Band]) -> SrtMatrix:
    """SRT rows as Gaussian responses at each band center, rows summing to 1.

    A band narrower than the HSI sampling still gets weight on its nearest
    HSI band, so no row is empty.
    """
    wl = np.asarray(wavelengths_h, dtype=float)
    rows = []
    for b in bands:
        sigma = b.fwhm / (2.0 * np.sqrt(2.0 * np.log(2.0)))
        r = np.exp(-0.5 * ((wl - b.center) / sigma) ** 2)
        if r.sum() < 1e-3:
            r = np.zeros_like(wl)
            r[np.argmin(np.abs(wl - b.center))] = 1.0
        rows.append(r / r.sum())
    return SrtMatrix(np.array(rows))


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    width: int = 24
    height: int = 24
    bands_h: int = 32
    bands_m: int = 6
    n_sources: int = 4
    seed: int = 0
    noise_sigma: float = 0.0
    library_size: int = 0
    library_jitter: float = 0.03

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0 or self.width % 6 or self.height % 6:
            raise InvalidSpec(f"width/height must be positive multiples of 6, got {self.width}x{self.height}")
        if not 0 < self.bands_m < self.bands_h:
            raise InvalidSpec(f"need 0 < bands_m < bands_h, got {self.bands_m}, {self.bands_h}")
        if self.n_sources < 2:
            raise InvalidSpec("n_sources must be >= 2")
        if self.n_sources > min(self.bands_m, self.width * self.height):
            raise InvalidSpec("n_sources exceeds min(bands_m, pixels)")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be >= 0")
        if self.library_size and self.library_size < self.n_sources:
            raise InvalidSpec("library_size must be 0 (free spectra) or >= n_sources")
        if self.library_jitter < 0:
            raise InvalidSpec("library_jitter must be >= 0")

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidSpec(f"malformed line {line!r}")
            k, v = (t.strip() for t in line.split("=", 1))
            if k not in types:
                raise InvalidSpec(f"unknown key {k!r}")
            kw[k] = float(v) if types[k] in (float, "float") else int(v)
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class MixingModel:
    endmembers: np.ndarray  # (M, N)
    abundances: np.ndarray  # (N, L)


def smooth_spectra(rng: np.random.Generator, wavelengths, n: int) -> np.ndarray:
    """``n`` smooth reflectance curves (sums of Gaussian bumps), columns in [0.05, 0.95]."""
    wl = np.asarray(wavelengths, dtype=float)
    lo, hi = wl[0], wl[-1]
    span = max(hi - lo, 1.0)
    out = np.empty((wl.size, n))
    for j in range(n):
        base = rng.uniform(0.1, 0.5) + rng.uniform(-0.15, 0.15) * (wl - lo) / span
        k = rng.integers(2, 6)
        centers = rng.uniform(lo, hi, size=k)
        widths = rng.uniform(0.05, 0.25, size=k) * span
        amps = rng.uniform(-0.3, 0.4, size=k)
        curve = base + (amps * np.exp(-0.5 * ((wl[:, None] - centers) / widths) ** 2)).sum(axis=1)
        cmin, cmax = curve.min(), curve.max()
        top = rng.uniform(0.5, 0.95)
        bot = rng.uniform(0.05, 0.3)
        if cmax - cmin < 1e-9:
            out[:, j] = 0.5 * (top + bot)
        else:
            out[:, j] = bot + (curve - cmin) * (top - bot) / (cmax - cmin)
    return out


LIBRARY_SEED = 20_240_917


def material_library(wavelengths, size: int) -> np.ndarray:
    """Fixed set of ``size`` smooth spectra shared by every library scene (M, size)."""
    return smooth_spectra(np.random.default_rng(LIBRARY_SEED), wavelengths, size)


def library_spectra(rng: np.random.Generator, wavelengths, n: int, size: int, jitter: float) -> np.ndarray:
    """``n`` distinct library members with per-scene gain and a smooth additive jitter."""
    lib = material_library(wavelengths, size)
    pick = rng.choice(size, size=n, replace=False)
    gain = rng.uniform(0.9, 1.1, size=n)
    wobble = smooth_spectra(rng, wavelengths, n) - 0.5
    return np.clip(lib[:, pick] * gain + jitter * wobble, 0.01, 1.0)


def smooth_abundances(
    rng: np.random.Generator, n: int, height: int, width: int, sharpness: float = 6.0
) -> np.ndarray:
    """Spatially smooth simplex fields (N, L) with one exactly pure pixel per source."""
    sigma = max(height, width) / 8.0
    logits = np.stack(
        [gaussian_filter(rng.standard_normal((height, width)), sigma, mode="reflect") for _ in range(n)]
    )
    logits /= logits.reshape(n, -1).std(axis=1)[:, None, None] + 1e-12
    logits *= sharpness
    logits -= logits.max(axis=0, keepdims=True)
    a = np.exp(logits)
    a /= a.sum(axis=0, keepdims=True)
    a = a.reshape(n, -1)
    # one pure pixel per source, at distinct locations
    anchors = rng.choice(height * width, size=n, replace=False)
    for k, pix in enumerate(anchors):
        a[:, pix] = 0.0
        a[k, pix] = 1.0
    return a


def synth_scene(spec: SceneSpec, wavelengths=None) -> tuple[HyperCube, MixingModel]:
    """Linear-mixture scene ``clip(E @ A + noise, 0, 1)``; deterministic in ``spec.seed``."""
    spec.validate()
    wl = hsi_wavelengths(spec.bands_h) if wavelengths is None else np.asarray(wavelengths, float)
    if wl.size != spec.bands_h:
        raise InvalidSpec(f"{wl.size} wavelengths for bands_h = {spec.bands_h}")
    rng = np.random.default_rng(spec.seed)
    if spec.library_size:
        e = library_spectra(rng, wl, spec.n_sources, spec.library_size, spec.library_jitter)
    else:
        e = smooth_spectra(rng, wl, spec.n_sources)
    a = smooth_abundances(rng, spec.n_sources, spec.height, spec.width)
    y = e @ a
    if spec.noise_sigma > 0:
        y = y + spec.noise_sigma * rng.standard_normal(y.shape)
    y = np.clip(y, 0.0, 1.0)
    return HyperCube(y, spec.width, spec.height, wl), MixingModel(e, a)


# ---------------------------------------------------------------------------
# Sensor model
# ---------------------------------------------------------------------------


def apply_srt(d: SrtMatrix, y_h: HyperCube, wavelengths_m=None) -> HyperCube:
    """Spectral degradation ``D @ Y_H``.

    ``wavelengths_m`` labels the output bands; by default the response-weighted
    mean wavelength of each row (falling back to band indices when a row has
    no positive mass).
    """
    dm = d.d
    if dm.shape[1] != y_h.n_bands:
        raise DimensionMismatch(f"SRT has {dm.shape[1]} columns, cube has {y_h.n_bands} bands")
    if wavelengths_m is None:
        mass = dm.sum(axis=1)
        wavelengths_m = (
            dm @ y_h.wavelengths / mass if np.all(mass > 0) else np.arange(dm.shape[0], dtype=float)
        )
        if np.any(np.diff(wavelengths_m) <= 0):
            wavelengths_m = np.arange(dm.shape[0], dtype=float)
    return HyperCube(dm @ y_h.data, y_h.width, y_h.height, wavelengths_m)


def _block_replicate(band: np.ndarray, s: int) -> np.ndarray:
    h, w = band.shape
    means = band.reshape(h // s, s, w // s, s).mean(axis=(1, 3))
    return np.repeat(np.repeat(means, s, axis=0), s, axis=1)


def degrade_multires(msi: HyperCube, classes: Sequence[str], blur_sigma: float = 0.0) -> MultiResCube:
    """Blur, block-average and re-replicate every non-HR band onto the HR grid."""
    classes = tuple(str(c).upper() for c in classes)
    if len(classes) != msi.n_bands:
        raise DimensionMismatch(f"{len(classes)} classes for {msi.n_bands} bands")
    if msi.width % 6 or msi.height % 6:
        raise DimensionMismatch(f"spatial dims {msi.width}x{msi.height} not divisible by 6")
    img = msi.image().copy()
    for b, cls in enumerate(classes):
        s = RES_FACTORS[cls]
        if s == 1:
            continue
        band = img[b]
        if blur_sigma > 0:
            band = gaussian_filter(band, blur_sigma, mode="reflect", truncate=3.0)
        img[b] = _block_replicate(band, s)
    out = MultiResCube(HyperCube.from_image(img, msi.wavelengths), classes)
    validate_multires(out)
    return out


def interp_matrix(wavelengths_m, wavelengths_h) -> np.ndarray:
    """(M, M_m) matrix of piecewise-linear interpolation weights, constant beyond the ends."""
    wm = np.asarray(wavelengths_m, dtype=float)
    wh = np.asarray(wavelengths_h, dtype=float)
    if np.any(np.diff(wm) <= 0) or np.any(np.diff(wh) <= 0):
        raise WavelengthOrder("wavelength lists must be strictly increasing")
    eye = np.eye(wm.size)
    return np.stack([np.interp(wh, wm, eye[j]) for j in range(wm.size)], axis=1)


def spectral_upsample_init(y_s: MultiResCube | HyperCube, wavelengths_h) -> HyperCube:
    """Per-pixel linear interpolation of the MSI spectrum onto the HSI grid, clipped to [0, 1]."""
    cube = y_s.cube if isinstance(y_s, MultiResCube) else y_s
    w = interp_matrix(cube.wavelengths, wavelengths_h)
    return HyperCube(np.clip(w @ cube.data, 0.0, 1.0), cube.width, cube.height, wavelengths_h)


# ---------------------------------------------------------------------------
# Data pairs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pair:
    y_s: MultiResCube
    y_h: HyperCube


def make_pair(
    spec: SceneSpec,
    bands: Sequence[Band] | None = None,
    blur_sigma: float = 1.0,
    srt: SrtMatrix | None = None,
) -> Pair:
    """One (multi-resolution MSI, ground-truth HSI) pair from a synthetic scene."""
    bands = tuple(bands) if bands is not None else sensor_for(spec.bands_m)
    if len(bands) != spec.bands_m:
        raise InvalidSpec(f"sensor has {len(bands)} bands, spec asks for {spec.bands_m}")
    y_h, _ = synth_scene(spec)
    srt = srt if srt is not None else gaussian_srt(y_h.wavelengths, bands)
    msi = apply_srt(srt, y_h, [b.center for b in bands])
    y_s = degrade_multires(msi, [b.res for b in bands], blur_sigma)
    validate_cube(y_s.cube)
    return Pair(y_s, y_h)


def make_dataset(
    n: int,
    base: SceneSpec,
    blur_sigma: float = 1.0,
    bands: Sequence[Band] | None = None,
) -> list[Pair]:
    """``n`` pairs with seeds ``base.seed, base.seed + 1, ...``."""
    return [
        make_pair(
            SceneSpec(**{**asdict(base), "seed": base.seed + i}),
            bands=bands,
            blur_sigma=blur_sigma,
        )
        for i in range(n)
    ]
